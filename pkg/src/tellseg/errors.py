"""Exception taxonomy shared by all tellseg modules."""


class TellsegError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(TellsegError):
    """Malformed input bytes or text (bad magic, truncated record, ...)."""


class UnsupportedGeometryError(FormatError):
    """Shape type or geometry kind this parser does not handle."""


class GeometryError(TellsegError):
    """Degenerate or invalid geometry (open ring, zero area, singular affine)."""


class ShapeError(TellsegError):
    """Array dimensions incompatible with the requested operation."""


class ConfigError(TellsegError):
    """Parameter outside its allowed range or inconsistent configuration."""


class DataError(TellsegError):
    """Empty or unusable dataset / split / report inputs."""


class CapacityError(TellsegError):
    """Rejection sampling or similar bounded search exhausted its budget."""


class CoverageError(TellsegError):
    """Requested window not covered by any stored raster."""


class CompatibilityError(TellsegError):
    """Checkpoint does not match the target model registry."""


class ContractError(TellsegError):
    """Caller violated an operation's calling contract."""


class ConstructionError(TellsegError):
    """Model wiring produced an invalid structure (e.g. duplicate names)."""


class StateError(TellsegError):
    """Illegal state transition (e.g. CONFIRMED -> PREDICTED)."""


class RegistryLookupError(TellsegError):
    """Unknown id in the site registry."""


class IOFailure(TellsegError):
    """Filesystem write/read failed."""
