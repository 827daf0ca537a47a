"""Heatmap export, candidate extraction, geo transforms, and the site registry.

Heatmaps are written as P6 PPM images under a monotone blue-to-red palette
with a world-file sidecar, so any GIS can overlay them. Candidates are
8-connected components of the thresholded probability grid that clear a
configurable ground-area gate; the registry deduplicates candidates across
tiles by single-linkage clustering and tracks field-verification status with
an append-only audit log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, IOFailure, RegistryLookupError, StateError
from .geoingest import GeoRef, write_pnm, write_world_file

STATUSES = ("PREDICTED", "CONFIRMED", "REJECTED")
PROVENANCES = ("AI", "REMOTE_SENSING")
DEFAULT_DEDUPE_M = 250.0
DEFAULT_MIN_AREA_M2 = 2500.0

_EIGHT = np.ones((3, 3), dtype=int)


@dataclass
class Heatmap:
    grid: np.ndarray
    georef: GeoRef
    window_id: str = ""
    lineage: str = ""

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 2:
            raise ConfigError(f"heatmap: grid must be 2-D, got {g.shape}")
        if g.min() < 0.0 or g.max() > 1.0:
            raise ConfigError("heatmap: values must lie in [0,1]")
        self.grid = g


def pixel_to_world(georef: GeoRef, col, row):
    """World position of the given (fractional) pixel center."""
    return georef.pixel_to_world(col, row)


def world_to_pixel(georef: GeoRef, x, y):
    """Inverse affine: world meters back to fractional pixel indices."""
    return georef.world_to_pixel(x, y)


def label_components(mask: np.ndarray, connectivity: int = 8):
    """Connected components of a binary grid; returns (labels, count)."""
    structure = _EIGHT if connectivity == 8 else None
    labels, count = ndimage.label(np.asarray(mask) != 0, structure=structure)
    return labels, int(count)


def heat_palette(p: np.ndarray) -> np.ndarray:
    """Monotone blue(0) -> red(1) palette on [0,1]; red channel nondecreasing."""
    r = np.rint(255.0 * p)
    return np.stack([r, np.zeros_like(r), 255.0 - r]) / 255.0


def render_heatmap(grid: np.ndarray, georef: GeoRef, path, palette: str = "blue-red", comment: str | None = None):
    """Write grid as a PPM heatmap plus a bit-exact ASCII world file sidecar."""
    if palette != "blue-red":
        raise ConfigError(f"render_heatmap: unknown palette {palette!r}")
    hm = Heatmap(grid=grid, georef=georef)
    path = Path(path)
    try:
        write_pnm(path, heat_palette(hm.grid), comment=comment)
        write_world_file(path.with_suffix(".wld"), georef)
    except OSError as exc:
        raise IOFailure(f"render_heatmap: cannot write {path} ({exc})") from exc
    return path


@dataclass
class SiteCandidate:
    id: str
    centroid: tuple
    area_m2: float
    peak: float
    status: str = "PREDICTED"
    provenance: str = "AI"

    def __post_init__(self):
        if not (self.area_m2 > 0):
            raise ConfigError(f"{self.id}: area must be positive")
        if not (0.0 < self.peak <= 1.0):
            raise ConfigError(f"{self.id}: peak must lie in (0,1]")
        if not all(np.isfinite(self.centroid)):
            raise ConfigError(f"{self.id}: centroid must be finite")
        if self.status not in STATUSES or self.provenance not in PROVENANCES:
            raise ConfigError(f"{self.id}: bad status/provenance")


def extract_candidates(
    heatmap: Heatmap,
    threshold: float = 0.5,
    min_area_m2: float = DEFAULT_MIN_AREA_M2,
) -> list[SiteCandidate]:
    """Components of the binarized grid clearing the area gate, peak-sorted."""
    if not (0.0 <= threshold <= 1.0):
        raise ConfigError(f"extract_candidates: threshold {threshold} outside [0,1]")
    binary = heatmap.grid >= threshold
    labels, count = label_components(binary, connectivity=8)
    px_area = heatmap.georef.pixel_area
    found = []
    for lab in range(1, count + 1):
        member = labels == lab
        pixels = int(member.sum())
        area = pixels * px_area
        if area < min_area_m2:
            continue
        rows, cols = np.nonzero(member)
        cx, cy = pixel_to_world(heatmap.georef, cols.mean(), rows.mean())
        found.append(
            {
                "centroid": (float(cx), float(cy)),
                "area": float(area),
                "peak": float(heatmap.grid[member].max()),
            }
        )
    found.sort(key=lambda d: -d["peak"])
    prefix = heatmap.window_id or "AI"
    return [
        SiteCandidate(
            id=f"{prefix}.C{k + 1:02d}",
            centroid=d["centroid"],
            area_m2=d["area"],
            peak=d["peak"],
        )
        for k, d in enumerate(found)
    ]


# ---------------------------------------------------------------------------
# registry

_STATUS_RANK = {"PREDICTED": 0, "REJECTED": 1, "CONFIRMED": 2}


def _logical_clock():
    n = 0
    while True:
        yield f"T+{n:04d}"
        n += 1


@dataclass
class SiteRegistry:
    """Single-writer candidate registry with status transitions and audit log."""

    dedupe_distance: float = DEFAULT_DEDUPE_M
    entries: dict = field(default_factory=dict)
    audit: list = field(default_factory=list)
    clock: object = None

    def __post_init__(self):
        if self.clock is None:
            gen = _logical_clock()
            self.clock = lambda: next(gen)

    def _log(self, event: str) -> None:
        self.audit.append(f"{self.clock()}\t{event}")

    def merge(self, candidates) -> "SiteRegistry":
        """Single-linkage cluster existing entries plus new candidates."""
        pool = list(self.entries.values()) + list(candidates)
        n = len(pool)
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(n):
            for j in range(i + 1, n):
                dx = pool[i].centroid[0] - pool[j].centroid[0]
                dy = pool[i].centroid[1] - pool[j].centroid[1]
                if (dx * dx + dy * dy) ** 0.5 <= self.dedupe_distance:
                    parent[find(i)] = find(j)
        clusters: dict = {}
        for i in range(n):
            clusters.setdefault(find(i), []).append(pool[i])
        merged = {}
        for members in clusters.values():
            rep = max(members, key=lambda c: (c.peak, c.id))
            status = max(members, key=lambda c: _STATUS_RANK[c.status]).status
            if status != rep.status:
                rep = SiteCandidate(
                    id=rep.id,
                    centroid=rep.centroid,
                    area_m2=rep.area_m2,
                    peak=rep.peak,
                    status=status,
                    provenance=rep.provenance,
                )
            merged[rep.id] = rep
            if len(members) > 1:
                dropped = sorted(c.id for c in members if c.id != rep.id)
                self._log(f"merge {rep.id} <- {','.join(dropped)}")
        for cand in candidates:
            if cand.id in merged and cand.id not in self.entries:
                self._log(f"ingest {cand.id}")
        self.entries = dict(sorted(merged.items()))
        return self

    def update(self, candidate_id: str, status: str) -> "SiteRegistry":
        if candidate_id not in self.entries:
            raise RegistryLookupError(f"registry: unknown id {candidate_id!r}")
        if status not in STATUSES:
            raise ConfigError(f"registry: unknown status {status!r}")
        current = self.entries[candidate_id]
        if current.status != "PREDICTED" or status == "PREDICTED":
            raise StateError(f"registry: illegal transition {current.status} -> {status}")
        self.entries[candidate_id] = SiteCandidate(
            id=current.id,
            centroid=current.centroid,
            area_m2=current.area_m2,
            peak=current.peak,
            status=status,
            provenance=current.provenance,
        )
        self._log(f"status {candidate_id} PREDICTED->{status}")
        return self

    def counts(self) -> dict:
        out = {s: 0 for s in STATUSES}
        for c in self.entries.values():
            out[c.status] += 1
        return out

    def export_lines(self, header: str | None = None) -> str:
        lines = []
        if header:
            lines.append(f"# {header}")
        for c in self.entries.values():
            x, y = c.centroid
            lines.append(
                "\t".join(
                    (c.id, str(float(x)), str(float(y)), str(float(c.area_m2)), str(float(c.peak)), c.status, c.provenance)
                )
            )
        return "\n".join(lines) + "\n"

    def write(self, path, header: str | None = None) -> None:
        Path(path).write_text(self.export_lines(header=header), encoding="utf-8")
        Path(path).with_suffix(".audit.log").write_text("\n".join(self.audit) + "\n", encoding="utf-8")
