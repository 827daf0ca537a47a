"""Site geometry, sample windows, truth masks, raster store, dataset assembly.

World model: everything lives in EPSG:3857 meters. A sample window is an
axis-aligned square (default 2000 m) rasterized at a configurable resolution.
Rasters on disk are binary PGM (P5) / PPM (P6) images, maxval 255, each with a
6-line ASCII world file sidecar (same stem, extension ``.wld``) holding the
affine coefficients A, D, B, E, C, F; C/F locate the center of the top-left
pixel. Sites are polygons, either in the plain-text format
``id;x1 y1,x2 y2,...`` (outer ring, '#' comments, closing vertex optional) or
in the ESRI .shp subset (main file only, shape types 0 and 5).
"""

from __future__ import annotations

import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    CapacityError,
    ConfigError,
    CoverageError,
    DataError,
    FormatError,
    GeometryError,
    UnsupportedGeometryError,
)

SPLITS = ("TRAIN", "VAL", "TEST")
SOURCES = ("BING", "CORONA", "SYNTHETIC")

DEFAULT_SIDE_M = 2000.0
DEFAULT_FRACTIONS = (0.75, 0.15, 0.10)
DEFAULT_CLEARANCE_M = 100.0
REFERENCE_RESOLUTION = 512
DESK_RESOLUTION = 64


def stream(seed: int, *keys) -> np.random.Generator:
    """Derive an independent RNG stream from a global seed and string/int keys."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode("utf-8")))
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# Georeferencing


@dataclass(frozen=True)
class GeoRef:
    """Affine pixel->world map in world-file convention.

    x = a*col + b*row + c ; y = d*col + e*row + f, with (col, row) indexing
    pixel centers and (c, f) the world position of the top-left pixel center.
    """

    a: float
    d: float
    b: float
    e: float
    c: float
    f: float
    epsg: int = 3857

    def __post_init__(self):
        if not (self.a > 0):
            raise GeometryError(f"GeoRef: pixel x-size must be positive, got {self.a}")
        if not (self.e < 0):
            raise GeometryError(f"GeoRef: pixel y-size must be negative (north-up), got {self.e}")
        if self.det == 0:
            raise GeometryError("GeoRef: singular affine (a*e - b*d == 0)")
        if self.epsg != 3857:
            raise GeometryError(f"GeoRef: epsg must be 3857, got {self.epsg}")

    @property
    def det(self) -> float:
        return self.a * self.e - self.b * self.d

    @property
    def pixel_area(self) -> float:
        return abs(self.det)

    def pixel_to_world(self, col, row):
        x = self.a * np.asarray(col, dtype=float) + self.b * np.asarray(row, dtype=float) + self.c
        y = self.d * np.asarray(col, dtype=float) + self.e * np.asarray(row, dtype=float) + self.f
        return x, y

    def world_to_pixel(self, x, y):
        dx = np.asarray(x, dtype=float) - self.c
        dy = np.asarray(y, dtype=float) - self.f
        det = self.det
        col = (self.e * dx - self.b * dy) / det
        row = (-self.d * dx + self.a * dy) / det
        return col, row

    def to_lines(self) -> str:
        vals = (self.a, self.d, self.b, self.e, self.c, self.f)
        return "".join("%.17g\n" % v for v in vals)

    @classmethod
    def from_lines(cls, text: str, epsg: int = 3857) -> "GeoRef":
        parts = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if len(parts) != 6:
            raise FormatError(f"world file: expected 6 lines, got {len(parts)}")
        try:
            a, d, b, e, c, f = (float(p) for p in parts)
        except ValueError as exc:
            raise FormatError(f"world file: non-numeric line ({exc})") from exc
        return cls(a=a, d=d, b=b, e=e, c=c, f=f, epsg=epsg)


def write_world_file(path, georef: GeoRef) -> None:
    Path(path).write_text(georef.to_lines(), encoding="ascii")


def read_world_file(path) -> GeoRef:
    return GeoRef.from_lines(Path(path).read_text(encoding="ascii"))


# ---------------------------------------------------------------------------
# PNM raster I/O (PGM P5 grayscale, PPM P6 color; 8-bit only)


def write_pnm(path, array: np.ndarray, comment: str | None = None) -> None:
    """Write a [0,1] float array as P5 (h,w) or P6 (3,h,w), maxval 255."""
    arr = np.asarray(array, dtype=float)
    if arr.ndim == 2:
        magic, h, w = b"P5", arr.shape[0], arr.shape[1]
        payload = arr
    elif arr.ndim == 3 and arr.shape[0] == 3:
        magic, h, w = b"P6", arr.shape[1], arr.shape[2]
        payload = np.moveaxis(arr, 0, 2)  # interleave channels
    else:
        raise FormatError(f"write_pnm: expected (h,w) or (3,h,w), got {arr.shape}")
    data = np.clip(np.rint(payload * 255.0), 0, 255).astype(np.uint8)
    header = magic + b"\n"
    if comment:
        header += b"# " + comment.encode("utf-8") + b"\n"
    header += f"{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read P5/P6 bytes into a float array in [0,1]; P6 comes back as (3,h,w)."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PNM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    body = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    if body.size < need:
        raise FormatError(f"{path}: truncated pixel data ({body.size} of {need} bytes)")
    data = body.astype(np.float64) / 255.0
    if channels == 1:
        return data.reshape(h, w)
    return np.moveaxis(data.reshape(h, w, 3), 2, 0)


# ---------------------------------------------------------------------------
# Polygon helpers


def shoelace_area(ring) -> float:
    """Signed area of a ring (closing vertex optional)."""
    pts = _open_ring(ring)
    x = pts[:, 0]
    y = pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _open_ring(ring) -> np.ndarray:
    pts = np.asarray(ring, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise GeometryError(f"ring must be an (n>=3, 2) vertex list, got shape {pts.shape}")
    if np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    return pts


def points_in_ring(px: np.ndarray, py: np.ndarray, ring) -> np.ndarray:
    """Even-odd (crossing number) point-in-polygon test, vectorized over points."""
    pts = _open_ring(ring)
    xs = pts[:, 0]
    ys = pts[:, 1]
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    n = len(pts)
    j = n - 1
    for i in range(n):
        xi, yi = xs[i], ys[i]
        xj, yj = xs[j], ys[j]
        crosses = (yi > py) != (yj > py)
        if np.any(crosses):
            with np.errstate(divide="ignore", invalid="ignore"):
                xcross = (xj - xi) * (py - yi) / (yj - yi) + xi
            inside ^= crosses & (px < xcross)
        j = i
    return inside


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if v > 0:
            return 1
        if v < 0:
            return -1
        return 0

    o1 = orient(p1, p2, q1)
    o2 = orient(p1, p2, q2)
    o3 = orient(q1, q2, p1)
    o4 = orient(q1, q2, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2) and 0 not in (o3, o4)


def ring_is_simple(ring) -> bool:
    pts = _open_ring(ring)
    n = len(pts)
    edges = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex
            if _segments_cross(edges[i][0], edges[i][1], edges[j][0], edges[j][1]):
                return False
    return True


# ---------------------------------------------------------------------------
# Site shapes


@dataclass
class SiteShape:
    """A named polygon; rings[0] is the outer boundary, stored closed."""

    id: str
    rings: list

    @property
    def outer(self) -> np.ndarray:
        return np.asarray(self.rings[0], dtype=float)

    def bbox(self):
        pts = self.outer
        return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()


def validate_site(shape: SiteShape) -> SiteShape:
    if not shape.rings:
        raise GeometryError(f"{shape.id}: no rings")
    for k, ring in enumerate(shape.rings):
        pts = np.asarray(ring, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GeometryError(f"{shape.id}: ring {k} is not a vertex list")
        if len(pts) < 4:
            raise GeometryError(f"{shape.id}: ring {k} has {len(pts)} vertices, need >= 4 stored")
        if not np.array_equal(pts[0], pts[-1]):
            raise GeometryError(f"{shape.id}: ring {k} is open (first vertex != last)")
        if len(np.unique(pts[:-1], axis=0)) < 3:
            raise GeometryError(f"{shape.id}: ring {k} has fewer than 3 distinct vertices")
    if shoelace_area(shape.rings[0]) == 0.0:
        raise GeometryError(f"{shape.id}: outer ring has zero area")
    if not ring_is_simple(shape.rings[0]):
        raise GeometryError(f"{shape.id}: outer ring is self-intersecting")
    return shape


def centroid(shape: SiteShape):
    """Area-weighted (shoelace) centroid of the outer ring, in meters."""
    pts = _open_ring(shape.outer)
    x = pts[:, 0]
    y = pts[:, 1]
    xn = np.roll(x, -1)
    yn = np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * float(np.sum(cross))
    if area == 0.0:
        raise GeometryError(f"{shape.id}: zero-area ring has no centroid")
    cx = float(np.sum((x + xn) * cross)) / (6.0 * area)
    cy = float(np.sum((y + yn) * cross)) / (6.0 * area)
    return cx, cy


# --- text format -----------------------------------------------------------


def parse_sites(data: bytes, format: str = "TEXT") -> list[SiteShape]:
    """Parse site polygons from the text format or the ESRI .shp subset."""
    fmt = format.upper()
    if fmt == "TEXT":
        return _parse_sites_text(data)
    if fmt == "SHP":
        return _parse_sites_shp(data)
    raise ConfigError(f"parse_sites: unknown format {format!r} (expected SHP or TEXT)")


def _parse_sites_text(data: bytes) -> list[SiteShape]:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"sites text: not valid UTF-8 ({exc})") from exc
    shapes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ";" not in line:
            raise FormatError(f"sites text line {lineno}: missing 'id;' separator")
        sid, coords = line.split(";", 1)
        sid = sid.strip()
        verts = []
        for tok in coords.split(","):
            tok = tok.strip()
            if not tok:
                continue
            pieces = tok.split()
            if len(pieces) != 2:
                raise FormatError(f"sites text line {lineno}: bad vertex {tok!r}")
            verts.append((float(pieces[0]), float(pieces[1])))
        if len(verts) >= 2 and verts[0] != verts[-1]:
            verts.append(verts[0])  # auto-close
        shapes.append(validate_site(SiteShape(id=sid, rings=[verts])))
    return shapes


def emit_sites(shapes: list[SiteShape]) -> bytes:
    """Canonical text emission: outer ring only, closed, shortest-repr floats."""
    lines = []
    for s in shapes:
        pts = ",".join(f"{float(x)} {float(y)}" for x, y in np.asarray(s.rings[0], dtype=float))
        lines.append(f"{s.id};{pts}\n")
    return "".join(lines).encode("utf-8")


# --- ESRI .shp subset ------------------------------------------------------

_SHP_FILE_CODE = 9994
_SHP_NULL = 0
_SHP_POLYGON = 5


def _parse_sites_shp(data: bytes) -> list[SiteShape]:
    if len(data) < 100:
        raise FormatError(f".shp: header needs 100 bytes, file has {len(data)}")
    (code,) = struct.unpack(">i", data[0:4])
    if code != _SHP_FILE_CODE:
        raise FormatError(f".shp: bad file code {code} (expected {_SHP_FILE_CODE})")
    (length_words,) = struct.unpack(">i", data[24:28])
    file_len = length_words * 2
    (shape_type,) = struct.unpack("<i", data[32:36])
    if shape_type not in (_SHP_NULL, _SHP_POLYGON):
        raise UnsupportedGeometryError(f".shp: unsupported file shape type {shape_type}")
    shapes = []
    pos = 100
    index = 0
    while pos + 8 <= min(file_len, len(data)):
        recno, content_words = struct.unpack(">ii", data[pos : pos + 8])
        pos += 8
        content = data[pos : pos + content_words * 2]
        if len(content) < 4:
            raise FormatError(f".shp record {recno}: truncated content")
        pos += content_words * 2
        index += 1
        (rtype,) = struct.unpack("<i", content[0:4])
        if rtype == _SHP_NULL:
            continue
        if rtype != _SHP_POLYGON:
            raise UnsupportedGeometryError(f".shp record {index}: unsupported shape type {rtype}")
        nparts, npoints = struct.unpack("<ii", content[36:44])
        parts = struct.unpack(f"<{nparts}i", content[44 : 44 + 4 * nparts])
        pts_off = 44 + 4 * nparts
        flat = struct.unpack(f"<{2 * npoints}d", content[pts_off : pts_off + 16 * npoints])
        pts = [(flat[2 * i], flat[2 * i + 1]) for i in range(npoints)]
        rings = []
        bounds = list(parts) + [npoints]
        for k in range(nparts):
            ring = pts[bounds[k] : bounds[k + 1]]
            if len(ring) < 4 or ring[0] != ring[-1]:
                raise GeometryError(f".shp record {recno}: ring {k} is open or too short")
            rings.append(ring)
        shapes.append(validate_site(SiteShape(id=f"GHR.{recno:03d}", rings=rings)))
    return shapes


# ---------------------------------------------------------------------------
# Sample windows


@dataclass(frozen=True)
class SampleWindow:
    """Axis-aligned square sampling window, (center, side) in meters."""

    center: tuple
    side: float = DEFAULT_SIDE_M
    resolution: int = DESK_RESOLUTION

    def __post_init__(self):
        if not (self.side > 0):
            raise ConfigError(f"window side must be positive, got {self.side}")
        if self.resolution < 8:
            raise ConfigError(f"window resolution must be >= 8, got {self.resolution}")

    @property
    def pixel_size(self) -> float:
        return self.side / self.resolution

    def rect(self):
        cx, cy = self.center
        h = self.side / 2.0
        return (cx - h, cy - h, cx + h, cy + h)

    def georef(self) -> GeoRef:
        px = self.pixel_size
        cx, cy = self.center
        return GeoRef(
            a=px,
            d=0.0,
            b=0.0,
            e=-px,
            c=cx - self.side / 2.0 + px / 2.0,
            f=cy + self.side / 2.0 - px / 2.0,
        )


def make_window(shape: SiteShape, side: float = DEFAULT_SIDE_M, resolution: int = DESK_RESOLUTION) -> SampleWindow:
    return SampleWindow(center=centroid(shape), side=side, resolution=resolution)


def rasterize_mask(shapes: list[SiteShape], window: SampleWindow) -> np.ndarray:
    """Binary mask: 1 where the pixel center is inside any outer ring (even-odd)."""
    n = window.resolution
    g = window.georef()
    cols, rows = np.meshgrid(np.arange(n), np.arange(n))
    px, py = g.pixel_to_world(cols, rows)
    mask = np.zeros((n, n), dtype=np.uint8)
    wx0, wy0, wx1, wy1 = window.rect()
    for s in shapes:
        bx0, by0, bx1, by1 = s.bbox()
        if bx1 < wx0 or bx0 > wx1 or by1 < wy0 or by0 > wy1:
            continue
        if len(s.rings) > 1:
            warnings.warn(f"{s.id}: inner rings are ignored when rasterizing", stacklevel=2)
        mask |= points_in_ring(px, py, s.outer).astype(np.uint8)
    return mask


# ---------------------------------------------------------------------------
# Negative sampling

_MAX_SAMPLING_ATTEMPTS = 100_000


def _point_segment_dist(px, py, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    L2 = vx * vx + vy * vy
    if L2 == 0:
        return math.hypot(px - ax, py - ay)
    t = max(0.0, min(1.0, ((px - ax) * vx + (py - ay) * vy) / L2))
    return math.hypot(px - (ax + t * vx), py - (ay + t * vy))


def _rect_polygon_distance(rect, ring) -> float:
    """Euclidean distance between an axis-aligned rect and a polygon (0 if they meet)."""
    x0, y0, x1, y1 = rect
    pts = _open_ring(ring)
    if np.any((pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)):
        return 0.0
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    cx = np.array([p[0] for p in corners])
    cy = np.array([p[1] for p in corners])
    if np.any(points_in_ring(cx, cy, pts)):
        return 0.0
    rect_edges = [(corners[i], corners[(i + 1) % 4]) for i in range(4)]
    n = len(pts)
    best = math.inf
    for i in range(n):
        a = pts[i]
        b = pts[(i + 1) % n]
        for (r1, r2) in rect_edges:
            if _segments_cross(a, b, r1, r2):
                return 0.0
            best = min(
                best,
                _point_segment_dist(a[0], a[1], r1[0], r1[1], r2[0], r2[1]),
                _point_segment_dist(b[0], b[1], r1[0], r1[1], r2[0], r2[1]),
                _point_segment_dist(r1[0], r1[1], a[0], a[1], b[0], b[1]),
                _point_segment_dist(r2[0], r2[1], a[0], a[1], b[0], b[1]),
            )
    return best


def sample_negatives(
    bounds,
    count: int,
    exclusions: list[SiteShape],
    min_clearance: float = DEFAULT_CLEARANCE_M,
    rng: np.random.Generator | None = None,
    side: float = DEFAULT_SIDE_M,
    resolution: int = DESK_RESOLUTION,
) -> list[SampleWindow]:
    """Rejection-sample windows whose clearance to every exclusion exceeds min_clearance."""
    if count < 0:
        raise ConfigError(f"sample_negatives: count must be >= 0, got {count}")
    if count == 0:
        return []
    if rng is None:
        rng = np.random.default_rng()
    x0, y0, x1, y1 = bounds
    lo_x, hi_x = x0 + side / 2.0, x1 - side / 2.0
    lo_y, hi_y = y0 + side / 2.0, y1 - side / 2.0
    if lo_x > hi_x or lo_y > hi_y:
        raise ConfigError(f"sample_negatives: bounds {bounds} cannot fit a {side} m window")
    dilated = []
    for s in exclusions:
        bx0, by0, bx1, by1 = s.bbox()
        dilated.append((s, (bx0 - min_clearance, by0 - min_clearance, bx1 + min_clearance, by1 + min_clearance)))
    out = []
    attempts = 0
    while len(out) < count:
        if attempts >= _MAX_SAMPLING_ATTEMPTS:
            raise CapacityError(
                f"sample_negatives: placed {len(out)}/{count} windows in {attempts} attempts"
            )
        attempts += 1
        cx = rng.uniform(lo_x, hi_x)
        cy = rng.uniform(lo_y, hi_y)
        rect = (cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0)
        ok = True
        for s, dbox in dilated:
            if rect[2] < dbox[0] or rect[0] > dbox[2] or rect[3] < dbox[1] or rect[1] > dbox[3]:
                continue
            if _rect_polygon_distance(rect, s.outer) <= min_clearance:
                ok = False
                break
        if ok:
            out.append(SampleWindow(center=(cx, cy), side=side, resolution=resolution))
    return out


# ---------------------------------------------------------------------------
# Raster store


@dataclass
class StoredRaster:
    path: Path
    georef: GeoRef
    height: int
    width: int
    channels: int
    source: str | None = None
    _data: np.ndarray | None = field(default=None, repr=False)

    def data(self) -> np.ndarray:
        if self._data is None:
            self._data = read_pnm(self.path)
        return self._data


class RasterStore:
    """Directory of PGM/PPM rasters with world-file sidecars.

    Rasters directly under the root are untagged; rasters inside a first-level
    subdirectory carry that directory's (uppercased) name as their source tag.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.rasters: list[StoredRaster] = []
        if not self.root.is_dir():
            raise DataError(f"raster store: {self.root} is not a directory")
        for p in sorted(self.root.rglob("*")):
            if p.suffix.lower() not in (".pgm", ".ppm") or not p.is_file():
                continue
            wld = p.with_suffix(p.suffix + ".wld")
            if not wld.exists():
                wld = p.with_suffix(".wld")
            if not wld.exists():
                raise FormatError(f"raster store: {p} has no world file sidecar")
            georef = read_world_file(wld)
            h, w, ch = _pnm_dims(p)
            rel = p.relative_to(self.root)
            source = rel.parts[0].upper() if len(rel.parts) > 1 else None
            self.rasters.append(
                StoredRaster(path=p, georef=georef, height=h, width=w, channels=ch, source=source)
            )

    def covering(self, window: SampleWindow, source: str | None = None) -> list[StoredRaster]:
        hits = []
        for r in self.rasters:
            if source is not None and r.source is not None and r.source != source.upper():
                continue
            if _covers(r, window):
                hits.append(r)
        return hits


def _pnm_dims(path) -> tuple:
    arr = read_pnm(path)  # desk-scale rasters are small; eager read keeps this simple
    if arr.ndim == 2:
        return arr.shape[0], arr.shape[1], 1
    return arr.shape[1], arr.shape[2], 3


def _covers(raster: StoredRaster, window: SampleWindow) -> bool:
    x0, y0, x1, y1 = window.rect()
    corners_x = np.array([x0, x1, x1, x0])
    corners_y = np.array([y0, y0, y1, y1])
    col, row = raster.georef.world_to_pixel(corners_x, corners_y)
    return bool(
        np.all(col >= -0.5)
        and np.all(col <= raster.width - 0.5)
        and np.all(row >= -0.5)
        and np.all(row <= raster.height - 0.5)
    )


def extract_tile(store: RasterStore, window: SampleWindow, source: str | None = None):
    """Resample one window out of the store: (3, res, res) image in [0,1] + GeoRef.

    The covering raster with the smallest pixel area wins; ties break on the
    lexicographically smallest path. Grayscale rasters are replicated to 3
    channels. Sampling is bilinear at output pixel centers.
    """
    hits = store.covering(window, source=source)
    if not hits:
        raise CoverageError(
            f"extract_tile: window rect {window.rect()} not covered by any stored raster"
            + (f" with source {source}" if source else "")
            + f" (store has {len(store.rasters)} rasters)"
        )
    hits.sort(key=lambda r: (r.georef.pixel_area, str(r.path)))
    raster = hits[0]
    data = raster.data()
    if data.ndim == 2:
        data = data[None, :, :]
    n = window.resolution
    g = window.georef()
    cols, rows = np.meshgrid(np.arange(n), np.arange(n))
    wx, wy = g.pixel_to_world(cols, rows)
    scol, srow = raster.georef.world_to_pixel(wx, wy)
    scol = np.clip(scol, 0.0, raster.width - 1.0)
    srow = np.clip(srow, 0.0, raster.height - 1.0)
    c0 = np.floor(scol).astype(int)
    r0 = np.floor(srow).astype(int)
    c1 = np.minimum(c0 + 1, raster.width - 1)
    r1 = np.minimum(r0 + 1, raster.height - 1)
    fc = scol - c0
    fr = srow - r0
    out = (
        data[:, r0, c0] * (1 - fr) * (1 - fc)
        + data[:, r0, c1] * (1 - fr) * fc
        + data[:, r1, c0] * fr * (1 - fc)
        + data[:, r1, c1] * fr * fc
    )
    if out.shape[0] == 1:
        out = np.repeat(out, 3, axis=0)
    return out, g


# ---------------------------------------------------------------------------
# Tile samples and manifests


@dataclass
class TileSample:
    id: str
    image: np.ndarray  # (3, n, n) in [0,1]
    mask: np.ndarray  # (n, n) of {0,1}
    georef: GeoRef
    source: str
    label: bool
    covered_sites: list

    def validate(self) -> "TileSample":
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise GeometryError(f"{self.id}: image must be (3,n,n), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise GeometryError(f"{self.id}: mask {self.mask.shape} != image {self.image.shape[1:]}")
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise GeometryError(f"{self.id}: mask values must be 0/1, got {vals}")
        if self.label != bool(self.mask.any()):
            raise GeometryError(f"{self.id}: label inconsistent with mask popcount")
        if self.source not in SOURCES:
            raise ConfigError(f"{self.id}: source {self.source} not in {SOURCES}")
        return self


def build_tile_sample(
    store: RasterStore,
    window: SampleWindow,
    shapes: list[SiteShape],
    sample_id: str,
    source: str,
) -> TileSample:
    image, georef = extract_tile(store, window, source=source if source != "SYNTHETIC" else None)
    wx0, wy0, wx1, wy1 = window.rect()
    mask = np.zeros((window.resolution, window.resolution), dtype=np.uint8)
    covered = []
    for s in shapes:
        bx0, by0, bx1, by1 = s.bbox()
        if bx1 < wx0 or bx0 > wx1 or by1 < wy0 or by0 > wy1:
            continue
        part = rasterize_mask([s], window)
        if part.any():
            covered.append(s.id)
            mask |= part
    return TileSample(
        id=sample_id,
        image=image,
        mask=mask,
        georef=georef,
        source=source,
        label=bool(mask.any()),
        covered_sites=covered,
    ).validate()


@dataclass
class ManifestEntry:
    id: str
    split: str
    label: bool
    image_path: str
    mask_path: str
    source: str
    center: tuple


@dataclass
class DatasetManifest:
    entries: list
    seed: int
    fractions: tuple = DEFAULT_FRACTIONS

    def counts(self) -> dict:
        out = {s: {"pos": 0, "neg": 0} for s in SPLITS}
        for e in self.entries:
            out[e.split]["pos" if e.label else "neg"] += 1
        return out

    def split_sizes(self) -> tuple:
        c = self.counts()
        return tuple(c[s]["pos"] + c[s]["neg"] for s in SPLITS)

    def select(self, split: str | None = None, sources: tuple | None = None) -> list:
        out = []
        for e in self.entries:
            if split is not None and e.split != split:
                continue
            if sources is not None and e.source not in sources:
                continue
            out.append(e)
        return out

    def validate(self) -> "DatasetManifest":
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest: duplicate sample ids")
        total = len(self.entries)
        for frac, size in zip(self.fractions, self.split_sizes()):
            if abs(size - frac * total) > 1.0 + 1e-9:
                raise DataError(
                    f"manifest: split size {size} deviates more than 1 from {frac}*{total}"
                )
        return self


def _ceil_boundaries(targets) -> list:
    """Cumulative-ceiling boundaries over a monotone sequence of real targets."""
    return [0] + [math.ceil(t - 1e-9) for t in targets]


def split_sizes_for(n: int, fractions) -> tuple:
    """Split sizes via cumulative-ceiling rounding; gives 156/32/20 for 208 at (.75,.15,.10)."""
    cum = np.cumsum(fractions) * n
    b = _ceil_boundaries(cum)
    b[-1] = n
    return tuple(b[k + 1] - b[k] for k in range(len(fractions)))


def assemble_dataset(
    positives: list,
    negatives: list,
    fractions=DEFAULT_FRACTIONS,
    seed: int = 0,
) -> DatasetManifest:
    """Stratified TRAIN/VAL/TEST assignment over manifest entries, seeded.

    Split totals come from cumulative-ceiling rounding of the fractions; the
    positive class is then apportioned to the splits by cumulative-ceiling
    against the running split sizes, so both the totals and the per-split
    class balance stay within one sample of the exact fractions.
    """
    if len(fractions) != 3:
        raise ConfigError(f"fractions must have 3 components, got {fractions}")
    for f in fractions:
        if not (0.0 <= f <= 1.0):
            raise ConfigError(f"fraction {f} outside [0,1]")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions {fractions} do not sum to 1")
    positives = list(positives)
    negatives = list(negatives)
    n_pos, n_neg = len(positives), len(negatives)
    total = n_pos + n_neg
    sizes = split_sizes_for(total, fractions) if total else (0, 0, 0)
    if total:
        cum_sizes = np.cumsum(sizes)
        pos_bounds = _ceil_boundaries(n_pos * cum_sizes / total)
        pos_bounds[-1] = n_pos
    else:
        pos_bounds = [0, 0, 0, 0]
    pos_counts = [pos_bounds[k + 1] - pos_bounds[k] for k in range(3)]
    neg_counts = [sizes[k] - pos_counts[k] for k in range(3)]
    rng = stream(seed, "split")
    entries = []
    for group, counts in ((positives, pos_counts), (negatives, neg_counts)):
        order = rng.permutation(len(group))
        at = 0
        for k, split in enumerate(SPLITS):
            for idx in order[at : at + counts[k]]:
                entries.append(replace(group[idx], split=split))
            at += counts[k]
    entries.sort(key=lambda e: (SPLITS.index(e.split), e.id))
    return DatasetManifest(entries=entries, seed=seed, fractions=tuple(fractions)).validate()


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = ["# seed=%d\tfractions=%s\n" % (manifest.seed, ",".join(str(f) for f in manifest.fractions))]
    for e in manifest.entries:
        cx, cy = e.center
        lines.append(
            "\t".join(
                (e.id, e.split, "1" if e.label else "0", e.image_path, e.mask_path, e.source, f"{float(cx)},{float(cy)}")
            )
            + "\n"
        )
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    seed = 0
    fractions = DEFAULT_FRACTIONS
    entries = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if raw.startswith("#"):
            for tok in raw[1:].split():
                if tok.startswith("seed="):
                    seed = int(tok[5:])
                elif tok.startswith("fractions="):
                    fractions = tuple(float(v) for v in tok[10:].split(","))
            continue
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 7:
            raise FormatError(f"manifest: expected 7 tab-separated fields, got {len(parts)}")
        sid, split, label, image_path, mask_path, source, center = parts
        if split not in SPLITS:
            raise FormatError(f"manifest: unknown split {split!r}")
        cx, cy = (float(v) for v in center.split(","))
        entries.append(
            ManifestEntry(
                id=sid,
                split=split,
                label=label == "1",
                image_path=image_path,
                mask_path=mask_path,
                source=source,
                center=(cx, cy),
            )
        )
    return DatasetManifest(entries=entries, seed=seed, fractions=fractions).validate()


def load_tile(entry: ManifestEntry, base_dir) -> tuple:
    """Load (image (3,n,n), mask (n,n)) for a manifest entry."""
    base = Path(base_dir)
    image = read_pnm(base / entry.image_path)
    if image.ndim == 2:
        image = np.repeat(image[None, :, :], 3, axis=0)
    mask = (read_pnm(base / entry.mask_path) >= 0.5).astype(np.uint8)
    return image, mask


# ---------------------------------------------------------------------------
# Synthetic desk-scale scenes


@dataclass
class SynthConfig:
    tiles: int = 208
    positive_fraction: float = 88.0 / 208.0
    resolution: int = DESK_RESOLUTION
    side: float = DEFAULT_SIDE_M
    blob_radius: tuple = (150.0, 450.0)
    noise: float = 0.04
    source_mode: str = "synthetic"  # or "mixed" -> alternate BING / CORONA tags
    satellite_prob: float = 0.15
    clearance: float = DEFAULT_CLEARANCE_M
    origin: tuple = (4_900_000.0, 3_920_000.0)
    background: float = 0.32


def _ellipse_shape(sid: str, cx, cy, ra, rb, theta, vertices: int = 32) -> SiteShape:
    t = np.linspace(0.0, 2.0 * math.pi, vertices, endpoint=False)
    u = ra * np.cos(t)
    v = rb * np.sin(t)
    x = cx + u * math.cos(theta) - v * math.sin(theta)
    y = cy + u * math.sin(theta) + v * math.cos(theta)
    ring = [(float(a), float(b)) for a, b in zip(x, y)]
    ring.append(ring[0])
    return validate_site(SiteShape(id=sid, rings=[ring]))


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


class _Blob:
    def __init__(self, shape, cx, cy, ra, rb, theta, amp):
        self.shape = shape
        self.cx, self.cy, self.ra, self.rb, self.theta, self.amp = cx, cy, ra, rb, theta, amp


def _paint_blobs(height, width, georef, blobs) -> np.ndarray:
    """Additive blob intensity on a scene grid: hard support on the polygon, soft dome inside."""
    out = np.zeros((height, width))
    for b in blobs:
        r = max(b.ra, b.rb)
        col0, row1 = georef.world_to_pixel(b.cx - r - 2 * georef.a, b.cy - r + 2 * georef.e)
        col1, row0 = georef.world_to_pixel(b.cx + r + 2 * georef.a, b.cy + r - 2 * georef.e)
        c0, c1 = max(0, int(col0)), min(width, int(col1) + 2)
        r0, r1 = max(0, int(row0)), min(height, int(row1) + 2)
        if c0 >= c1 or r0 >= r1:
            continue
        cols, rows = np.meshgrid(np.arange(c0, c1), np.arange(r0, r1))
        px, py = georef.pixel_to_world(cols, rows)
        dx, dy = px - b.cx, py - b.cy
        u = dx * math.cos(b.theta) + dy * math.sin(b.theta)
        v = -dx * math.sin(b.theta) + dy * math.cos(b.theta)
        rho = np.sqrt((u / b.ra) ** 2 + (v / b.rb) ** 2)
        inside = points_in_ring(px, py, b.shape.outer)
        dome = _smoothstep((1.0 - rho) / 0.6)
        out[r0:r1, c0:c1] += inside * (0.3 * b.amp + 0.7 * b.amp * dome)
    return out


def synth_generate(config: SynthConfig, out_dir, seed: int = 0):
    """Generate scenes, sites, tiles, and a split manifest; returns (store, sites, manifest)."""
    if not (0.0 <= config.positive_fraction <= 1.0):
        raise ConfigError(f"positive_fraction {config.positive_fraction} outside [0,1]")
    if config.blob_radius[1] >= config.side / 2.0:
        raise ConfigError(
            f"blob radius {config.blob_radius[1]} m does not fit a {config.side} m window"
        )
    if config.source_mode not in ("synthetic", "mixed"):
        raise ConfigError(f"source_mode must be 'synthetic' or 'mixed', got {config.source_mode}")
    out = Path(out_dir)
    rng = stream(seed, "synth")
    n_pos = int(round(config.tiles * config.positive_fraction))
    n_neg = config.tiles - n_pos
    grid = max(3, math.ceil(math.sqrt(config.tiles)))
    px = config.side / config.resolution
    scene_n = grid * config.resolution
    x0, y0 = config.origin
    scene_georef = GeoRef(a=px, d=0.0, b=0.0, e=-px, c=x0 + px / 2.0, f=y0 + grid * config.side - px / 2.0)

    # scatter positive blobs over distinct grid cells, centers snapped to pixel lines
    cells = rng.choice(grid * grid, size=n_pos, replace=False)
    sites, blobs, primaries = [], [], []
    sid = 0
    max_jitter = int(0.12 * config.resolution)
    for cell in cells:
        ci, cj = int(cell) % grid, int(cell) // grid
        jx, jy = (int(v) for v in rng.integers(-max_jitter, max_jitter + 1, size=2))
        if ci == 0:
            jx = abs(jx)  # keep edge-cell windows inside the scene
        if ci == grid - 1:
            jx = -abs(jx)
        if cj == 0:
            jy = abs(jy)
        if cj == grid - 1:
            jy = -abs(jy)
        cx = x0 + (ci * config.resolution + config.resolution // 2 + jx) * px
        cy = y0 + (cj * config.resolution + config.resolution // 2 + jy) * px
        ra = rng.uniform(*config.blob_radius)
        rb = ra * rng.uniform(0.55, 0.95)
        theta = rng.uniform(0.0, math.pi)
        amp = rng.uniform(0.35, 0.5)
        sid += 1
        shape = _ellipse_shape(f"GHR.{sid:03d}", cx, cy, ra, rb, theta)
        blob = _Blob(shape, cx, cy, ra, rb, theta, amp)
        sites.append(shape)
        blobs.append(blob)
        primaries.append(shape)
        if rng.random() < config.satellite_prob:
            off = rng.uniform(0.22, 0.32) * config.side
            ang = rng.uniform(0.0, 2.0 * math.pi)
            scx, scy = cx + off * math.cos(ang), cy + off * math.sin(ang)
            sra = ra * rng.uniform(0.35, 0.55)
            srb = sra * rng.uniform(0.6, 0.95)
            stheta = rng.uniform(0.0, math.pi)
            sid += 1
            sshape = _ellipse_shape(f"GHR.{sid:03d}", scx, scy, sra, srb, stheta)
            sites.append(sshape)
            blobs.append(_Blob(sshape, scx, scy, sra, srb, stheta, amp * 0.8))

    relief = _paint_blobs(scene_n, scene_n, scene_georef, blobs)

    def scene_gray(noise_seed: str) -> np.ndarray:
        srng = stream(seed, "synth", noise_seed)
        field_ = gaussian_filter(srng.standard_normal((scene_n, scene_n)), sigma=3.0)
        std = field_.std()
        if config.noise > 0 and std > 0:
            field_ = field_ / std * config.noise
        else:
            field_ = np.zeros_like(field_)
        return np.clip(config.background + relief + field_, 0.0, 1.0)

    store_dir = out / "store"
    if config.source_mode == "mixed":
        bing_dir = store_dir / "BING"
        corona_dir = store_dir / "CORONA"
        bing_dir.mkdir(parents=True, exist_ok=True)
        corona_dir.mkdir(parents=True, exist_ok=True)
        gray = scene_gray("bing")
        tint = np.array([1.02, 0.99, 0.90])[:, None, None]
        write_pnm(bing_dir / "scene.ppm", np.clip(gray[None] * tint, 0.0, 1.0), comment=f"seed={seed}")
        write_world_file(bing_dir / "scene.wld", scene_georef)
        write_pnm(corona_dir / "scene.pgm", scene_gray("corona"), comment=f"seed={seed}")
        write_world_file(corona_dir / "scene.wld", scene_georef)
    else:
        store_dir.mkdir(parents=True, exist_ok=True)
        write_pnm(store_dir / "scene.pgm", scene_gray("mono"), comment=f"seed={seed}")
        write_world_file(store_dir / "scene.wld", scene_georef)
    (out / "sites.txt").write_bytes(emit_sites(sites))
    store = RasterStore(store_dir)

    bounds = (x0, y0, x0 + grid * config.side, y0 + grid * config.side)
    neg_windows = sample_negatives(
        bounds,
        n_neg,
        sites,
        min_clearance=config.clearance,
        rng=stream(seed, "synth", "negatives"),
        side=config.side,
        resolution=config.resolution,
    )

    tiles_dir = out / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)

    def tag(k: int) -> str:
        if config.source_mode == "mixed":
            return "BING" if k % 2 == 0 else "CORONA"
        return "SYNTHETIC"

    pos_entries, neg_entries = [], []
    for k, shape in enumerate(primaries):
        window = make_window(shape, side=config.side, resolution=config.resolution)
        source = tag(k)
        sample = build_tile_sample(store, window, sites, f"POS.{k + 1:03d}", source)
        pos_entries.append(_save_tile(sample, window, tiles_dir, out, seed))
    for k, window in enumerate(neg_windows):
        source = tag(n_pos + k)
        sample = build_tile_sample(store, window, sites, f"NEG.{k + 1:03d}", source)
        if sample.label:
            raise GeometryError(f"{sample.id}: negative window overlaps a site polygon")
        neg_entries.append(_save_tile(sample, window, tiles_dir, out, seed))

    manifest = assemble_dataset(pos_entries, neg_entries, seed=seed)
    write_manifest(out / "manifest.tsv", manifest)
    return store, sites, manifest


def _save_tile(sample: TileSample, window: SampleWindow, tiles_dir: Path, root: Path, seed: int) -> ManifestEntry:
    img_rel = f"tiles/{sample.id}.ppm"
    mask_rel = f"tiles/{sample.id}_mask.pgm"
    write_pnm(root / img_rel, sample.image, comment=f"seed={seed}")
    write_world_file(tiles_dir / f"{sample.id}.wld", sample.georef)
    write_pnm(root / mask_rel, sample.mask.astype(float), comment=f"seed={seed}")
    return ManifestEntry(
        id=sample.id,
        split="TRAIN",
        label=sample.label,
        image_path=img_rel,
        mask_path=mask_rel,
        source=sample.source,
        center=window.center,
    )
