"""Point clouds, polygons, rasters and the grid spatial index.

Everything downstream consumes these types. Point clouds are stored as
parallel numpy arrays (struct-of-arrays) rather than a list of record
objects; :meth:`PointCloud.record` materialises a single :class:`PointRecord`
when one is needed.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


class LasClass(enum.IntEnum):
    GROUND = 0
    VEGETATION = 1
    BUILDING = 2
    OTHER = 3


LAS_NAMES = {c: c.name.lower() for c in LasClass}
LAS_BY_NAME = {v: k for k, v in LAS_NAMES.items()}

# class tags of the labelled sub-classes; code 0 is "rest"
CLASS_CODES = {"rest": 0, "road": 1, "sidewalk": 2, "terrace": 3, "unpaved-road": 4}
CLASS_NAMES = {v: k for k, v in CLASS_CODES.items()}


@dataclass(frozen=True)
class PointRecord:
    x: float
    y: float
    z: float
    intensity: float
    scan_angle: int
    return_number: int
    number_of_returns: int
    las_class: LasClass
    sensor_id: int
    color: tuple[float, float, float, float] | None = None


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Columnar LiDAR point cloud.

    ``color`` is an ``(n, 4)`` array of r, g, b, nir with NaN rows for
    points that have no colour. ``encoded`` marks clouds whose intensity
    has already been replaced by a harmonised value.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    intensity: np.ndarray
    scan_angle: np.ndarray
    return_number: np.ndarray
    number_of_returns: np.ndarray
    las_class: np.ndarray
    sensor_id: np.ndarray
    color: np.ndarray | None = None
    encoded: bool = False

    def __post_init__(self):
        n = len(self.x)
        cols = {
            "x": np.float64, "y": np.float64, "z": np.float64,
            "intensity": np.float64, "scan_angle": np.int16,
            "return_number": np.uint8, "number_of_returns": np.uint8,
            "las_class": np.uint8, "sensor_id": np.uint16,
        }
        for name, dt in cols.items():
            a = np.asarray(getattr(self, name))
            if a.shape != (n,):
                raise ValidationError(f"column {name} has shape {a.shape}, expected ({n},)")
            object.__setattr__(self, name, _frozen(a, dt))
        if self.color is not None:
            c = np.asarray(self.color, dtype=np.float64)
            if c.shape != (n, 4):
                raise ValidationError(f"color has shape {c.shape}, expected ({n}, 4)")
            object.__setattr__(self, "color", _frozen(c, np.float64))
        self.validate()

    def validate(self) -> None:
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all() and np.isfinite(self.z).all()):
            raise ValidationError("non-finite coordinate")
        if not np.isfinite(self.intensity).all():
            raise ValidationError("intensity must be finite")
        # harmonised values live on a learned scale and may be negative
        if not self.encoded and (self.intensity < 0).any():
            raise ValidationError("raw intensity must be non-negative")
        bad = np.flatnonzero((self.return_number < 1) | (self.return_number > self.number_of_returns))
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"point {i}: return_number {self.return_number[i]} not in "
                f"[1, number_of_returns={self.number_of_returns[i]}]"
            )
        if self.color is not None:
            c = self.color[~np.isnan(self.color).any(axis=1)]
            if c.size and (c.min() < 0 or c.max() > 1):
                raise ValidationError("colour channels must lie in [0, 1]")
        if (self.las_class > max(LasClass)).any():
            raise ValidationError("unknown las_class code")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def bbox(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """((min_x, min_y), (max_x, max_y)); raises on an empty cloud."""
        if len(self) == 0:
            raise ValueError("bbox of an empty point cloud is undefined")
        return ((float(self.x.min()), float(self.y.min())), (float(self.x.max()), float(self.y.max())))

    @property
    def has_color(self) -> np.ndarray:
        if self.color is None:
            return np.zeros(len(self), dtype=bool)
        return ~np.isnan(self.color).any(axis=1)

    def record(self, i: int) -> PointRecord:
        color = None
        if self.color is not None and not np.isnan(self.color[i]).any():
            color = tuple(float(v) for v in self.color[i])
        return PointRecord(
            float(self.x[i]), float(self.y[i]), float(self.z[i]), float(self.intensity[i]),
            int(self.scan_angle[i]), int(self.return_number[i]), int(self.number_of_returns[i]),
            LasClass(int(self.las_class[i])), int(self.sensor_id[i]), color,
        )

    def with_(self, **changes) -> "PointCloud":
        return replace(self, **changes)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.x[idx], self.y[idx], self.z[idx], self.intensity[idx], self.scan_angle[idx],
            self.return_number[idx], self.number_of_returns[idx], self.las_class[idx],
            self.sensor_id[idx], None if self.color is None else self.color[idx], self.encoded,
        )

    @classmethod
    def from_records(cls, records: Iterable[PointRecord]) -> "PointCloud":
        recs = list(records)
        colored = any(r.color is not None for r in recs)
        color = None
        if colored:
            color = np.array([r.color if r.color is not None else (np.nan,) * 4 for r in recs],
                             dtype=np.float64).reshape(-1, 4)
        return cls(
            np.array([r.x for r in recs], dtype=np.float64),
            np.array([r.y for r in recs], dtype=np.float64),
            np.array([r.z for r in recs], dtype=np.float64),
            np.array([r.intensity for r in recs], dtype=np.float64),
            np.array([r.scan_angle for r in recs], dtype=np.int16),
            np.array([r.return_number for r in recs], dtype=np.uint8),
            np.array([r.number_of_returns for r in recs], dtype=np.uint8),
            np.array([int(r.las_class) for r in recs], dtype=np.uint8),
            np.array([r.sensor_id for r in recs], dtype=np.uint16),
            color,
        )


# --------------------------------------------------------------------------
# point file I/O

CSV_FIELDS = ["x", "y", "z", "intensity", "scan_angle", "return_number",
              "number_of_returns", "las_class", "sensor_id"]
COLOR_FIELDS = ["r", "g", "b", "nir"]

PC_MAGIC = b"TSPC"
PC_VERSION = 1
FLAG_COLOR = 1
FLAG_ENCODED = 2

_REC = [("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("intensity", "<f8"),
        ("scan_angle", "<i2"), ("return_number", "u1"), ("number_of_returns", "u1"),
        ("las_class", "u1"), ("sensor_id", "<u2")]
REC_DTYPE = np.dtype(_REC)
REC_DTYPE_COLOR = np.dtype(_REC + [("color", "<f4", (4,))])


def _load_csv(path: Path) -> PointCloud:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: missing header")
        if header[:9] != CSV_FIELDS or header[9:] not in ([], COLOR_FIELDS):
            raise ValidationError(f"{path}: unexpected header {header}")
        colored = len(header) == 13
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rec = [float(row[0]), float(row[1]), float(row[2]), float(row[3]),
                       int(row[4]), int(row[5]), int(row[6])]
                cls = row[7].strip().lower()
                if cls not in LAS_BY_NAME:
                    raise ValueError(f"unknown las_class {row[7]!r}")
                rec.append(int(LAS_BY_NAME[cls]))
                rec.append(int(row[8]))
                if colored:
                    rec.extend(float(v) if v.strip() else math.nan for v in row[9:13])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if not 1 <= rec[5] <= rec[6]:
                raise ValidationError(
                    f"{path}:{lineno}: return_number {rec[5]} > number_of_returns {rec[6]}")
            rows.append(rec)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 13 if colored else 9)
    return PointCloud(
        arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4].astype(np.int16),
        arr[:, 5].astype(np.uint8), arr[:, 6].astype(np.uint8), arr[:, 7].astype(np.uint8),
        arr[:, 8].astype(np.uint16), arr[:, 9:13] if colored else None,
    )


def _load_bin(path: Path) -> PointCloud:
    blob = Path(path).read_bytes()
    if blob[:4] != PC_MAGIC:
        raise ValidationError(f"{path}: bad magic {blob[:4]!r}")
    version, count, flags = struct.unpack_from("<IQI", blob, 4)
    if version != PC_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    dt = REC_DTYPE_COLOR if flags & FLAG_COLOR else REC_DTYPE
    off = 4 + struct.calcsize("<IQI")
    if len(blob) - off != count * dt.itemsize:
        raise ValidationError(f"{path}: truncated, expected {count} records")
    rec = np.frombuffer(blob, dtype=dt, count=count, offset=off)
    return PointCloud(
        rec["x"], rec["y"], rec["z"], rec["intensity"], rec["scan_angle"], rec["return_number"],
        rec["number_of_returns"], rec["las_class"], rec["sensor_id"],
        rec["color"].astype(np.float64) if flags & FLAG_COLOR else None,
        encoded=bool(flags & FLAG_ENCODED),
    )


def load_points(path, format: str | None = None) -> PointCloud:
    """Read a point file; ``format`` defaults to the file suffix (csv or bin)."""
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "bin")
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "bin":
        return _load_bin(path)
    raise ValueError(f"unknown point format {fmt!r}")


def save_points(cloud: PointCloud, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "bin")
    colored = cloud.color is not None
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS + (COLOR_FIELDS if colored else []))
            for i in range(len(cloud)):
                row = [repr(float(cloud.x[i])), repr(float(cloud.y[i])), repr(float(cloud.z[i])),
                       repr(float(cloud.intensity[i])), int(cloud.scan_angle[i]),
                       int(cloud.return_number[i]), int(cloud.number_of_returns[i]),
                       LAS_NAMES[LasClass(int(cloud.las_class[i]))], int(cloud.sensor_id[i])]
                if colored:
                    row += ["" if np.isnan(v) else repr(float(v)) for v in cloud.color[i]]
                w.writerow(row)
        return
    if fmt != "bin":
        raise ValueError(f"unknown point format {fmt!r}")
    dt = REC_DTYPE_COLOR if colored else REC_DTYPE
    rec = np.zeros(len(cloud), dtype=dt)
    for name in CSV_FIELDS:
        rec[name] = getattr(cloud, name)
    if colored:
        rec["color"] = cloud.color
    flags = (FLAG_COLOR if colored else 0) | (FLAG_ENCODED if cloud.encoded else 0)
    with open(path, "wb") as fh:
        fh.write(PC_MAGIC + struct.pack("<IQI", PC_VERSION, len(cloud), flags))
        fh.write(rec.tobytes())


# --------------------------------------------------------------------------
# spatial index


@dataclass(frozen=True, eq=False)
class SpatialIndex:
    """Uniform bucket grid over the cloud's xy extent (CSR layout).

    Point ids of bucket ``k`` are ``order[start[k]:start[k + 1]]``, with
    ``k = row * nx + col``.
    """

    x: np.ndarray
    y: np.ndarray
    origin: tuple[float, float]
    bucket_size: float
    nx: int
    ny: int
    order: np.ndarray
    start: np.ndarray

    def bucket_of(self, x, y):
        col = np.floor((np.asarray(x) - self.origin[0]) / self.bucket_size).astype(np.int64)
        row = np.floor((np.asarray(y) - self.origin[1]) / self.bucket_size).astype(np.int64)
        return col, row

    def bucket(self, k: int) -> np.ndarray:
        return self.order[self.start[k]:self.start[k + 1]]


def build_index(cloud: PointCloud, bucket_size: float = 1.0) -> SpatialIndex:
    if bucket_size <= 0:
        raise ValueError("bucket_size must be positive")
    n = len(cloud)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SpatialIndex(cloud.x, cloud.y, (0.0, 0.0), bucket_size, 1, 1, empty, np.zeros(2, np.int64))
    (x0, y0), (x1, y1) = cloud.bbox
    nx = int(math.floor((x1 - x0) / bucket_size)) + 1
    ny = int(math.floor((y1 - y0) / bucket_size)) + 1
    col = np.minimum(np.floor((cloud.x - x0) / bucket_size).astype(np.int64), nx - 1)
    row = np.minimum(np.floor((cloud.y - y0) / bucket_size).astype(np.int64), ny - 1)
    key = row * nx + col
    order = np.argsort(key, kind="stable")
    counts = np.bincount(key, minlength=nx * ny)
    start = np.zeros(nx * ny + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    order.setflags(write=False)
    start.setflags(write=False)
    return SpatialIndex(cloud.x, cloud.y, (x0, y0), float(bucket_size), nx, ny, order, start)


def radius_query(index: SpatialIndex, center, radius: float) -> np.ndarray:
    """Ids of points whose xy distance to ``center`` is strictly below ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    offsets, ids = radius_query_batch(index, np.array([center[0]]), np.array([center[1]]), radius)
    return ids


def radius_query_batch(index: SpatialIndex, cx, cy, radius: float, chunk: int = 4096):
    """Neighbour lists for many centres at once, as CSR ``(offsets, ids)``.

    Ids within one centre's list are returned in ascending bucket order, which
    is deterministic but otherwise unspecified.
    """
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    m = len(cx)
    if len(index.order) == 0 or m == 0:
        return np.zeros(m + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    reach = int(math.ceil(radius / index.bucket_size))
    r2 = radius * radius
    out_ids, out_counts = [], []
    for lo in range(0, m, chunk):
        qx, qy = cx[lo:lo + chunk], cy[lo:lo + chunk]
        qcol, qrow = index.bucket_of(qx, qy)
        q_parts, id_parts = [], []
        for dr in range(-reach, reach + 1):
            for dc in range(-reach, reach + 1):
                c, r = qcol + dc, qrow + dr
                ok = (c >= 0) & (c < index.nx) & (r >= 0) & (r < index.ny)
                k = np.where(ok, r * index.nx + c, 0)
                s = np.where(ok, index.start[k], 0)
                e = np.where(ok, index.start[k + 1], 0)
                cnt = e - s
                tot = int(cnt.sum())
                if tot == 0:
                    continue
                qid = np.repeat(np.arange(len(qx)), cnt)
                base = np.repeat(s - np.cumsum(cnt) + cnt, cnt)
                pos = base + np.arange(tot)
                pid = index.order[pos]
                d2 = (index.x[pid] - qx[qid]) ** 2 + (index.y[pid] - qy[qid]) ** 2
                keep = d2 < r2
                q_parts.append(qid[keep])
                id_parts.append(pid[keep])
        if q_parts:
            qall = np.concatenate(q_parts)
            pall = np.concatenate(id_parts)
            srt = np.argsort(qall, kind="stable")
            out_ids.append(pall[srt])
            out_counts.append(np.bincount(qall, minlength=len(qx)))
        else:
            out_counts.append(np.zeros(len(qx), dtype=np.int64))
    offsets = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(np.concatenate(out_counts), out=offsets[1:])
    ids = np.concatenate(out_ids) if out_ids else np.zeros(0, dtype=np.int64)
    return offsets, ids.astype(np.int64)


# --------------------------------------------------------------------------
# polygons


@dataclass(frozen=True, eq=False)
class Polygon:
    """Outer ring plus optional holes; rings are stored open (first != last)."""

    outer: np.ndarray
    holes: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        rings = [self._check(self.outer)] + [self._check(h) for h in self.holes]
        object.__setattr__(self, "outer", rings[0])
        object.__setattr__(self, "holes", tuple(rings[1:]))

    @staticmethod
    def _check(ring) -> np.ndarray:
        r = np.asarray(ring, dtype=np.float64).reshape(-1, 2)
        if len(r) > 1 and np.array_equal(r[0], r[-1]):
            r = r[:-1]
        if len(r) < 3:
            raise ValidationError("polygon ring needs at least 3 vertices")
        if (np.diff(np.vstack([r, r[:1]]), axis=0) == 0).all(axis=1).any():
            raise ValidationError("polygon ring has repeated consecutive vertices")
        r.setflags(write=False)
        return r

    @property
    def rings(self) -> tuple[np.ndarray, ...]:
        return (self.outer,) + self.holes

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        o = self.outer
        return (float(o[:, 0].min()), float(o[:, 1].min()), float(o[:, 0].max()), float(o[:, 1].max()))

    def area(self) -> float:
        return abs(ring_area(self.outer)) - sum(abs(ring_area(h)) for h in self.holes)

    def translated(self, dx: float, dy: float) -> "Polygon":
        d = np.array([dx, dy])
        return Polygon(self.outer + d, tuple(h + d for h in self.holes))

    @classmethod
    def rect(cls, x0, y0, x1, y1) -> "Polygon":
        return cls(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class PolygonSet:
    polygons: tuple[Polygon, ...] = ()
    tags: tuple[str | None, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "polygons", tuple(self.polygons))
        tags = tuple(self.tags) if self.tags else (None,) * len(self.polygons)
        if len(tags) != len(self.polygons):
            raise ValidationError("one tag per polygon required")
        object.__setattr__(self, "tags", tags)

    def __len__(self) -> int:
        return len(self.polygons)

    def __iter__(self):
        return iter(zip(self.polygons, self.tags))


def ring_area(ring: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise rings)."""
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def contains(poly: Polygon, x, y) -> np.ndarray:
    """Vectorised even-odd containment; points on any edge count as inside."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    inside = np.zeros(x.shape, dtype=bool)
    on_edge = np.zeros(x.shape, dtype=bool)
    for ring in poly.rings:
        ax, ay = ring[:, 0], ring[:, 1]
        bx, by = np.roll(ax, -1), np.roll(ay, -1)
        for i in range(len(ring)):
            x1, y1, x2, y2 = ax[i], ay[i], bx[i], by[i]
            cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
            within = ((x >= min(x1, x2)) & (x <= max(x1, x2)) &
                      (y >= min(y1, y2)) & (y <= max(y1, y2)))
            scale = max(abs(x2 - x1), abs(y2 - y1), 1.0)
            on_edge |= within & (np.abs(cross) <= 1e-12 * scale)
            straddle = (y1 > y) != (y2 > y)
            if straddle.any():
                xint = x1 + (y - y1) * (x2 - x1) / np.where(y2 != y1, y2 - y1, 1.0)
                inside ^= straddle & (x < xint)
    return inside | on_edge


def point_in_polygon(pt, poly: Polygon) -> bool:
    return bool(contains(poly, [pt[0]], [pt[1]])[0])


def polygon_set_contains(polys: PolygonSet, x, y) -> np.ndarray:
    """Index of the first polygon containing each point, or -1."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    hit = np.full(x.shape, -1, dtype=np.int64)
    for j, poly in enumerate(polys.polygons):
        x0, y0, x1, y1 = poly.bounds
        cand = np.flatnonzero((hit < 0) & (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1))
        if cand.size == 0:
            continue
        inside = contains(poly, x[cand], y[cand])
        hit[cand[inside]] = j
    return hit


@dataclass(frozen=True, eq=False)
class PointLabels:
    fortified: np.ndarray
    class_tag: tuple[str, ...]

    @property
    def class_code(self) -> np.ndarray:
        return np.array([CLASS_CODES.get(t, 0) for t in self.class_tag], dtype=np.int64)


def label_points(cloud: PointCloud, labels: PolygonSet) -> PointLabels:
    """Fortified iff inside any label polygon; tag of the first containing polygon."""
    hit = polygon_set_contains(labels, cloud.x, cloud.y)
    tags = [t if t is not None else "fortified" for t in labels.tags]
    class_tag = tuple("rest" if h < 0 else tags[h] for h in hit.tolist())
    return PointLabels(hit >= 0, class_tag)


def load_polygons(path) -> PolygonSet:
    doc = json.loads(Path(path).read_text())
    if doc.get("type") != "FeatureCollection":
        raise ValidationError(f"{path}: expected a FeatureCollection")
    polys, tags = [], []
    for k, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ValidationError(f"{path}: feature {k} is {geom.get('type')}, not Polygon")
        rings = geom["coordinates"]
        polys.append(Polygon(np.asarray(rings[0], dtype=np.float64),
                             tuple(np.asarray(h, dtype=np.float64) for h in rings[1:])))
        tags.append((feat.get("properties") or {}).get("class"))
    return PolygonSet(tuple(polys), tuple(tags))


def save_polygons(polys: PolygonSet, path) -> None:
    def ring(r):
        pts = [[float(a), float(b)] for a, b in r]
        return pts + [pts[0]]

    feats = []
    for poly, tag in polys:
        props = {} if tag is None else {"class": tag}
        feats.append({"type": "Feature", "properties": props,
                      "geometry": {"type": "Polygon", "coordinates": [ring(r) for r in poly.rings]}})
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": feats}))


# --------------------------------------------------------------------------
# rasters

RG_MAGIC = b"TSRG"
RG_VERSION = 1
DEFAULT_NODATA = -9999.0


@dataclass(eq=False)
class Raster:
    """Named-channel grid. Row 0 is the southernmost row; cell (0, 0) has its
    lower-left corner at ``origin``."""

    origin: tuple[float, float]
    cell_size: float
    width: int
    height: int
    channels: dict[str, np.ndarray] = field(default_factory=dict)
    nodata: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValidationError("cell_size must be positive")
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        for name, a in list(self.channels.items()):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != (self.height, self.width):
                raise ValidationError(f"channel {name} is {a.shape}, expected {(self.height, self.width)}")
            self.channels[name] = a
            self.nodata.setdefault(name, DEFAULT_NODATA)

    @classmethod
    def like(cls, other: "Raster", **channels) -> "Raster":
        return cls(other.origin, other.cell_size, other.width, other.height, dict(channels))

    @classmethod
    def covering(cls, bbox, cell_size: float = 0.2) -> "Raster":
        (x0, y0), (x1, y1) = bbox
        w = int(math.floor((x1 - x0) / cell_size)) + 1
        h = int(math.floor((y1 - y0) / cell_size)) + 1
        return cls((x0, y0), cell_size, w, h)

    def cell_of(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(row, col, inside) for coordinates, via floor((v - origin) / cell_size)."""
        col = np.floor((np.asarray(x) - self.origin[0]) / self.cell_size).astype(np.int64)
        row = np.floor((np.asarray(y) - self.origin[1]) / self.cell_size).astype(np.int64)
        inside = (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        return row, col, inside

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        cs = self.cell_size
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * cs
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * cs
        return np.meshgrid(xs, ys)

    def valid(self, name: str) -> np.ndarray:
        a = self.channels[name]
        return ~np.isnan(a) & (a != self.nodata[name])

    def aligned_with(self, other: "Raster") -> bool:
        return (self.width == other.width and self.height == other.height
                and math.isclose(self.cell_size, other.cell_size)
                and np.allclose(self.origin, other.origin))

    def window(self, row: int, col: int, h: int, w: int) -> "Raster":
        ox = self.origin[0] + col * self.cell_size
        oy = self.origin[1] + row * self.cell_size
        chans = {k: v[row:row + h, col:col + w].copy() for k, v in self.channels.items()}
        return Raster((ox, oy), self.cell_size, w, h, chans, dict(self.nodata))


def save_raster(r: Raster, path) -> None:
    with open(path, "wb") as fh:
        fh.write(RG_MAGIC + struct.pack("<I3d2IH", RG_VERSION, r.origin[0], r.origin[1],
                                        r.cell_size, r.width, r.height, len(r.channels)))
        for name, a in r.channels.items():
            b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(b)) + b + struct.pack("<f", r.nodata[name]))
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_raster(path) -> Raster:
    blob = Path(path).read_bytes()
    if blob[:4] != RG_MAGIC:
        raise ValidationError(f"{path}: bad magic {blob[:4]!r}")
    head = "<I3d2IH"
    version, ox, oy, cs, w, h, nch = struct.unpack_from(head, blob, 4)
    if version != RG_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize(head)
    chans, nodata = {}, {}
    for _ in range(nch):
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + ln].decode("utf-8")
        off += ln
        (nd,) = struct.unpack_from("<f", blob, off)
        off += 4
        a = np.frombuffer(blob, dtype="<f4", count=w * h, offset=off).reshape(h, w)
        off += 4 * w * h
        chans[name] = a.astype(np.float64)
        nodata[name] = float(nd)
    return Raster((ox, oy), cs, w, h, chans, nodata)

