"""Deterministic synthetic two-sensor world and small independent oracles.

The world is a grid of rectangular blocks separated by paved roads.
Residential blocks carry sidewalks, houses, terraces, lawns, trees and
garden beds; field blocks carry grain, green crops or bare soil, sometimes
split by an unpaved track. Every surface has a reflectance ``A``; a sensor
turns it into raw intensity through its own increasing distortion. The two
sensors are separated by a horizontal line.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (CLASS_CODES, LasClass, PointCloud, Polygon, PolygonSet, Raster, ValidationError,
                   save_points, save_polygons, save_raster)

# --------------------------------------------------------------------------
# materials


@dataclass(frozen=True)
class Material:
    name: str
    A: float             # mean reflectance in [0, 1]
    color: tuple         # r, g, b, nir on a 0..255 scale (stored as 0..1)
    rough: float         # surface height noise (m)
    tag: str = "rest"     # label class; "rest" is unfortified


MATERIALS = [
    Material("lawn", 0.75, (80, 150, 60, 225), 0.03),
    Material("road", 0.15, (85, 85, 92, 80), 0.01, "road"),
    Material("sidewalk", 0.45, (172, 166, 156, 150), 0.01, "sidewalk"),
    Material("terrace", 0.33, (150, 112, 92, 120), 0.01, "terrace"),
    Material("unpaved", 0.55, (176, 156, 122, 158), 0.03, "unpaved-road"),
    Material("grain", 0.82, (172, 170, 84, 230), 0.10),
    Material("green", 0.78, (92, 142, 62, 240), 0.05),
    Material("soil", 0.68, (170, 152, 118, 152), 0.04),
    Material("mulch", 0.17, (148, 82, 52, 100), 0.04),
    Material("pebble", 0.74, (166, 161, 151, 146), 0.02),
    Material("roof", 0.30, (122, 62, 56, 92), 0.02),
    Material("canopy", 0.85, (52, 102, 42, 205), 0.5),
]
MAT = {m.name: i for i, m in enumerate(MATERIALS)}
SOIL_SEPARABLE_COLOR = (108, 78, 50, 120)


def sensor_power(A):
    return 800.0 * np.power(np.clip(A, 0.0, 1.0), 0.6)


def sensor_log(A):
    return 900.0 * np.log1p(9.0 * np.clip(A, 0.0, 1.0))


SENSORS = {"power": sensor_power, "log": sensor_log}


@dataclass
class WorldSpec:
    seed: int = 7
    extent: float = 200.0          # side of the square world in metres
    density: float = 40.0          # points per square metre
    origin: tuple = (0.0, 0.0)
    block: float = 44.0            # road spacing
    road_width: float = 6.0
    sidewalk: float = 2.0
    field_share: float = 0.5
    confusers: bool = True         # mulch/pebble beds and soil coloured like gravel
    sensors: tuple = ("power", "log")
    split: float = 0.5             # sensor boundary y = origin_y + split * extent
    noise: float = 0.05            # intensity noise std as a share of f(1) - f(0)
    a_noise: float = 0.03          # per-point spread of reflectance
    ortho_cell: float = 0.1
    ortho_noise: float = 9.0

    def validate(self):
        if not self.extent > 0:
            raise ValidationError("world extent must be positive")
        if not self.density > 0:
            raise ValidationError("point density must be positive")
        unknown = [s for s in self.sensors if s not in SENSORS]
        if unknown:
            raise ValidationError(f"unknown sensor distortion(s) {unknown}")


@dataclass
class World:
    cloud: PointCloud
    ortho: Raster
    labels: PolygonSet
    roads: PolygonSet
    grain: PolygonSet
    classes: Raster
    spec: WorldSpec = field(default_factory=WorldSpec)

    def save(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "points": out / "points.bin", "ortho": out / "ortho.tsr", "labels": out / "labels.geojson",
            "roads": out / "roads.geojson", "grain": out / "grain.geojson", "classes": out / "classes.tsr",
        }
        save_points(self.cloud, paths["points"])
        save_raster(self.ortho, paths["ortho"])
        save_polygons(self.labels, paths["labels"])
        save_polygons(self.roads, paths["roads"])
        save_polygons(self.grain, paths["grain"])
        save_raster(self.classes, paths["classes"])
        return paths


# --------------------------------------------------------------------------
# layout


@dataclass
class Layout:
    """Painted rectangles (material, box) in paint order, plus polygons."""

    paint: list = field(default_factory=list)     # (material, (x0, y0, x1, y1))
    canopies: list = field(default_factory=list)  # (cx, cy, r)
    houses: list = field(default_factory=list)    # boxes
    labels: list = field(default_factory=list)    # (Polygon, tag)
    roads: list = field(default_factory=list)
    grain: list = field(default_factory=list)

    def extend(self, other: "Layout"):
        for name in ("paint", "canopies", "houses", "labels", "roads", "grain"):
            getattr(self, name).extend(getattr(other, name))


def _positions(lo, hi, spacing, rng):
    """Road centre lines between lo and hi with jittered spacing."""
    out = []
    v = lo + spacing * rng.uniform(0.35, 0.65)
    while v < hi - 0.3 * spacing:
        out.append(v)
        v += spacing * rng.uniform(0.85, 1.15)
    return out


def build_layout(spec: WorldSpec, rng: np.random.Generator) -> Layout:
    x0, y0 = spec.origin
    x1, y1 = x0 + spec.extent, y0 + spec.extent
    half = spec.road_width / 2
    lay = Layout()
    hs = _positions(y0, y1, spec.block, rng)
    for y in hs:
        box = (x0, y - half, x1, y + half)
        lay.paint.append(("road", box))
        lay.roads.append(Polygon.rect(*box))
        lay.labels.append((Polygon.rect(*box), "road"))
    blocks = []
    bands = [y0] + [y + half for y in hs]
    tops = [y - half for y in hs] + [y1]
    for b_lo, b_hi in zip(bands, tops):
        if b_hi - b_lo < 4:
            continue
        vs = _positions(x0, x1, spec.block, rng)
        for x in vs:
            box = (x - half, b_lo, x + half, b_hi)
            lay.paint.append(("road", box))
            lay.roads.append(Polygon.rect(*box))
            lay.labels.append((Polygon.rect(*box), "road"))
        lefts = [x0] + [x + half for x in vs]
        rights = [x - half for x in vs] + [x1]
        for l, r in zip(lefts, rights):
            block = (l, b_lo, r, b_hi)
            if r - l < 6 or b_hi - b_lo < 6:
                continue
            sub = Layout()
            if rng.random() < spec.field_share:
                _field_block(block, spec, rng, sub)
            else:
                _residential_block(block, spec, rng, sub)
            blocks.append([block, sub])
    _ensure_grain(blocks, spec)
    for _, sub in blocks:
        lay.extend(sub)
    return lay


def _ensure_grain(blocks, spec):
    """Turn the largest block of a sensor territory into grain when the territory
    has none, so that every sensor has field reference surfaces. Uses its own
    random stream: worlds that need no fix are unaffected."""
    rng = np.random.default_rng([spec.seed, 1])
    split_y = spec.origin[1] + spec.split * spec.extent
    for south in (True, False):
        mine = [b for b in blocks if ((b[0][1] + b[0][3]) / 2 < split_y) == south]
        if not mine or any(sub.grain for _, sub in mine):
            continue

        def area(b):
            l, lo, r, hi = b[0]
            lo, hi = (lo, min(hi, split_y)) if south else (max(lo, split_y), hi)
            return (r - l) * max(hi - lo, 0.0)
        best = max(mine, key=area)
        best[1] = Layout()
        _field_block(best[0], spec, rng, best[1], crop="grain")


def _field_block(block, spec, rng, lay, crop=None):
    l, b, r, t = block
    u = rng.random()
    if crop is None:
        crop = "grain" if u < 0.5 else ("green" if u < 0.75 else "soil")
    parts = [block]
    if r - l > 20 and rng.random() < 0.5:
        xm = rng.uniform(l + 0.3 * (r - l), r - 0.3 * (r - l))
        track = (xm - 1.5, b, xm + 1.5, t)
        parts = [(l, b, xm - 1.5, t), (xm + 1.5, b, r, t)]
        lay.paint.append(("unpaved", track))
        lay.labels.append((Polygon.rect(*track), "unpaved-road"))
    for p in parts:
        lay.paint.insert(0, (crop, p))
        if crop == "grain":
            lay.grain.append(Polygon.rect(*p))


def _residential_block(block, spec, rng, lay):
    l, b, r, t = block
    s = spec.sidewalk
    inner = (l + s, b + s, r - s, t - s)
    ring = Polygon(np.array([[l, b], [r, b], [r, t], [l, t]]),
                   (np.array([[inner[0], inner[1]], [inner[2], inner[1]], [inner[2], inner[3]],
                              [inner[0], inner[3]]]),))
    for box in ((l, b, r, b + s), (l, t - s, r, t), (l, b + s, l + s, t - s), (r - s, b + s, r, t - s)):
        lay.paint.append(("sidewalk", box))
    lay.labels.append((ring, "sidewalk"))
    lay.paint.insert(0, ("lawn", inner))
    il, ib, ir, it = inner
    rows = 2 if it - ib >= 24 else 1
    cols = max(1, int((ir - il) // 16))
    lw, lh = (ir - il) / cols, (it - ib) / rows
    for i in range(cols):
        for j in range(rows):
            _lot((il + i * lw, ib + j * lh, il + (i + 1) * lw, ib + (j + 1) * lh), spec, rng, lay)


def _lot(lot, spec, rng, lay):
    l, b, r, t = lot
    w, h = r - l, t - b
    if w < 8 or h < 10:
        return
    hw, hh = w * rng.uniform(0.45, 0.6), h * rng.uniform(0.3, 0.4)
    cx = l + w / 2 + rng.uniform(-0.05, 0.05) * w
    house = (cx - hw / 2, t - 1.5 - hh, cx + hw / 2, t - 1.5)
    lay.houses.append(house)
    lay.paint.append(("roof", house))
    tw = hw * rng.uniform(0.5, 0.8)
    depth = rng.uniform(2.5, 4.0)
    tx = cx + rng.uniform(-1, 1) * (hw - tw) / 2
    terrace = (tx - tw / 2, house[1] - depth, tx + tw / 2, house[1])
    lay.paint.append(("terrace", terrace))
    lay.labels.append((Polygon.rect(*terrace), "terrace"))
    if spec.confusers:
        # a mulch strip along the west edge and a pebble bed in the south-east corner
        mlen = rng.uniform(4, 8)
        mulch = (l + 0.5, b + 1.0, l + 1.5, b + 1.0 + mlen)
        lay.paint.append(("mulch", mulch))
        pw, ph = rng.uniform(2, 3), rng.uniform(1.5, 2.5)
        lay.paint.append(("pebble", (r - 0.5 - pw, b + 0.5, r - 0.5, b + 0.5 + ph)))
    free_top = terrace[1] - 0.5
    radius = rng.uniform(1.8, 2.8)
    if free_top - b > 2 * radius + 1:
        lay.canopies.append((l + 0.45 * w + rng.uniform(-1, 1), b + 0.5 + radius + rng.uniform(0, 1), radius))


# --------------------------------------------------------------------------
# rendering


def _paint(lay: Layout, grid: Raster) -> np.ndarray:
    mat = np.full((grid.height, grid.width), MAT["lawn"], dtype=np.int16)
    cs = grid.cell_size
    ox, oy = grid.origin

    def span(lo, hi, o, n):
        # cells whose centres fall inside [lo, hi)
        a = int(math.ceil((lo - o) / cs - 0.5))
        z = int(math.ceil((hi - o) / cs - 0.5))
        return max(a, 0), min(z, n)

    for name, (x0, y0, x1, y1) in lay.paint:
        c0, c1 = span(x0, x1, ox, grid.width)
        r0, r1 = span(y0, y1, oy, grid.height)
        mat[r0:r1, c0:c1] = MAT[name]
    return mat


def _terrain(x, y, phase):
    return 20.0 + 1.5 * np.sin(2 * np.pi * x / 170.0 + phase[0]) + 1.0 * np.cos(2 * np.pi * y / 130.0 + phase[1])


def _smooth_field(shape, rng, scale_cells):
    """Low-frequency variation from a few random plane waves."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    out = np.zeros(shape, np.float32)
    for _ in range(4):
        th = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi / (scale_cells * rng.uniform(0.6, 1.6))
        out += np.sin(k * (xx * np.cos(th) + yy * np.sin(th)) + rng.uniform(0, 2 * np.pi)).astype(np.float32)
    return out / 2.0


def _in_any_disc(x, y, discs):
    hit = np.full(len(x), -1, dtype=np.int64)
    for k, (cx, cy, r) in enumerate(discs):
        cand = np.flatnonzero((np.abs(x - cx) < r) & (np.abs(y - cy) < r))
        inside = (x[cand] - cx) ** 2 + (y[cand] - cy) ** 2 < r * r
        hit[cand[inside]] = k
    return hit


def generate_world(spec: WorldSpec | None = None) -> World:
    spec = spec or WorldSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lay = build_layout(spec, rng)
    palette = np.array([m.color for m in MATERIALS], dtype=np.float64)
    if not spec.confusers:
        palette[MAT["soil"]] = SOIL_SEPARABLE_COLOR
    A_mean = np.array([m.A for m in MATERIALS])
    rough = np.array([m.rough for m in MATERIALS])

    grid = Raster(spec.origin, spec.ortho_cell, int(round(spec.extent / spec.ortho_cell)),
                  int(round(spec.extent / spec.ortho_cell)))
    ground_mat = _paint(lay, grid)
    top_mat = ground_mat.copy()
    cx, cy = grid.cell_centers()
    tree_cells = _in_any_disc(cx.ravel(), cy.ravel(), lay.canopies).reshape(top_mat.shape) >= 0
    top_mat[tree_cells] = MAT["canopy"]
    del cx, cy

    # ortho: palette + smooth tint + cell noise
    tint = _smooth_field(top_mat.shape, rng, 150.0 / spec.ortho_cell)
    chans = {}
    for k, name in enumerate(("r", "g", "b", "nir")):
        v = palette[top_mat, k].astype(np.float32)
        v += 7.0 * tint + rng.normal(0.0, spec.ortho_noise, top_mat.shape).astype(np.float32)
        chans[name] = np.clip(v / 255.0, 0.0, 1.0)
    ortho = Raster(spec.origin, spec.ortho_cell, grid.width, grid.height, chans)
    classes = Raster(spec.origin, spec.ortho_cell, grid.width, grid.height,
                     {"class_tag": np.array([CLASS_CODES[m.tag] for m in MATERIALS])[ground_mat]})

    # points
    n = int(rng.poisson(spec.density * spec.extent ** 2))
    x = spec.origin[0] + rng.uniform(0, spec.extent, n)
    y = spec.origin[1] + rng.uniform(0, spec.extent, n)
    row, col, _ = grid.cell_of(x, y)
    row = np.clip(row, 0, grid.height - 1)
    col = np.clip(col, 0, grid.width - 1)
    gm = ground_mat[row, col].astype(np.int64)
    phase = rng.uniform(0, 2 * np.pi, 2)
    z = _terrain(x, y, phase)
    z += np.where(gm == MAT["road"], -0.12, 0.0)
    las = np.full(n, int(LasClass.GROUND), dtype=np.uint8)
    nret = np.ones(n, dtype=np.uint8)
    ret = np.ones(n, dtype=np.uint8)
    mat = gm.copy()

    in_house = np.zeros(n, bool)
    for hx0, hy0, hx1, hy1 in lay.houses:
        in_house |= (x >= hx0) & (x < hx1) & (y >= hy0) & (y < hy1)
    las[in_house] = LasClass.BUILDING
    mat[in_house] = MAT["roof"]
    z[in_house] += 5.0 + 0.3 * (y[in_house] % 4.0)

    tree = (_in_any_disc(x, y, lay.canopies) >= 0) & ~in_house
    k = np.flatnonzero(tree)
    veg = k[rng.random(len(k)) < 0.6]
    under = np.setdiff1d(k, veg)
    nret[k] = rng.integers(2, 4, len(k))
    ret[under] = nret[under]
    ret[veg] = 1 + (rng.random(len(veg)) * (nret[veg] - 1)).astype(np.uint8)
    las[veg] = LasClass.VEGETATION
    mat[veg] = MAT["canopy"]
    z[veg] += rng.uniform(3.0, 8.0, len(veg))
    z += rng.normal(0, 1, n) * rough[mat]

    A = A_mean[mat] + rng.normal(0, spec.a_noise, n)
    A = np.clip(A, 0.005, 0.995)
    split_y = spec.origin[1] + spec.split * spec.extent
    sensor = np.where(y < split_y, 0, 1).astype(np.uint16) if len(spec.sensors) > 1 else np.zeros(n, np.uint16)
    intensity = np.empty(n)
    for s, fname in enumerate(spec.sensors):
        f = SENSORS[fname]
        sel = sensor == s
        sigma = spec.noise * (f(1.0) - f(0.0))
        intensity[sel] = f(A[sel]) + rng.normal(0, sigma, int(sel.sum()))
    intensity = np.maximum(intensity, 0.0)
    scan = np.clip(np.round((x - spec.origin[0]) / spec.extent * 40 - 20), -20, 20).astype(np.int16)

    order = np.lexsort((x, y))  # stable, reproducible file order
    cloud = PointCloud(x[order], y[order], z[order], intensity[order], scan[order], ret[order], nret[order],
                       las[order], sensor[order])
    labels = PolygonSet(tuple(p for p, _ in lay.labels), tuple(t for _, t in lay.labels))
    roads = PolygonSet(tuple(lay.roads), tuple("road" for _ in lay.roads))
    grain = PolygonSet(tuple(lay.grain), tuple("grain" for _ in lay.grain))
    return World(cloud, ortho, labels, roads, grain, classes, spec)


# --------------------------------------------------------------------------
# oracles

ORACLE_EMD_MAX = 6


def oracle_emd(u, v) -> float:
    """Exact min-cost perfect matching under |.| by trying every permutation."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if len(u) != len(v):
        raise ValueError("oracle_emd needs equal sizes")
    if len(u) > ORACLE_EMD_MAX:
        raise ValueError(f"oracle_emd is exhaustive; size {len(u)} exceeds {ORACLE_EMD_MAX}")
    if len(u) == 0:
        raise ValueError("oracle_emd of empty samples")
    best = math.inf
    for perm in itertools.permutations(range(len(v))):
        best = min(best, float(np.abs(u - v[list(perm)]).sum()))
    return best / len(u)


def oracle_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0.5
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("oracle_auc needs both classes")
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else (0.5 if p == q else 0.0)
    return wins / (len(pos) * len(neg))


def oracle_eigen_matrix(m) -> np.ndarray:
    """Ascending eigenvalues of a symmetric 3x3 matrix from its characteristic
    polynomial (trigonometric solution of the depressed cubic)."""
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise ValueError("expected a 3x3 matrix")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix is not symmetric")
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    q = np.trace(a) / 3.0
    if p1 == 0:
        return np.sort(np.diag(a))
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2 * p1
    p = math.sqrt(p2 / 6.0)
    bm = (a - q * np.eye(3)) / p
    r = np.linalg.det(bm) / 2.0
    phi = math.acos(min(1.0, max(-1.0, r))) / 3.0
    e1 = q + 2 * p * math.cos(phi)
    e3 = q + 2 * p * math.cos(phi + 2 * math.pi / 3)
    e2 = 3 * q - e1 - e3
    return np.sort(np.array([e1, e2, e3]))


def oracle_eigen(points) -> np.ndarray:
    """Ascending eigenvalues of the covariance of an (n, 3) point set."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("expected an (n, 3) array of points")
    c = pts - pts.mean(axis=0)
    return oracle_eigen_matrix(c.T @ c / len(pts))


def oracle_flatness(points) -> float:
    ev = oracle_eigen(points)
    tot = ev.sum()
    return 0.0 if tot <= 0 else float(max(ev[0], 0.0) / tot)
