"""Rasterisation of point features, labels and point predictions."""

from __future__ import annotations

import numpy as np

from .core import DEFAULT_NODATA, LasClass, PointCloud, PointLabels, Raster

FEATURE_CHANNELS = ["ground", "return_num", "z", "r", "g", "b", "nir", "intensity"]
CHANNEL_GROUPS = {
    "lidar": ["ground", "return_num", "z"],
    "color": ["r", "g", "b", "nir"],
    "intensity": ["intensity"],
}


def empty_grid(bbox, cell_size: float = 0.2) -> Raster:
    return Raster.covering(bbox, cell_size)


def _cell_keys(cloud: PointCloud, grid: Raster, mask=None):
    row, col, inside = grid.cell_of(cloud.x, cloud.y)
    if mask is not None:
        inside = inside & mask
    idx = np.flatnonzero(inside)
    return idx, row[idx] * grid.width + col[idx]


def _mean(vals, keys, size, nodata):
    cnt = np.bincount(keys, minlength=size)
    tot = np.bincount(keys, weights=vals, minlength=size)
    out = np.full(size, nodata)
    nz = cnt > 0
    out[nz] = tot[nz] / cnt[nz]
    return out


def _max(vals, keys, size, nodata):
    out = np.full(size, -np.inf)
    np.maximum.at(out, keys, vals)
    out[np.isneginf(out)] = nodata
    return out


def rasterize_features(cloud: PointCloud, grid: Raster, nodata: float = DEFAULT_NODATA) -> Raster:
    """Eight feature channels; empty cells get ``nodata``.

    ``ground`` is 1 when every point in the cell is Ground and 0 otherwise;
    ``intensity`` averages Ground points only; the other channels use all
    points (colour ignores uncoloured points).
    """
    size = grid.width * grid.height
    idx, keys = _cell_keys(cloud, grid)
    is_ground = (cloud.las_class[idx] == LasClass.GROUND).astype(np.float64)
    cnt = np.bincount(keys, minlength=size)
    n_ground = np.bincount(keys, weights=is_ground, minlength=size)
    ground = np.full(size, nodata)
    ground[cnt > 0] = (n_ground[cnt > 0] == cnt[cnt > 0]).astype(np.float64)

    chans = {
        "ground": ground,
        "return_num": _max(cloud.return_number[idx].astype(np.float64), keys, size, nodata),
        "z": _mean(cloud.z[idx], keys, size, nodata),
    }
    if cloud.color is not None:
        colored = ~np.isnan(cloud.color[idx]).any(axis=1)
        for k, name in enumerate(("r", "g", "b", "nir")):
            chans[name] = _mean(cloud.color[idx][colored, k], keys[colored], size, nodata)
    else:
        for name in ("r", "g", "b", "nir"):
            chans[name] = np.full(size, nodata)
    g = is_ground > 0
    chans["intensity"] = _mean(cloud.intensity[idx][g], keys[g], size, nodata)
    shaped = {k: chans[k].reshape(grid.height, grid.width) for k in FEATURE_CHANNELS}
    return Raster(grid.origin, grid.cell_size, grid.width, grid.height, shaped,
                  {k: nodata for k in FEATURE_CHANNELS})


def rasterize_labels(cloud: PointCloud, labels: PointLabels, grid: Raster, ground_only: bool = True,
                     nodata: float = DEFAULT_NODATA) -> Raster:
    """``label`` = 1 if any fortified point falls in the cell, 0 if only
    unfortified points do, nodata if none. ``class_tag`` takes the largest
    class code among fortified points (0 = rest)."""
    size = grid.width * grid.height
    mask = cloud.las_class == LasClass.GROUND if ground_only else None
    idx, keys = _cell_keys(cloud, grid, mask)
    fort = labels.fortified[idx].astype(np.float64)
    label = _max(fort, keys, size, nodata)
    code = labels.class_code[idx].astype(np.float64) * fort
    tag = _max(code, keys, size, nodata)
    return Raster(grid.origin, grid.cell_size, grid.width, grid.height,
                  {"label": label.reshape(grid.height, grid.width),
                   "class_tag": tag.reshape(grid.height, grid.width)},
                  {"label": nodata, "class_tag": nodata})


def rasterize_point_predictions(cloud: PointCloud, point_ids, probs, grid: Raster,
                                nodata: float = DEFAULT_NODATA) -> Raster:
    """Per-cell maximum of the Ground-point probabilities."""
    point_ids = np.asarray(point_ids, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size and (probs.min() < 0 or probs.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    size = grid.width * grid.height
    keep = cloud.las_class[point_ids] == LasClass.GROUND
    pid, p = point_ids[keep], probs[keep]
    row, col, inside = grid.cell_of(cloud.x[pid], cloud.y[pid])
    keys = row[inside] * grid.width + col[inside]
    prob = _max(p[inside], keys, size, nodata)
    return Raster(grid.origin, grid.cell_size, grid.width, grid.height,
                  {"prob": prob.reshape(grid.height, grid.width)}, {"prob": nodata})


def normalize_z(tile: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Standardise a 2-D z tile over its valid cells; invalid cells become 0."""
    z = np.asarray(tile, dtype=np.float64)
    out = np.zeros_like(z)
    if valid.any():
        v = z[valid]
        out[valid] = (v - v.mean()) / (v.std() + 1e-6)
    return out


def to_tensor(features: Raster, channels=FEATURE_CHANNELS, row: int = 0, col: int = 0,
              h: int | None = None, w: int | None = None) -> np.ndarray:
    """(h, w, len(channels)) network input: per-tile z standardisation, nodata -> 0."""
    h = features.height if h is None else h
    w = features.width if w is None else w
    out = np.zeros((h, w, len(channels)))
    for k, name in enumerate(channels):
        a = features.channels[name][row:row + h, col:col + w]
        valid = features.valid(name)[row:row + h, col:col + w]
        if name == "z":
            out[:, :, k] = normalize_z(a, valid)
        else:
            out[:, :, k] = np.where(valid, a, 0.0)
    return out
