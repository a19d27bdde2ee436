"""Per-point feature vectors for the boosted-tree classifier."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LasClass, PointCloud, Raster, SpatialIndex, ValidationError, radius_query_batch

log = logging.getLogger(__name__)

BASE_FEATURES = ["intensity", "r", "g", "b", "nir"]
FEATURE_NAMES = (
    BASE_FEATURES
    + [f"{stat}_{f}" for f in BASE_FEATURES for stat in ("min", "max", "mean")]
    + ["flatness"]
)
N_FEATURES = len(FEATURE_NAMES)  # 21

# column groups used for feature-subset experiments
FEATURE_GROUPS = {
    "intensity": [i for i, n in enumerate(FEATURE_NAMES) if n.endswith("intensity")],
    "color": [i for i, n in enumerate(FEATURE_NAMES)
              if n.split("_")[-1] in ("r", "g", "b", "nir")],
    "eigen": [N_FEATURES - 1],
}


def colorize(cloud: PointCloud, ortho: Raster) -> tuple[PointCloud, int]:
    """Attach r, g, b, nir from the ortho cell containing each point.

    Returns the coloured cloud and the number of points that fell outside the
    ortho extent (those, and points on nodata cells, stay uncoloured).
    """
    row, col, inside = ortho.cell_of(cloud.x, cloud.y)
    color = np.full((len(cloud), 4), np.nan)
    r, c = row[inside], col[inside]
    for k, name in enumerate(("r", "g", "b", "nir")):
        band = ortho.channels[name]
        v = band[r, c]
        v = np.where(ortho.valid(name)[r, c], v, np.nan)
        color[inside, k] = v
    color[np.isnan(color).any(axis=1)] = np.nan
    outside = int((~inside).sum())
    if outside:
        log.warning("%d points outside the ortho extent left uncoloured", outside)
    return cloud.with_(color=color), outside


def _group_stats(vals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """min/max/mean per CSR group, skipping NaN entries. ``vals`` is (nnz, f)."""
    m = len(offsets) - 1
    f = vals.shape[1]
    out = np.full((m, f, 3), np.nan)
    counts = np.diff(offsets)
    nonempty = counts > 0
    starts = offsets[:-1][nonempty]
    if starts.size == 0:
        return out
    missing = np.isnan(vals)
    lo = np.minimum.reduceat(np.where(missing, np.inf, vals), starts, axis=0)
    hi = np.maximum.reduceat(np.where(missing, -np.inf, vals), starts, axis=0)
    tot = np.add.reduceat(np.where(missing, 0.0, vals), starts, axis=0)
    num = np.add.reduceat((~missing).astype(np.float64), starts, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = tot / num
    has = num > 0
    out[nonempty, :, 0] = np.where(has, lo, np.nan)
    out[nonempty, :, 1] = np.where(has, hi, np.nan)
    out[nonempty, :, 2] = np.where(has, mean, np.nan)
    return out


def _flatness_groups(cloud: PointCloud, qids: np.ndarray, offsets, ids) -> np.ndarray:
    counts = np.diff(offsets)
    q = np.repeat(qids, counts)
    d = np.stack([cloud.x[ids] - cloud.x[q], cloud.y[ids] - cloud.y[q], cloud.z[ids] - cloud.z[q]], axis=1)
    nonempty = counts > 0
    starts = offsets[:-1][nonempty]
    out = np.zeros(len(qids))
    if starts.size == 0:
        return out
    n = counts[nonempty].astype(np.float64)
    s1 = np.add.reduceat(d, starts, axis=0) / n[:, None]
    s2 = np.add.reduceat(d[:, :, None] * d[:, None, :], starts, axis=0) / n[:, None, None]
    cov = s2 - s1[:, :, None] * s1[:, None, :]
    out[nonempty] = flatness_from_cov(cov, n)
    return out


def flatness_from_cov(cov: np.ndarray, n=None) -> np.ndarray:
    """Smallest eigenvalue over eigenvalue sum for a stack of 3x3 covariances."""
    cov = np.asarray(cov, dtype=np.float64).reshape(-1, 3, 3)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    lam = np.linalg.eigvalsh(cov)
    trace = lam.sum(axis=1)
    ok = trace >= 1e-12
    if n is not None:
        ok &= np.asarray(n).reshape(-1) >= 3
    ratio = np.zeros(len(cov))
    ratio[ok] = np.clip(lam[ok, 0] / trace[ok], 0.0, 1.0 / 3.0)
    return ratio


def _base_values(cloud: PointCloud) -> np.ndarray:
    color = cloud.color if cloud.color is not None else np.full((len(cloud), 4), np.nan)
    return np.column_stack([cloud.intensity, color])


def neighborhood_stats(index: SpatialIndex, cloud: PointCloud, point_id: int, radius: float = 1.0) -> np.ndarray:
    """15 values: (min, max, mean) of intensity, r, g, b, nir over the xy-neighbourhood."""
    offsets, ids = radius_query_batch(index, cloud.x[[point_id]], cloud.y[[point_id]], radius)
    return _group_stats(_base_values(cloud)[ids], offsets)[0].reshape(-1)


def flatness(index: SpatialIndex, cloud: PointCloud, point_id: int, radius: float = 1.0) -> float:
    offsets, ids = radius_query_batch(index, cloud.x[[point_id]], cloud.y[[point_id]], radius)
    return float(_flatness_groups(cloud, np.array([point_id]), offsets, ids)[0])


def feature_rows(cloud: PointCloud, index: SpatialIndex, qids: np.ndarray, radius: float = 1.0,
                 chunk: int = 2048) -> np.ndarray:
    """21-column feature matrix for the given point ids (no class filtering)."""
    qids = np.asarray(qids, dtype=np.int64)
    base = _base_values(cloud)
    out = np.empty((len(qids), N_FEATURES))
    for lo in range(0, len(qids), chunk):
        q = qids[lo:lo + chunk]
        offsets, ids = radius_query_batch(index, cloud.x[q], cloud.y[q], radius)
        stats = _group_stats(base[ids], offsets)
        out[lo:lo + len(q), :5] = base[q]
        out[lo:lo + len(q), 5:20] = stats.reshape(len(q), 15)
        out[lo:lo + len(q), 20] = _flatness_groups(cloud, q, offsets, ids)
    return out


@dataclass
class FeatureTable:
    X: np.ndarray
    point_ids: np.ndarray
    labels: np.ndarray | None = None
    class_tags: list[str] | None = None

    def __len__(self) -> int:
        return len(self.point_ids)

    def take(self, idx) -> "FeatureTable":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureTable(
            self.X[idx], self.point_ids[idx],
            None if self.labels is None else self.labels[idx],
            None if self.class_tags is None else [self.class_tags[i] for i in idx],
        )

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FEATURE_NAMES + ["point_id", "label", "class_tag"])
            for i in range(len(self)):
                label = "" if self.labels is None else int(self.labels[i])
                tag = "" if self.class_tags is None else self.class_tags[i]
                w.writerow([repr(float(v)) for v in self.X[i]] + [int(self.point_ids[i]), label, tag])

    @classmethod
    def load(cls, path) -> "FeatureTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:N_FEATURES] != FEATURE_NAMES:
                raise ValidationError(f"{path}: unexpected feature header")
            rows = list(reader)
        X = np.array([[float(v) for v in r[:N_FEATURES]] for r in rows]).reshape(-1, N_FEATURES)
        pid = np.array([int(r[N_FEATURES]) for r in rows], dtype=np.int64)
        labels = None
        if rows and rows[0][N_FEATURES + 1] != "":
            labels = np.array([int(r[N_FEATURES + 1]) for r in rows], dtype=np.int64)
        tags = [r[N_FEATURES + 2] for r in rows] if rows and rows[0][N_FEATURES + 2] else None
        return cls(X, pid, labels, tags)


def build_feature_table(cloud: PointCloud, index: SpatialIndex, intensity_source: str = "raw",
                        point_ids=None, radius: float = 1.0) -> FeatureTable:
    """One row per Ground point; neighbourhoods use every point of the cloud.

    ``point_ids`` restricts the rows to a subset (non-Ground ids are dropped).
    """
    if intensity_source not in ("raw", "encoded"):
        raise ValueError(f"intensity_source must be raw or encoded, got {intensity_source!r}")
    if (intensity_source == "encoded") != cloud.encoded:
        raise ValidationError(
            f"intensity_source={intensity_source} but cloud is {'encoded' if cloud.encoded else 'raw'}")
    ground = cloud.las_class == LasClass.GROUND
    if point_ids is None:
        qids = np.flatnonzero(ground)
    else:
        qids = np.asarray(point_ids, dtype=np.int64)
        qids = qids[ground[qids]]
    colored = cloud.has_color[qids]
    if not colored.all():
        bad = int(qids[~colored][0])
        raise ValidationError(f"ground point {bad} has no colour; run colorize first")
    return FeatureTable(feature_rows(cloud, index, qids, radius), qids)
