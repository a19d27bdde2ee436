"""Sensor-independent intensity embedding.

A shared MLP ``E(x, onehot(context))`` with a skip connection on the
normalised intensity is trained so that encoded intensity distributions of
different sensors coincide (1-D earth mover distances), while a penalty on
``-ln dE/dx`` keeps the map increasing and non-contracting and a co-trained
linear road/field classifier keeps it informative.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import PointCloud, Polygon, PolygonSet, ValidationError, polygon_set_contains
from .nn import Dense, Module, Tensor, no_grad, ops
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import OptimState, optimizer_step

log = logging.getLogger(__name__)

DERIV_FLOOR = 1e-6


# --------------------------------------------------------------------------
# geometry: area of polygons inside a cell


def clip_ring(ring: np.ndarray, box: tuple[float, float, float, float]) -> np.ndarray:
    """Sutherland-Hodgman clip of a ring against an axis-aligned box."""
    x0, y0, x1, y1 = box
    pts = [tuple(p) for p in np.asarray(ring, dtype=np.float64)]
    edges = [
        (lambda p: p[0] >= x0, lambda a, b: _cut_x(a, b, x0)),
        (lambda p: p[0] <= x1, lambda a, b: _cut_x(a, b, x1)),
        (lambda p: p[1] >= y0, lambda a, b: _cut_y(a, b, y0)),
        (lambda p: p[1] <= y1, lambda a, b: _cut_y(a, b, y1)),
    ]
    for inside, cut in edges:
        if not pts:
            break
        out = []
        prev = pts[-1]
        for cur in pts:
            if inside(cur):
                if not inside(prev):
                    out.append(cut(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cut(prev, cur))
            prev = cur
        pts = out
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def _cut_x(a, b, x):
    t = (x - a[0]) / (b[0] - a[0])
    return (x, a[1] + t * (b[1] - a[1]))


def _cut_y(a, b, y):
    t = (y - a[1]) / (b[1] - a[1])
    return (a[0] + t * (b[0] - a[0]), y)


def _shoelace(pts: np.ndarray) -> float:
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def intersection_fraction(cell: tuple[float, float, float, float], polys: PolygonSet) -> float:
    """Sum of polygon areas inside ``cell`` (x0, y0, x1, y1) over the cell area."""
    x0, y0, x1, y1 = cell
    area = (x1 - x0) * (y1 - y0)
    if not area > 0:
        raise ValueError(f"degenerate cell {cell}")
    total = 0.0
    for poly in polys.polygons:
        bx0, by0, bx1, by1 = poly.bounds
        if bx1 < x0 or bx0 > x1 or by1 < y0 or by0 > y1:
            continue
        total += _shoelace(clip_ring(poly.outer, cell))
        total -= sum(_shoelace(clip_ring(h, cell)) for h in poly.holes)
    frac = total / area
    if frac > 1.0 + 1e-9:
        log.warning("polygons overlap inside cell %s: fraction %.4f clamped to 1", cell, frac)
    return float(min(max(frac, 0.0), 1.0))


# --------------------------------------------------------------------------
# cell selection


@dataclass
class CellInfo:
    key: tuple[int, int]
    bounds: tuple[float, float, float, float]
    sensors: frozenset
    n_road: int
    n_field: int
    i_road: float = 0.0
    i_grain: float = 0.0
    point_ids: np.ndarray | None = None


def cell_table(cloud: PointCloud, roads: PolygonSet, grain: PolygonSet, cell_size: float = 1000.0,
               origin: tuple[float, float] | None = None):
    """Per-cell sensor sets, road/field point counts and area fractions.

    Returns ``(cells, is_road, is_field)`` where the masks are per point.
    """
    is_road = polygon_set_contains(roads, cloud.x, cloud.y) >= 0
    is_field = (polygon_set_contains(grain, cloud.x, cloud.y) >= 0) & ~is_road
    if origin is None:
        origin = (math.floor(cloud.x.min() / cell_size) * cell_size, math.floor(cloud.y.min() / cell_size) * cell_size)
    cx = np.floor((cloud.x - origin[0]) / cell_size).astype(np.int64)
    cy = np.floor((cloud.y - origin[1]) / cell_size).astype(np.int64)
    key = cy * (cx.max() + 1) + cx
    order = np.argsort(key, kind="stable")
    uniq, starts = np.unique(key[order], return_index=True)
    ends = np.r_[starts[1:], len(order)]
    cells = []
    for s, e in zip(starts, ends):
        ids = order[s:e]
        i, j = int(cx[ids[0]]), int(cy[ids[0]])
        bounds = (origin[0] + i * cell_size, origin[1] + j * cell_size,
                  origin[0] + (i + 1) * cell_size, origin[1] + (j + 1) * cell_size)
        cells.append(CellInfo(
            (i, j), bounds, frozenset(int(v) for v in np.unique(cloud.sensor_id[ids])),
            int(is_road[ids].sum()), int(is_field[ids].sum()),
            intersection_fraction(bounds, roads), intersection_fraction(bounds, grain), ids,
        ))
    return cells, is_road, is_field


def select_training_cells(cells: list[CellInfo], min_points: int = 50, tolerance: float = 0.1,
                          seed: int = 0) -> dict[int, list[CellInfo]]:
    """Single-sensor cells with enough road and field points, subsampled so that
    every sensor bucket holds about the same number of road and field points."""
    buckets: dict[int, list[CellInfo]] = {}
    for s in sorted({s for c in cells for s in c.sensors}):
        buckets[s] = []
    for c in cells:
        if len(c.sensors) != 1:
            continue
        if c.n_road < min_points or c.n_field < min_points:
            continue
        buckets[next(iter(c.sensors))].append(c)
    empty = [s for s, cs in buckets.items() if not cs]
    if empty:
        raise ValidationError(f"sensor bucket(s) {empty} have no eligible cells")
    road_target = min(sum(c.n_road for c in cs) for cs in buckets.values())
    field_target = min(sum(c.n_field for c in cs) for cs in buckets.values())
    rng = np.random.default_rng(seed)
    chosen = {}
    for s, cs in buckets.items():
        chosen[s] = sorted(_balanced_subset(cs, road_target, field_target, tolerance, rng), key=lambda c: c.key)
    return chosen


def _balanced_subset(cs: list[CellInfo], road_target: int, field_target: int, tolerance: float,
                     rng: np.random.Generator) -> list[CellInfo]:
    """Greedily add the cell that brings (roads, fields) closest to the targets
    without exceeding either by more than ``tolerance``."""
    r_cap, f_cap = (1 + tolerance) * road_target, (1 + tolerance) * field_target

    def gap(r, f):
        return abs(road_target - r) / road_target + abs(field_target - f) / field_target

    todo = [cs[i] for i in rng.permutation(len(cs))]
    keep, r, f = [], 0, 0
    while todo:
        scores = [gap(r + c.n_road, f + c.n_field) if r + c.n_road <= r_cap and f + c.n_field <= f_cap
                  else np.inf for c in todo]
        k = int(np.argmin(scores))
        if not np.isfinite(scores[k]) or (keep and scores[k] >= gap(r, f)):
            break
        c = todo.pop(k)
        keep.append(c)
        r += c.n_road
        f += c.n_field
    if not keep:
        # every single cell overshoots; take the smallest one
        keep = [min(cs, key=lambda c: (c.n_road + c.n_field, c.key))]
    return keep


# --------------------------------------------------------------------------
# encoder model


class EncoderModel(Module):
    """E(x, c) = x + MLP([x, onehot(c)]), hidden tanh layers, plus classifier (w, b)."""

    def __init__(self, sensor_ids, normalizer: float, hidden=(32, 32), seed: int = 0, out_scale: float = 0.01):
        if not normalizer > 0:
            raise ValueError("normalizer must be positive")
        rng = np.random.default_rng(seed)
        self.sensor_ids = [int(s) for s in sensor_ids]
        self.n_contexts = len(self.sensor_ids)
        self.normalizer = float(normalizer)
        self.hidden = tuple(hidden)
        sizes = [1 + self.n_contexts] + list(hidden)
        self.mlp = [Dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.out = Dense(sizes[-1], 1, rng, scale=out_scale)
        self.w = Tensor(np.array(1.0), requires_grad=True)
        self.b = Tensor(np.array(0.0), requires_grad=True)

    def parameters(self):
        p = super().parameters()
        p["clf.w"] = self.w
        p["clf.b"] = self.b
        return p

    def context_index(self, sensor_id) -> np.ndarray:
        lookup = {s: i for i, s in enumerate(self.sensor_ids)}
        sid = np.atleast_1d(sensor_id)
        try:
            return np.array([lookup[int(s)] for s in sid], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"sensor id {exc.args[0]} was not seen in training") from None

    def forward_with_derivative(self, x, ctx) -> tuple[Tensor, Tensor]:
        """E and dE/dx for normalised intensities ``x`` and context indices ``ctx``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        onehot = np.zeros((len(x), self.n_contexts))
        onehot[np.arange(len(x)), np.asarray(ctx, dtype=np.int64)] = 1.0
        h = Tensor(np.hstack([x, onehot]))
        dh = None  # d h / d x, shape (n, width)
        for k, layer in enumerate(self.mlp):
            z = layer(h)
            dz = layer.weight[0:1, :] if k == 0 else dh @ layer.weight
            h = ops.tanh(z)
            dh = (1.0 - h * h) * dz
        e = self.out(h) + Tensor(x)
        de = dh @ self.out.weight + 1.0
        return e.reshape(-1), de.reshape(-1)

    def encode(self, intensity, sensor_id) -> np.ndarray:
        x = np.asarray(intensity, dtype=np.float64) / self.normalizer
        with no_grad():
            e, _ = self.forward_with_derivative(x, self.context_index(sensor_id))
        return e.data

    def architecture(self) -> dict:
        return {"model": "encoder", "sensor_ids": self.sensor_ids, "hidden": list(self.hidden),
                "layers": [(name, layer.describe()) for name, layer in self.layers()]}


def encoder_derivative(model: EncoderModel, x, context) -> np.ndarray:
    """Exact dE/dx at normalised intensities ``x`` for one context index."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    with no_grad():
        _, de = model.forward_with_derivative(x, np.full(len(x), int(context)))
    return de.data


def encode_cloud(model: EncoderModel, cloud: PointCloud) -> PointCloud:
    if cloud.encoded:
        raise ValidationError("cloud intensities are already encoded")
    ctx = model.context_index(np.unique(cloud.sensor_id))  # validates ids
    del ctx
    out = np.empty(len(cloud))
    for lo in range(0, len(cloud), 262144):
        sl = slice(lo, lo + 262144)
        out[sl] = model.encode(cloud.intensity[sl], cloud.sensor_id[sl])
    return cloud.with_(intensity=out, encoded=True)


HC_TAG = b"TSHC"


def save_encoder(model: EncoderModel, path) -> None:
    chunk = struct.pack("<dIdd", model.normalizer, model.n_contexts, float(model.w.data), float(model.b.data))
    save_checkpoint(path, model.architecture(), model.state(), {HC_TAG: chunk})


def load_encoder(path) -> EncoderModel:
    arch, state, chunks = load_checkpoint(path)
    if arch.get("model") != "encoder" or HC_TAG not in chunks:
        raise ValidationError(f"{path} is not an encoder checkpoint")
    normalizer, n_ctx, w, b = struct.unpack("<dIdd", chunks[HC_TAG])
    model = EncoderModel(arch["sensor_ids"], normalizer, tuple(arch["hidden"]))
    if model.n_contexts != n_ctx:
        raise ValidationError(f"{path}: context count mismatch")
    model.load_state(state)
    return model


# --------------------------------------------------------------------------
# batches and loss


@dataclass
class HarmonizeConfig:
    alpha: float = 1.0
    beta: float = 0.3
    gamma: float = 1.0
    batch_n: int = 1024
    steps_per_epoch: int = 10
    epochs: int = 300
    min_epochs: int = 20
    tolerance: float = 1e-4
    lr: float = 3e-3
    road_share: float = 0.2
    cell_size: float = 1000.0
    min_points: int = 50
    balance_tolerance: float = 0.1
    hidden: tuple = (32, 32)
    seed: int = 0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        self.hidden = tuple(self.hidden)


@dataclass
class EncoderData:
    """Per-context pools of normalised intensity with road/field indicators."""

    sensor_ids: list[int]
    normalizer: float
    x: list[np.ndarray]
    road: list[np.ndarray]
    fld: list[np.ndarray]
    cells: dict = field(default_factory=dict)


@dataclass
class EmbedBatch:
    x: np.ndarray  # (contexts, n) normalised intensities
    M: np.ndarray  # 1 = known road or field
    C: np.ndarray  # 1 = road (meaningful where M = 1)


def prepare_encoder_data(cloud: PointCloud, roads: PolygonSet, grain: PolygonSet,
                         cfg: HarmonizeConfig | None = None) -> EncoderData:
    cfg = cfg or HarmonizeConfig()
    cells, is_road, is_field = cell_table(cloud, roads, grain, cfg.cell_size)
    chosen = select_training_cells(cells, cfg.min_points, cfg.balance_tolerance, cfg.seed)
    sensors = sorted(chosen)
    if len(sensors) < 2:
        raise ValidationError("need at least two sensors to train an encoder")
    ids = [np.concatenate([c.point_ids for c in chosen[s]]) for s in sensors]
    normalizer = float(np.percentile(cloud.intensity[np.concatenate(ids)], 99))
    if not normalizer > 0:
        raise ValidationError("99th percentile of intensity is zero")
    return EncoderData(
        sensors, normalizer,
        [cloud.intensity[i] / normalizer for i in ids],
        [is_road[i] for i in ids], [is_field[i] for i in ids], chosen,
    )


def sample_batch(data: EncoderData, n: int, rng: np.random.Generator, road_share: float = 0.2) -> EmbedBatch:
    """Equal composition in every context: the pooled labelled fraction of
    ``n`` is labelled (all of it when some context has no unlabelled points),
    and roads are oversampled to ``road_share`` of it."""
    lab = sum(int((r | f).sum()) for r, f in zip(data.road, data.fld))
    tot = sum(len(x) for x in data.x)
    n_lab = int(round(n * lab / tot))
    if any((r | f).all() for r, f in zip(data.road, data.fld)):
        n_lab = n
    n_road = int(round(road_share * n_lab))
    n_field = n_lab - n_road
    n_unk = n - n_lab
    xs, Ms, Cs = [], [], []
    for x, r, f in zip(data.x, data.road, data.fld):
        pools = [np.flatnonzero(r), np.flatnonzero(f), np.flatnonzero(~(r | f))]
        parts = []
        for pool, k in zip(pools, (n_road, n_field, n_unk)):
            if k and not len(pool):
                raise ValidationError("a context has no points of a required kind")
            parts.append(pool[rng.integers(0, len(pool), k)] if k else np.zeros(0, np.int64))
        idx = np.concatenate(parts)
        xs.append(x[idx])
        Ms.append(np.r_[np.ones(n_road + n_field), np.zeros(n_unk)])
        Cs.append(np.r_[np.ones(n_road), np.zeros(n_field + n_unk)])
    return EmbedBatch(np.array(xs), np.array(Ms), np.array(Cs))


def emd_1d(u, v) -> float:
    """Mean absolute difference of order statistics of equal-size samples."""
    u = np.sort(np.asarray(u, dtype=np.float64).ravel())
    v = np.sort(np.asarray(v, dtype=np.float64).ravel())
    if len(u) != len(v):
        raise ValueError(f"emd_1d needs equal sample sizes, got {len(u)} and {len(v)}")
    if len(u) == 0:
        raise ValueError("emd_1d of empty samples")
    return float(np.mean(np.abs(u - v)))


def _quantile_pick(n_have: int, n_want: int) -> np.ndarray:
    """Evenly spaced order-statistic indices used to shrink a sorted sample."""
    if n_have == n_want:
        return np.arange(n_have)
    return np.floor((np.arange(n_want) + 0.5) * n_have / n_want).astype(np.int64)


def _emd_tensor(a: Tensor, b: Tensor) -> Tensor:
    ia = np.argsort(a.data, kind="stable")
    ib = np.argsort(b.data, kind="stable")
    m = min(len(ia), len(ib))
    ia = ia[_quantile_pick(len(ia), m)]
    ib = ib[_quantile_pick(len(ib), m)]
    return ops.tabs(a[ia] - b[ib]).mean()


def _pairwise_emd(values: list[Tensor], what: str) -> Tensor | None:
    terms = []
    for i, j in itertools.combinations(range(len(values)), 2):
        if len(values[i].data) == 0 or len(values[j].data) == 0:
            log.warning("skipping %s EMD between contexts %d and %d: no labelled points", what, i, j)
            continue
        terms.append(_emd_tensor(values[i], values[j]))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def embed_loss(batch: EmbedBatch, model: EncoderModel, cfg: HarmonizeConfig | None = None):
    """Weighted loss and its parts (emd_all, emd_road, emd_field, grad, class)."""
    cfg = cfg or HarmonizeConfig()
    n_ctx, n = batch.x.shape
    if n_ctx != model.n_contexts:
        raise ValueError(f"batch has {n_ctx} contexts, model {model.n_contexts}")
    if n_ctx < 2:
        raise ValueError("EMD terms need at least two contexts")
    ctx = np.repeat(np.arange(n_ctx), n)
    e, de = model.forward_with_derivative(batch.x.ravel(), ctx)
    per = [e[i * n:(i + 1) * n] for i in range(n_ctx)]
    M, C = batch.M.ravel() > 0.5, batch.C.ravel() > 0.5
    road = [e[np.flatnonzero((M & C)[i * n:(i + 1) * n]) + i * n] for i in range(n_ctx)]
    fld = [e[np.flatnonzero((M & ~C)[i * n:(i + 1) * n]) + i * n] for i in range(n_ctx)]
    emd_all = _pairwise_emd(per, "all")
    emd_road = _pairwise_emd(road, "road")
    emd_field = _pairwise_emd(fld, "field")
    if emd_road is None or emd_field is None:
        raise ValidationError("every context pair lacks road or field points in this batch")
    grad = (-ops.log(ops.clamp_min(de, DERIV_FLOOR))).mean()
    logits = e * model.w + model.b
    cls = ops.bce_with_logits(logits, batch.C.ravel(), batch.M.ravel()).sum() * (1.0 / (n_ctx * n))
    total = (emd_all + emd_road + emd_field) * cfg.alpha + grad * cfg.beta + cls * cfg.gamma
    parts = {"emd_all": emd_all.item(), "emd_road": emd_road.item(), "emd_field": emd_field.item(),
             "grad": grad.item(), "class": cls.item()}
    return total, parts


def combine_parts(parts: dict, cfg: HarmonizeConfig) -> float:
    return (cfg.alpha * (parts["emd_all"] + parts["emd_road"] + parts["emd_field"])
            + cfg.beta * parts["grad"] + cfg.gamma * parts["class"])


def train_encoder(data: EncoderData, cfg: HarmonizeConfig | None = None, history: list | None = None,
                  model: EncoderModel | None = None) -> EncoderModel:
    """Adam on ``embed_loss`` with ``w`` projected into [-1, 1] after each step.

    Stops when the mean loss of the last 10 epochs improves on the 10 before
    by less than ``tolerance`` (relative), or at ``epochs``.
    """
    cfg = cfg or HarmonizeConfig()
    if len(data.sensor_ids) < 2:
        raise ValidationError("train_encoder needs at least two contexts")
    rng = np.random.default_rng(cfg.seed)
    model = model or EncoderModel(data.sensor_ids, data.normalizer, cfg.hidden, cfg.seed)
    params = model.parameters()
    state = OptimState(lr=cfg.lr)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            batch = sample_batch(data, cfg.batch_n, rng, cfg.road_share)
            model.zero_grad()
            total, parts = embed_loss(batch, model, cfg)
            if not np.isfinite(total.data):
                raise FloatingPointError(f"encoder loss diverged at epoch {epoch}")
            total.backward()
            optimizer_step(params, {k: p.grad for k, p in params.items()}, state)
            model.w.data = np.clip(model.w.data, -1.0, 1.0)
            losses.append(total.item())
        epoch_losses.append(float(np.mean(losses)))
        if history is not None:
            history.append({"epoch": epoch, "loss": epoch_losses[-1], **parts})
        if epoch + 1 >= max(cfg.min_epochs, 20):
            last = np.mean(epoch_losses[-10:])
            prev = np.mean(epoch_losses[-20:-10])
            if (prev - last) / max(abs(prev), 1e-12) < cfg.tolerance:
                log.info("encoder converged after %d epochs (loss %.5f)", epoch + 1, last)
                break
    return model


def pairwise_emd_all(model: EncoderModel | None, data: EncoderData, n: int = 20000, seed: int = 12345) -> float:
    """Mean pairwise EMD of encoded values (normalised raw if ``model`` is None)
    on one large batch with the training composition."""
    batch = sample_batch(data, n, np.random.default_rng(seed))
    vals = []
    for k in range(batch.x.shape[0]):
        vals.append(batch.x[k] if model is None else _encode_norm(model, batch.x[k], k))
    d = [emd_1d(vals[i], vals[j]) for i, j in itertools.combinations(range(len(vals)), 2)]
    return float(np.mean(d))


def _encode_norm(model: EncoderModel, x, k: int) -> np.ndarray:
    with no_grad():
        e, _ = model.forward_with_derivative(x, np.full(len(x), k))
    return e.data


def config_dict(cfg: HarmonizeConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
