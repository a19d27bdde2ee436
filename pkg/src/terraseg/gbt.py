"""Histogram gradient-boosted trees for binary classification (logistic loss)."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EPS = 1e-6
MAGIC = b"TSGB"
VERSION = 1


@dataclass
class GbtConfig:
    num_trees: int = 400
    learning_rate: float = 0.1
    max_depth: int = 7
    min_leaf: int = 20
    num_bins: int = 64
    l2: float = 1.0
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("num_bins must be at least 2")


@dataclass
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            idx = np.flatnonzero(inner)
            go_left = X[idx, f[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass
class GbtModel:
    base_score: float
    learning_rate: float
    n_features: int
    trees: list[Tree] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def raw(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        out = np.full(len(X), self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.raw(X))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def logloss(y, raw) -> float:
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def bin_edges(x: np.ndarray, num_bins: int) -> np.ndarray:
    """Equal-frequency edges taken from the data (transform-equivariant).

    A value falls in bin ``searchsorted(edges, v, 'left')``, so bin ``i``
    holds ``edges[i-1] < v <= edges[i]``.
    """
    u = np.unique(x)
    if len(u) <= num_bins:
        return u[:-1]
    q = np.quantile(x, np.arange(1, num_bins) / num_bins, method="lower")
    edges = np.unique(q)
    return edges[edges < u[-1]]


class _Grower:
    def __init__(self, codes, edges, cfg: GbtConfig):
        self.codes = codes  # (n, d) bin codes
        self.edges = edges
        self.cfg = cfg
        self.n, self.d = codes.shape
        self.nb = max(len(e) for e in edges) + 1
        self.flat = codes.astype(np.int64) + np.arange(self.d) * self.nb

    def hist(self, idx, g, h):
        keys = self.flat[idx].ravel()
        size = self.d * self.nb
        G = np.bincount(keys, weights=np.repeat(g[idx], self.d), minlength=size).reshape(self.d, self.nb)
        H = np.bincount(keys, weights=np.repeat(h[idx], self.d), minlength=size).reshape(self.d, self.nb)
        C = np.bincount(keys, minlength=size).reshape(self.d, self.nb)
        return G, H, C

    def best_split(self, G, H, C):
        lam, ml = self.cfg.l2, self.cfg.min_leaf
        GL, HL, CL = np.cumsum(G, 1)[:, :-1], np.cumsum(H, 1)[:, :-1], np.cumsum(C, 1)[:, :-1]
        Gt, Ht, Ct = G.sum(1, keepdims=True), H.sum(1, keepdims=True), C.sum(1, keepdims=True)
        GR, HR, CR = Gt - GL, Ht - HL, Ct - CL
        gain = GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - Gt ** 2 / (Ht + lam)
        valid = (CL >= ml) & (CR >= ml)
        # bins beyond a feature's last edge are not real thresholds
        for f, e in enumerate(self.edges):
            valid[f, len(e):] = False
        gain = np.where(valid, gain, -np.inf)
        f, b = np.unravel_index(int(np.argmax(gain)), gain.shape)
        return float(gain[f, b]), int(f), int(b)

    def grow(self, g, h) -> Tree:
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node():
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            return len(feature) - 1

        lam = self.cfg.l2
        root = new_node()
        stack = [(root, np.arange(self.n), 0, self.hist(np.arange(self.n), g, h))]
        while stack:
            node, idx, depth, (G, H, C) = stack.pop()
            Gs, Hs = G[0].sum(), H[0].sum()
            value[node] = -Gs / (Hs + lam)
            if depth >= self.cfg.max_depth or len(idx) < 2 * self.cfg.min_leaf:
                continue
            gain, f, b = self.best_split(G, H, C)
            if not gain > 1e-12:
                continue
            go_left = self.codes[idx, f] <= b
            li, ri = idx[go_left], idx[~go_left]
            if len(li) <= len(ri):
                hl = self.hist(li, g, h)
                hr = tuple(a - c for a, c in zip((G, H, C), hl))
            else:
                hr = self.hist(ri, g, h)
                hl = tuple(a - c for a, c in zip((G, H, C), hr))
            feature[node], threshold[node] = f, float(self.edges[f][b])
            ln, rn = new_node(), new_node()
            left[node], right[node] = ln, rn
            stack.append((rn, ri, depth + 1, hr))
            stack.append((ln, li, depth + 1, hl))
        return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                    np.array(right, dtype=np.int64), np.array(value))

    def route(self, tree: Tree, codes) -> np.ndarray:
        node = np.zeros(len(codes), dtype=np.int64)
        bins = [np.searchsorted(self.edges[f], tree.threshold[i]) if tree.feature[i] >= 0 else 0
                for i, f in enumerate(tree.feature)]
        bins = np.array(bins, dtype=np.int64)
        while True:
            f = tree.feature[node]
            inner = f >= 0
            if not inner.any():
                return tree.value[node]
            idx = np.flatnonzero(inner)
            go_left = codes[idx, f[idx]] <= bins[node[idx]]
            node[idx] = np.where(go_left, tree.left[node[idx]], tree.right[node[idx]])


def fit_gbt(X, y, X_valid=None, y_valid=None, cfg: GbtConfig | None = None,
            trace: list | None = None) -> GbtModel:
    """Boost depth-limited trees on logistic loss, early-stopped on validation
    accuracy; the best-validation snapshot is returned.

    A tree whose full step would raise the training loss is shrunk by
    halving until it does not.
    """
    cfg = cfg or GbtConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n, d) with one label per row")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    if not np.isfinite(X).all():
        raise ValueError("features must be finite")
    n, d = X.shape
    prior = float(np.clip(y.mean(), EPS, 1 - EPS)) if n else 0.5
    base = float(np.log(prior / (1 - prior)))
    model = GbtModel(base, cfg.learning_rate, d, [], asdict(cfg))
    if n == 0 or y.min() == y.max():
        log.warning("training labels contain a single class; returning the base-score model")
        return model

    edges = [bin_edges(X[:, f], cfg.num_bins) for f in range(d)]
    codes = np.stack([np.searchsorted(edges[f], X[:, f], side="left") for f in range(d)], axis=1)
    grower = _Grower(codes, edges, cfg)
    raw = np.full(n, base)
    have_valid = X_valid is not None and len(X_valid) > 0
    if have_valid:
        X_valid = np.asarray(X_valid, dtype=np.float64)
        y_valid = np.asarray(y_valid, dtype=np.float64)
        raw_v = np.full(len(X_valid), base)
        best_acc = float(np.mean((raw_v >= 0) == (y_valid > 0.5)))
    else:
        best_acc = -1.0
    best_n, stale = 0, 0
    loss = logloss(y, raw)
    if trace is not None:
        trace.append(loss)
    for it in range(cfg.num_trees):
        p = _sigmoid(raw)
        g, h = p - y, p * (1 - p)
        tree = grower.grow(g, h)
        step = cfg.learning_rate * grower.route(tree, codes)
        for _ in range(30):
            new_loss = logloss(y, raw + step)
            if new_loss <= loss:
                break
            tree.value *= 0.5
            step *= 0.5
        else:
            break
        raw += step
        loss = new_loss
        if trace is not None:
            trace.append(loss)
        model.trees.append(tree)
        if have_valid:
            raw_v += cfg.learning_rate * tree.predict(X_valid)
            acc = float(np.mean((raw_v >= 0) == (y_valid > 0.5)))
            if acc > best_acc:
                best_acc, best_n, stale = acc, len(model.trees), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        else:
            best_n = len(model.trees)
        if tree.n_nodes == 1 and abs(tree.value[0]) < 1e-15:
            break
    model.trees = model.trees[:best_n]
    log.info("GBT: %d trees kept, validation accuracy %.4f", best_n, best_acc)
    return model


def predict_gbt(model: GbtModel, fv) -> float:
    fv = np.asarray(fv, dtype=np.float64)
    if fv.shape != (model.n_features,):
        raise ValueError(f"expected {model.n_features} features, got shape {fv.shape}")
    return float(model.predict_proba(fv[None])[0])


# --------------------------------------------------------------------------
# TSGB files: magic, u32 version, u32 + JSON config echo, f64 base, f64 lr,
# u32 feature count, u32 tree count, then each tree pre-order as
# (u8 0, f64 value) leaves and (u8 1, u16 feature, f64 threshold) splits.

def _write_tree(tree: Tree, out: bytearray) -> None:
    stack = [0]
    while stack:
        i = stack.pop()
        if tree.feature[i] < 0:
            out += struct.pack("<Bd", 0, tree.value[i])
        else:
            out += struct.pack("<BHd", 1, int(tree.feature[i]), tree.threshold[i])
            stack.append(int(tree.right[i]))
            stack.append(int(tree.left[i]))


def _read_tree(buf: bytes, off: int) -> tuple[Tree, int]:
    feature, threshold, left, right, value = [], [], [], [], []

    def read(off):
        kind = buf[off]
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        if kind == 0:
            (value[i],) = struct.unpack_from("<d", buf, off + 1)
            return off + 9
        f, t = struct.unpack_from("<Hd", buf, off + 1)
        feature[i], threshold[i] = f, t
        left[i] = len(feature)
        off = read(off + 11)
        right[i] = len(feature)
        return read(off)

    off = read(off)
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value)), off


def model_bytes(model: GbtModel) -> bytes:
    cfg = json.dumps(model.config, sort_keys=True).encode()
    out = bytearray(MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg)
    out += struct.pack("<ddII", model.base_score, model.learning_rate, model.n_features, len(model.trees))
    for t in model.trees:
        _write_tree(t, out)
    return bytes(out)


def save_gbt(model: GbtModel, path) -> None:
    Path(path).write_bytes(model_bytes(model))


def load_gbt(path) -> GbtModel:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a TSGB model")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    cfg = json.loads(buf[12:12 + n])
    off = 12 + n
    base, lr, d, nt = struct.unpack_from("<ddII", buf, off)
    off += struct.calcsize("<ddII")
    trees = []
    for _ in range(nt):
        t, off = _read_tree(buf, off)
        trees.append(t)
    return GbtModel(base, lr, d, trees, cfg)
