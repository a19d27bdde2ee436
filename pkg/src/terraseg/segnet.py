"""U-Net segmentation model, tile cropping and the training loop."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .core import Raster, ValidationError
from .nn import BatchNorm, Conv1x1, Conv3x3, Module, ReLU, Tensor, no_grad, ops
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import OptimState, optimizer_step
from .raster import FEATURE_CHANNELS, to_tensor

log = logging.getLogger(__name__)


class Block(Module):
    """Conv3x3 -> BN -> ReLU -> Conv3x3 -> BN -> ReLU."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.conv_a = Conv3x3(n_in, n_out, rng)
        self.bn_a = BatchNorm(n_out)
        self.conv_b = Conv3x3(n_out, n_out, rng)
        self.bn_b = BatchNorm(n_out)
        self.act = ReLU()

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        x = self.act(self.bn_a(self.conv_a(x), mode))
        return self.act(self.bn_b(self.conv_b(x), mode))


class UNet(Module):
    """Encoder widths c0 * 2**i for i = 0..k; decoder mirrors them."""

    def __init__(self, in_channels: int, k: int = 3, c0: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_channels, self.k, self.c0, self.seed = in_channels, k, c0, seed
        widths = [c0 * 2 ** i for i in range(k + 1)]
        self.widths = widths
        self.encoder = [Block(in_channels if i == 0 else widths[i - 1], widths[i], rng) for i in range(k + 1)]
        dec = []
        for i in range(k + 1):
            n_in = widths[k] if i == k else widths[i] + widths[i + 1]
            dec.append(Block(n_in, widths[i], rng))
        self.decoder = dec
        self.head_a = Conv1x1(widths[0], widths[0], rng)
        self.head_relu = ReLU()
        self.head_b = Conv1x1(widths[0], 1, rng)

    def architecture(self) -> dict:
        return {"model": "unet", "in_channels": self.in_channels, "k": self.k, "c0": self.c0,
                "seed": self.seed, "layers": [(name, layer.describe()) for name, layer in self.layers()]}

    def __call__(self, x: Tensor, mode: str = "train", return_features: bool = False):
        n, h, w, d = x.shape
        if d != self.in_channels:
            raise ValueError(f"model expects {self.in_channels} channels, got {d}")
        if h % 2 ** self.k or w % 2 ** self.k:
            raise ValueError(f"spatial dims {h}x{w} not divisible by 2**{self.k}")
        enc = []
        for i, block in enumerate(self.encoder):
            enc.append(block(x if i == 0 else ops.maxpool2(enc[-1]), mode))
        d_next = self.decoder[self.k](enc[self.k], mode)
        dec = [d_next]
        for i in range(self.k - 1, -1, -1):
            d_next = self.decoder[i](ops.concat([enc[i], ops.upsample2(d_next)], axis=-1), mode)
            dec.append(d_next)
        logits = self.head_b(self.head_relu(self.head_a(d_next)))
        if return_features:
            return logits, enc, dec
        return logits


def unet_forward(model: UNet, tile: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Logits (H, W, 1) for one (H, W, d) tile, or (N, H, W, 1) for a batch."""
    arr = np.asarray(tile, dtype=np.float64)
    single = arr.ndim == 3
    with no_grad():
        out = model(Tensor(arr[None] if single else arr), mode).data
    return out[0] if single else out


def save_unet(model: UNet, path, extra: dict | None = None) -> None:
    arch = model.architecture()
    if extra:
        arch["extra"] = extra
    save_checkpoint(path, arch, model.state())


def load_unet(path) -> UNet:
    arch, state, _ = load_checkpoint(path)
    if arch.get("model") != "unet":
        raise ValidationError(f"{path} is not a U-Net checkpoint")
    model = UNet(arch["in_channels"], arch["k"], arch["c0"], arch.get("seed", 0))
    model.load_state(state)
    model.channels = arch.get("extra", {}).get("channels")
    return model


@dataclass
class TileSet:
    tensors: np.ndarray  # (N, H, W, d)
    labels: np.ndarray   # (N, H, W)
    masks: np.ndarray    # (N, H, W) bool, valid label cells
    origins: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tensors)


def placements(extent: int, size: int, stride: int) -> list[int]:
    if extent < size:
        raise ValueError(f"extent {extent} smaller than tile size {size}")
    pos = list(range(0, extent - size + 1, stride))
    if pos[-1] != extent - size:
        pos.append(extent - size)
    return pos


def crop_tiles(features: Raster, labels: Raster, size: int = 96, stride: int = 48,
               channels=FEATURE_CHANNELS, clamp: bool = False) -> TileSet:
    """Regular grid of ``size`` crops. Tiles without any valid label cell are dropped.

    With ``clamp`` the last row/column is moved flush to the raster edge.
    """
    if not features.aligned_with(labels):
        raise ValidationError("feature and label rasters are not aligned")
    if features.width < size or features.height < size:
        raise ValueError(f"raster {features.width}x{features.height} smaller than one {size}x{size} tile")
    if clamp:
        rows, cols = placements(features.height, size, stride), placements(features.width, size, stride)
    else:
        rows = list(range(0, features.height - size + 1, stride))
        cols = list(range(0, features.width - size + 1, stride))
    lab = labels.channels["label"]
    lab_ok = labels.valid("label")
    xs, ys, ms, origins = [], [], [], []
    for r in rows:
        for c in cols:
            m = lab_ok[r:r + size, c:c + size]
            if not m.any():
                continue
            xs.append(to_tensor(features, channels, r, c, size, size))
            ys.append(np.where(m, lab[r:r + size, c:c + size], 0.0))
            ms.append(m)
            origins.append((r, c))
    if not xs:
        return TileSet(np.zeros((0, size, size, len(channels))), np.zeros((0, size, size)),
                       np.zeros((0, size, size), bool), [])
    return TileSet(np.stack(xs), np.stack(ys), np.stack(ms), origins)


@dataclass
class UNetConfig:
    k: int = 3
    c0: int = 16
    epochs: int = 50
    patience: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    gamma_f: float = 2.0
    alpha_f: float = 0.25
    metric: str = "f1"
    seed: int = 0


def evaluate_tiles(model: UNet, tiles: TileSet, batch_size: int = 4) -> np.ndarray:
    probs = []
    for lo in range(0, len(tiles), batch_size):
        logits = unet_forward(model, tiles.tensors[lo:lo + batch_size])
        probs.append(np.exp(-np.logaddexp(0.0, -logits[..., 0])))
    return np.concatenate(probs) if probs else np.zeros((0,) + tiles.labels.shape[1:])


def _score(probs, tiles: TileSet, metric: str) -> float:
    m = tiles.masks
    c = metrics.confusion_arrays(probs[m], tiles.labels[m])
    s = metrics.scores(c)
    return s["f1"] if metric == "f1" else s["accuracy"]


def _canonical(tiles: TileSet) -> TileSet:
    # training must not depend on the order tiles were supplied in
    keys = [hashlib.sha1(tiles.tensors[i].tobytes() + tiles.labels[i].tobytes()).hexdigest()
            for i in range(len(tiles))]
    order = sorted(range(len(tiles)), key=lambda i: keys[i])
    origins = [tiles.origins[i] for i in order] if tiles.origins else []
    return TileSet(tiles.tensors[order], tiles.labels[order], tiles.masks[order], origins)


def train_unet(train: TileSet, valid: TileSet, cfg: UNetConfig | None = None, model: UNet | None = None,
               history: list | None = None) -> UNet:
    """Minimise focal loss on masked cells; keep the best validation snapshot.

    Training stops after ``patience`` epochs without validation improvement
    (``patience=0`` stops after the first epoch) or at ``epochs``.
    """
    cfg = cfg or UNetConfig()
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("training and validation tile sets must be non-empty")
    if model is None:
        model = UNet(train.tensors.shape[-1], cfg.k, cfg.c0, cfg.seed)
    log.info("U-Net k=%d c0=%d: %d parameters", cfg.k, cfg.c0, model.num_parameters())
    train = _canonical(train)
    params = model.parameters()
    state = OptimState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    best, best_state, stale = -np.inf, model.state(), 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        order = rng.permutation(len(train))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[lo:lo + cfg.batch_size])
            mask = train.masks[idx]
            if not mask.any():
                continue
            model.zero_grad()
            logits = model(Tensor(train.tensors[idx]), "train")
            loss = ops.focal_loss(logits, train.labels[idx][..., None], mask[..., None], cfg.gamma_f, cfg.alpha_f)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"U-Net loss became {loss.item()} in epoch {epoch}")
            loss.backward()
            optimizer_step(params, {k: p.grad for k, p in params.items()}, state)
            losses.append(loss.item())
        score = _score(evaluate_tiles(model, valid, cfg.batch_size), valid, cfg.metric)
        log.info("epoch %d loss %.5f valid %s %.4f (%.1fs)", epoch, np.mean(losses), cfg.metric, score,
                 time.time() - t0)
        if history is not None:
            history.append({"epoch": epoch, "loss": float(np.mean(losses)), cfg.metric: score})
        if score > best:
            best, best_state, stale = score, model.state(), 0
        else:
            stale += 1
        if stale >= cfg.patience:
            break
    model.load_state(best_state)
    model.best_score = best
    return model


def config_dict(cfg: UNetConfig) -> dict:
    return asdict(cfg)
