"""Layer objects built on the autodiff ops.

A layer owns its parameters (leaf tensors) and, for batch norm, running
statistics. ``describe()`` returns a JSON-able architecture entry used by
checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("dense", "conv3x3", "conv1x1", "batchnorm", "relu", "tanh", "maxpool2", "bilinear_up2", "concat")


class Layer:
    kind = ""

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def describe(self) -> dict:
        return {"kind": self.kind}

    def __call__(self, x, mode: str = "train"):
        return self.forward(x, mode)

    def forward(self, x, mode: str = "train"):
        raise NotImplementedError


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, scale: float = 1.0):
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.weight = Tensor(he_init(rng, (n_in, n_out), n_in) * scale, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def describe(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}

    def forward(self, x, mode="train"):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"dense expects {self.n_in} inputs, got {x.shape[-1]}")
        return x @ self.weight + self.bias


class Conv(Layer):
    def __init__(self, n_in: int, n_out: int, k: int, rng: np.random.Generator | None = None, bias: bool = True):
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out, self.k = n_in, n_out, k
        self.kind = f"conv{k}x{k}"
        self.weight = Tensor(he_init(rng, (k, k, n_in, n_out), k * k * n_in), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def describe(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out, "bias": self.bias is not None}

    def forward(self, x, mode="train"):
        if x.data.ndim != 4:
            raise ValueError(f"conv expects NHWC input, got shape {x.shape}")
        return T.conv2d(x, self.weight, self.bias)


def Conv3x3(n_in, n_out, rng=None, bias=True):
    return Conv(n_in, n_out, 3, rng, bias)


def Conv1x1(n_in, n_out, rng=None, bias=True):
    return Conv(n_in, n_out, 1, rng, bias)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def describe(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x, mode="train"):
        if x.shape[-1] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {x.shape[-1]}")
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           train=(mode == "train"), momentum=self.momentum, eps=self.eps)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode="train"):
        return T.relu(x)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, mode="train"):
        return T.tanh(x)


class MaxPool2(Layer):
    kind = "maxpool2"

    def forward(self, x, mode="train"):
        return T.maxpool2(x)


class BilinearUp2(Layer):
    kind = "bilinear_up2"

    def forward(self, x, mode="train"):
        return T.upsample2(x)


class Concat(Layer):
    """Channel concatenation; ``forward`` takes a sequence of tensors."""

    kind = "concat"

    def forward(self, xs, mode="train"):
        return T.concat(list(xs), axis=-1)


def forward(layer: Layer, x, mode: str = "train"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    return layer(x, mode)


class Module:
    """Container with ordered, dotted parameter names."""

    def children(self) -> list[tuple[str, object]]:
        return [(k, v) for k, v in vars(self).items() if isinstance(v, (Layer, Module, list))]

    def _walk(self, prefix=""):
        for name, child in self.children():
            items = enumerate(child) if isinstance(child, list) else [(None, child)]
            for i, c in items:
                p = f"{prefix}{name}." if i is None else f"{prefix}{name}.{i}."
                if isinstance(c, Module):
                    yield from c._walk(p)
                elif isinstance(c, Layer):
                    yield p, c

    def layers(self):
        return list(self._walk())

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for p, layer in self._walk():
            for k, v in layer.params().items():
                out[p + k] = v
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for p, layer in self._walk():
            for k, v in layer.buffers().items():
                out[p + k] = v
        return out

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        s = {k: v.data.copy() for k, v in self.parameters().items()}
        s.update({k: v.copy() for k, v in self.buffers().items()})
        return s

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.parameters().items():
            v.data = np.array(state[k], dtype=np.float64).reshape(v.data.shape)
        for k, v in self.buffers().items():
            v[...] = state[k]
