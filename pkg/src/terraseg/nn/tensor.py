"""A small reverse-mode autodiff tensor over numpy float64 arrays.

Images use NHWC layout. Each op records its parents and a closure that
maps the output gradient to parent gradients; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- graph plumbing -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor with no recorded forward computation")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64).reshape(self.data.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_t(other)))

    def __rsub__(self, other):
        return add(_t(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return Tensor._make(a.data * b.data, (a, b),
                        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def power(a, p: float) -> Tensor:
    a = _t(a)
    return Tensor._make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    pos = a.data > 0
    return Tensor._make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tabs(a) -> Tensor:
    s = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * s,))


def clamp_min(a, lo: float) -> Tensor:
    keep = a.data > lo
    return Tensor._make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


# -- reductions / shape ---------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a, idx) -> Tensor:
    """Basic or fancy indexing; the adjoint scatter-adds repeated indices."""
    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(a.data[idx], (a,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                        lambda g: tuple(np.split(g, cuts, axis=axis)))


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return Tensor._make(a.data @ b.data, (a, b),
                        lambda g: (g @ b.data.T, a.data.T @ g))


# -- image ops --------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 correlation. ``w`` is (k, k, Cin, Cout), k in {1, 3}."""
    k, _, cin, cout = w.shape
    n, h, wd, c = x.shape
    if c != cin:
        raise ValueError(f"conv expects {cin} input channels, got {c}")
    if k == 1:
        cols = x.data.reshape(-1, cin)
    elif k == 3:
        xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.empty((n, h, wd, 3, 3, cin))
        for i in range(3):
            for j in range(3):
                cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + wd, :]
        cols = cols.reshape(-1, 9 * cin)
    else:
        raise ValueError("only 1x1 and 3x3 kernels are supported")
    wm = w.data.reshape(-1, cout)
    out = cols @ wm
    if b is not None:
        out += b.data
    out = out.reshape(n, h, wd, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = g2 @ wm.T
            if k == 1:
                gx = gc.reshape(x.shape)
            else:
                gc = gc.reshape(n, h, wd, 3, 3, cin)
                gp = np.zeros((n, h + 2, wd + 2, cin))
                for i in range(3):
                    for j in range(3):
                        gp[:, i:i + h, j:j + wd, :] += gc[:, :, :, i, j, :]
                gx = gp[:, 1:-1, 1:-1, :]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, back)


def maxpool2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gb,)

    return Tensor._make(out, (x,), back)


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel bilinear doubling; edges clamp
    a = np.moveaxis(a, axis, 0)
    prev = np.concatenate([a[:1], a[:-1]], axis=0)
    nxt = np.concatenate([a[1:], a[-1:]], axis=0)
    out = np.empty((2 * a.shape[0],) + a.shape[1:])
    out[0::2] = 0.75 * a + 0.25 * prev
    out[1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    ge, go = g[0::2], g[1::2]
    out = 0.75 * (ge + go)
    # prev[i] = a[i-1] (prev[0] = a[0]); nxt[i] = a[i+1] (nxt[-1] = a[-1])
    out[:-1] += 0.25 * ge[1:]
    out[0] += 0.25 * ge[0]
    out[1:] += 0.25 * go[:-1]
    out[-1] += 0.25 * go[-1]
    return np.moveaxis(out, 0, axis)


def upsample2(x: Tensor) -> Tensor:
    out = _up_axis(_up_axis(x.data, 1), 2)
    return Tensor._make(out, (x,), lambda g: (_up_axis_adjoint(_up_axis_adjoint(g, 2), 1),))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over all leading axes. Updates running stats in place when training."""
    axes = tuple(range(x.data.ndim - 1))
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.shape[-1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if train:
                m = x.data.size // x.shape[-1]
                gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gbeta

    return Tensor._make(out, (x, gamma, beta), back)


# -- losses -----------------------------------------------------------------

def focal_loss(logits: Tensor, targets, mask=None, gamma_f: float = 2.0, alpha_f: float = 0.25) -> Tensor:
    """Mean over unmasked cells of -a_t (1 - p_t)^gamma ln p_t, p = sigmoid(logit)."""
    z = logits.data
    t = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    m = np.ones(z.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(z.shape)
    count = int(m.sum())
    if count == 0:
        raise ValueError("focal_loss: mask selects no cells")
    sgn = np.where(t > 0.5, 1.0, -1.0)
    zt = sgn * z
    log_pt = -np.logaddexp(0.0, -zt)
    pt = np.exp(log_pt)
    q = 1.0 - pt  # = sigmoid(-zt)
    q = np.where(q < 0, 0.0, q)
    at = np.where(t > 0.5, alpha_f, 1.0 - alpha_f)
    loss = -at * q ** gamma_f * log_pt
    total = float((loss * m).sum()) / count

    def back(g):
        # d/dz_t of -a (1-p)^gamma ln p, with dp/dz_t = p (1 - p)
        term = q ** gamma_f * (gamma_f * pt * log_pt - q)
        dzt = at * term
        return (g * m * sgn * dzt / count,)

    return Tensor._make(np.asarray(total), (logits,), back)


def bce_with_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Elementwise binary cross-entropy on logits, optionally weighted (no reduction)."""
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    wts = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = (np.logaddexp(0.0, z) - t * z) * wts
    return Tensor._make(loss, (logits,), lambda g: (g * (_sigmoid(z) - t) * wts,))
