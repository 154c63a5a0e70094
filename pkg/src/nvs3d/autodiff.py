"""Minimal reverse-mode autodiff over dense numpy arrays.

A Tensor wraps an ndarray; ops record a backward closure and parent links.
backward() on a scalar walks the tape once in reverse topological order.
Leaf gradients accumulate until explicitly zeroed, so the same parameters
can participate in the 11 candidate forward passes of one training step.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatchError, MissingGradError, NonScalarLossError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(
            data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents)
        self.grad = None
        if self.requires_grad and parents:
            self._parents = tuple(p for p in parents if p.requires_grad)
            self._backward = backward_fn
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise NonScalarLossError(
                f"backward() needs a scalar, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # free non-leaf grads; leaves keep theirs

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise / structural ops ---------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(-g)

    return Tensor(-a.data, parents=(a,), backward_fn=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionMismatchError(
            f"matmul: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor(out_data, parents=(a, b), backward_fn=backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accum(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), parents=(a,), backward_fn=backward)


def take(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return Tensor(out_data, parents=(a,), backward_fn=backward)


def stack(tensors, axis=0) -> Tensor:
    ts = list(tensors)
    out_data = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        pieces = np.moveaxis(g, axis, 0)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                t._accum(piece)

    return Tensor(out_data, parents=tuple(ts), backward_fn=backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).copy()
                     if np.ndim(g) else np.full_like(a.data, g))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accum(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True))

    return Tensor(out_data, parents=(a,), backward_fn=backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, _wrap(np.asarray(1.0 / n, dtype=a.dtype)))


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return Tensor(out_data, parents=(a,), backward_fn=backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return Tensor(out_data, parents=(a,), backward_fn=backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        a._accum(g * mask)

    return Tensor(out_data, parents=(a,), backward_fn=backward)


# -- activations ---------------------------------------------------------

def elu(a: Tensor) -> Tensor:
    """elu(x) = x for x >= 0, exp(x) - 1 otherwise (alpha = 1)."""
    neg_mask = a.data < 0
    expx = np.exp(np.where(neg_mask, a.data, 0.0))
    out_data = np.where(neg_mask, expx - 1.0, a.data)

    def backward(g):
        a._accum(g * np.where(neg_mask, expx, 1.0))

    return Tensor(out_data, parents=(a,), backward_fn=backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def backward(g):
        a._accum(g * out_data * (1.0 - out_data))

    return Tensor(out_data, parents=(a,), backward_fn=backward)


def softmax(a: Tensor, axis=-1) -> Tensor:
    """Numerically stabilized softmax along `axis`."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accum(out_data * (g - dot))

    return Tensor(out_data, parents=(a,), backward_fn=backward)


# -- layers ---------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b for x [B, I], w [I, O], b [O]."""
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionMismatchError(
            f"dense: x {x.shape}, w {w.shape}, b {b.shape}")
    return add(matmul(x, w), b)


def _check_conv_shapes(x, k, spatial_ndim, ksize):
    if x.ndim != 2 + spatial_ndim or k.ndim != 2 + spatial_ndim:
        raise DimensionMismatchError(
            f"conv: x {x.shape}, kernel {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise DimensionMismatchError(
            f"conv: channel mismatch x {x.shape} vs kernel {k.shape}")
    if any(s != ksize for s in k.shape[2:]):
        raise DimensionMismatchError(f"conv: kernel must be {ksize}^n")


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation, padding 1. x [B,C,H,W], k [F,C,3,3]."""
    _check_conv_shapes(x, k, 2, 3)
    if stride not in (1, 2):
        raise DimensionMismatchError(f"conv2d: unsupported stride {stride}")
    b_, c, h, w = x.shape
    f = k.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b_ * ho * wo, c * 9)
    kmat = k.data.reshape(f, c * 9)
    out_data = (cols @ kmat.T).reshape(b_, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(
            b_ * ho * wo, f)
        if k.requires_grad:
            k._accum((g2.T @ cols).reshape(k.shape))
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(b_, ho, wo, c, 3, 3)
            dxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += dcols[
                            :, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accum(dxp[:, :, 1:1 + h, 1:1 + w])

    return Tensor(np.ascontiguousarray(out_data), parents=(x, k),
                  backward_fn=backward)


def conv3d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """3x3x3 cross-correlation, padding 1. x [B,C,D,H,W], k [F,C,3,3,3].

    Channel counts here are small, so the 27 kernel taps are applied as
    shifted-slice accumulations rather than one big im2col gather.
    """
    _check_conv_shapes(x, k, 3, 3)
    if stride not in (1, 2):
        raise DimensionMismatchError(f"conv3d: unsupported stride {stride}")
    b_, c, d, h, w = x.shape
    f = k.shape[0]
    # Channels-last keeps the per-tap contraction a plain matmul over the
    # trailing axis, which numpy handles without internal transposes.
    xt = np.ascontiguousarray(
        np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1))).transpose(
            0, 2, 3, 4, 1))
    do = (d - 1) // stride + 1
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    out_t = np.zeros((b_, do, ho, wo, f), dtype=x.dtype)
    kd = k.data
    for i in range(3):
        for j in range(3):
            for m in range(3):
                xs = xt[:, i:i + stride * do:stride,
                        j:j + stride * ho:stride,
                        m:m + stride * wo:stride, :]
                out_t += xs @ kd[:, :, i, j, m].T
    out_data = np.ascontiguousarray(out_t.transpose(0, 4, 1, 2, 3))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
        dxt = np.zeros_like(xt) if x.requires_grad else None
        dk = np.zeros_like(kd) if k.requires_grad else None
        for i in range(3):
            for j in range(3):
                for m in range(3):
                    sl = (slice(None),
                          slice(i, i + stride * do, stride),
                          slice(j, j + stride * ho, stride),
                          slice(m, m + stride * wo, stride), slice(None))
                    if dk is not None:
                        dk[:, :, i, j, m] = np.tensordot(
                            gt, xt[sl], axes=([0, 1, 2, 3], [0, 1, 2, 3]))
                    if dxt is not None:
                        dxt[sl] += gt @ kd[:, :, i, j, m]
        if dk is not None:
            k._accum(dk)
        if dxt is not None:
            x._accum(np.ascontiguousarray(
                dxt[:, 1:1 + d, 1:1 + h, 1:1 + w, :].transpose(0, 4, 1, 2, 3)))

    return Tensor(out_data, parents=(x, k), backward_fn=backward)


def tconv3d(x: Tensor, k: Tensor) -> Tensor:
    """Transposed 3D convolution, kernel 4, stride 2, padding 1.

    x [B,C,D,D,D], k [C,F,4,4,4] -> [B,F,2D,2D,2D].
    """
    if x.ndim != 5 or k.ndim != 5:
        raise DimensionMismatchError(f"tconv3d: x {x.shape}, kernel {k.shape}")
    if x.shape[1] != k.shape[0]:
        raise DimensionMismatchError(
            f"tconv3d: channel mismatch x {x.shape} vs kernel {k.shape}")
    if any(s != 4 for s in k.shape[2:]):
        raise DimensionMismatchError("tconv3d: kernel must be 4x4x4")
    b_, c, d, h, w = x.shape
    f = k.shape[1]
    od, oh, ow = 2 * d, 2 * h, 2 * w
    rows = np.ascontiguousarray(x.data.transpose(0, 2, 3, 4, 1)).reshape(
        b_ * d * h * w, c)
    # Kernel laid out [C, 64 taps, F] so each tap slice of the matmul result
    # is already channels-last and scatters without a transpose.
    kmat = np.ascontiguousarray(
        k.data.reshape(c, f, 64).transpose(0, 2, 1)).reshape(c, 64 * f)
    contrib = (rows @ kmat).reshape(b_, d, h, w, 4, 4, 4, f)
    yp = np.zeros((b_, od + 2, oh + 2, ow + 2, f), dtype=x.dtype)
    for i in range(4):
        for j in range(4):
            for m in range(4):
                yp[:, i:i + 2 * d:2, j:j + 2 * h:2,
                   m:m + 2 * w:2, :] += contrib[:, :, :, :, i, j, m, :]
    out_data = np.ascontiguousarray(
        yp[:, 1:1 + od, 1:1 + oh, 1:1 + ow, :].transpose(0, 4, 1, 2, 3))

    def backward(g):
        gp = np.ascontiguousarray(
            np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1))).transpose(
                0, 2, 3, 4, 1))
        gathered = np.empty((b_, d, h, w, 4, 4, 4, f), dtype=x.dtype)
        for i in range(4):
            for j in range(4):
                for m in range(4):
                    gathered[:, :, :, :, i, j, m, :] = gp[
                        :, i:i + 2 * d:2, j:j + 2 * h:2, m:m + 2 * w:2, :]
        g2 = gathered.reshape(b_ * d * h * w, 64 * f)
        if x.requires_grad:
            x._accum(np.ascontiguousarray(
                (g2 @ kmat.T).reshape(b_, d, h, w, c).transpose(
                    0, 4, 1, 2, 3)))
        if k.requires_grad:
            k._accum((rows.T @ g2).reshape(c, 64, f).transpose(
                0, 2, 1).reshape(k.shape))

    return Tensor(out_data, parents=(x, k), backward_fn=backward)


# -- optimizers -----------------------------------------------------------

class SGD:
    kind = "sgd"

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.step_count = 0

    def step(self):
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"no gradient for parameter {name}")
            p.data -= (self.lr * p.grad).astype(p.dtype, copy=False)
            p.grad = None


class Adam:
    kind = "adam"

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise MissingGradError(f"no gradient for parameter {name}")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.dtype, copy=False)
            p.grad = None


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")


# -- finite differences ----------------------------------------------------

def numeric_grad(f, tensor: Tensor, coords, h: float = 1e-5):
    """Central finite differences of scalar-valued f at selected flat coords."""
    flat = tensor.data.reshape(-1)
    out = []
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        fp = f()
        flat[c] = orig - h
        fm = f()
        flat[c] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)
