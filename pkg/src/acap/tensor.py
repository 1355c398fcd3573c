"""Reverse-mode autodiff over float64 numpy arrays.

Every value flowing through the model is a :class:`Tensor`.  Operations record
their parents and a closure mapping the output gradient to parent gradients;
:meth:`Tensor.backward` walks the graph in reverse topological order and then
frees it, so a second backward over the same graph raises.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    pass


class GraphFreedError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
        for i in items
    )


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._freed = False

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``grad`` and free the graph."""
        if self._freed:
            raise GraphFreedError("backward through a graph that has already been freed")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward without an explicit grad needs a scalar")
            grad = np.ones_like(self.data)

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

        for node in topo:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis: int, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        ),
    )


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _result(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def activation(a: Tensor, kind: str = "relu") -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    raise ValueError(f"unknown activation {kind!r}")


# -- reductions and shape ops ----------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // max(out.size, 1)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(out, (a,), backward)


def tmax(a: Tensor, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal element."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        z = np.zeros(shape)
        np.put_along_axis(z, idx, g, axis=axis)
        return (z,)

    return _result(out if keepdims else np.squeeze(out, axis), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(idx)

    def backward(g):
        z = np.zeros(shape)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


# -- normalisation and probability --------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    y = x - np.log(np.exp(x).sum(axis=axis, keepdims=True))
    return _result(y, (a,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, targets, ignore_id: Optional[int] = None,
                  reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer targets under softmax(logits).

    ``logits`` is (..., vocab); positions whose target equals ``ignore_id``
    contribute nothing.  ``reduction`` is "mean" over the counted positions or
    "sum".  No label smoothing is applied.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    targets = np.asarray(targets)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    valid = np.ones_like(t, dtype=bool) if ignore_id is None else t != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise ValueError("empty loss: every target position is ignored")
    tv = np.where(valid, t, 0)
    if np.any((tv < 0) | (tv >= v)):
        raise ValueError("target id out of vocabulary range")
    x = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(x).sum(axis=1, keepdims=True))
    logp = x - logz
    rows = np.arange(len(t))
    nll = -logp[rows, tv] * valid
    scale = 1.0 / count if reduction == "mean" else 1.0

    def backward(g):
        d = np.exp(logp)
        d[rows, tv] -= 1.0
        d *= (valid * (g * scale))[:, None]
        return (d.reshape(logits.shape),)

    return _result(np.asarray(nll.sum() * scale), (logits,), backward)


# -- convolution, pooling, batch norm -------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad, ho: int, wo: int) -> np.ndarray:
    """(N, C, H, W) -> (C*kh*kw, N*ho*wo) patch matrix."""
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # runs along wo stay contiguous in the copy
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) or (C, H, W) input with (O, C, kh, kw) kernels."""
    if pad not in (0, 1):
        raise ShapeError("pad must be 0 or 1")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty ({ho}x{wo})")
    cols = _im2col(x.data, kh, kw, stride, pad, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = np.ascontiguousarray((wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    xshape = x.shape

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                # full correlation of the output grad with the flipped kernel
                wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gcols = _im2col(g, kh, kw, 1, (kh - 1 - pad, kw - 1 - pad), h, wd)
                gx = (wf @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
            else:
                dcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
                dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                            dcols[:, i, j].transpose(1, 0, 2, 3)
                        )
                gx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
            gx = np.ascontiguousarray(gx).reshape(xshape)
        return gx, gw

    res = _result(out, (x, w), backward)
    return reshape(res, res.shape[1:]) if squeeze else res


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling on the last two axes (floor on odd sizes)."""
    *lead, h, w = x.shape
    h2, w2 = h // k, w // k
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"avg_pool2d would empty a {h}x{w} map")
    xd = x.data[..., : h2 * k, : w2 * k].reshape(*lead, h2, k, w2, k)
    shape = x.shape

    def backward(g):
        z = np.zeros(shape)
        z[..., : h2 * k, : w2 * k] = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
        return (z,)

    return _result(xd.mean(axis=(-3, -1)), (x,), backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5, mask: Optional[np.ndarray] = None) -> Tensor:
    """Per-channel batch norm on (N, C, H, W).

    In training mode statistics come from the batch (restricted to positions
    where ``mask`` is 1, if given) and the running buffers are updated in place
    with ``momentum``.  In eval mode the running buffers are used.
    """
    n_, c, h, w = x.shape
    axes = (0, 2, 3)
    xd = x.data
    if training:
        wts = np.ones((n_, 1, h, w)) if mask is None else np.broadcast_to(mask, (n_, 1, h, w))
        cnt = float(wts.sum())
        if cnt < 1:
            raise ValueError("batchnorm2d needs at least one unmasked position")
        mu = (xd * wts).sum(axis=axes) / cnt
        xc = xd - mu[None, :, None, None]
        var = (xc * xc * wts).sum(axis=axes) / cnt
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * cnt / (cnt - 1.0) if cnt > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
        xc = xd - mu[None, :, None, None]
    inv = (1.0 / np.sqrt(var + eps))[None, :, None, None]
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]

    def backward(g):
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = inv * (dxhat - wts / cnt * (s1 + xhat * s2))
        else:
            dx = dxhat * inv
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(xhat * gd + beta.data[None, :, None, None], (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)
