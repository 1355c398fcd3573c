"""Parameters, modules and the standard layers the captioner is built from."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor with a dotted name and a freeze flag.

    ``init`` describes how :meth:`Module.reset_parameters` fills the values.
    Frozen parameters do not require grad and are skipped by the optimizer.
    """

    def __init__(self, shape, init: tuple = ("zeros",)):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.init = init
        self.name = ""
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True


def _draw(init: tuple, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    kind = init[0]
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "normal":
        return rng.normal(0.0, init[1], size=shape)
    if kind == "trunc_normal":
        std = init[1]
        out = rng.normal(0.0, std, size=shape)
        bad = np.abs(out) > 2 * std
        while bad.any():
            out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > 2 * std
        return out
    if kind == "xavier_uniform":
        fan_in, fan_out = init[1], init[2]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    raise ValueError(f"unknown init {kind!r}")


class Module:
    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self._children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield (f"{prefix}.{key}" if prefix else key), val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}.{key}" if prefix else key)

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for key, buf in mod._buffers.items():
                yield (f"{mod_name}.{key}" if mod_name else key), buf

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def reset_parameters(self, seed: int) -> None:
        """Draw every parameter from its own named stream and reset buffers."""
        for name, p in self.named_parameters():
            p.name = name
            p.data = _draw(p.init, p.shape, stream(seed, "init/" + name))
        for _, m in self.named_modules():
            if isinstance(m, BatchNorm2d):
                m._buffers["running_mean"][:] = 0.0
                m._buffers["running_var"][:] = 1.0

    def seed_dropout(self, seed: int) -> None:
        for name, m in self.named_modules():
            if isinstance(m, Dropout):
                m.rng = stream(seed, "dropout/" + name)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        if strict:
            missing = sorted((set(params) | set(buffers)) - set(state))
            extra = sorted(set(state) - set(params) - set(buffers))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, arr in state.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                continue
            if target.shape != np.shape(arr):
                raise ValueError(f"shape mismatch for {name}: {target.shape} vs {np.shape(arr)}")
            if name in params:
                params[name].data = np.array(arr, dtype=np.float64)
            else:
                target[...] = arr


class Linear(Module):
    """y = x W + b with W stored (in, out)."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, std: float = 0.02):
        super().__init__()
        self.weight = Parameter((d_in, d_out), ("trunc_normal", std))
        self.bias = Parameter((d_out,), ("zeros",)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, pad: int = 1):
        super().__init__()
        self.pad = pad
        self.weight = Parameter((c_out, c_in, k, k), ("xavier_uniform", c_in * k * k, c_out * k * k))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, 1, self.pad)


class BatchNorm2d(Module):
    # frozen affine params also pin the statistics: eval-mode normalisation
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter((c,), ("ones",))
        self.bias = Parameter((c,), ("zeros",))
        self._buffers = {"running_mean": np.zeros(c), "running_var": np.ones(c)}

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        training = self.training and not self.weight.frozen
        return T.batchnorm2d(x, self.weight, self.bias, self._buffers["running_mean"],
                             self._buffers["running_var"], training, self.momentum, self.eps, mask)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter((d,), ("ones",))
        self.bias = Parameter((d,), ("zeros",))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.rng: Optional[np.random.Generator] = None

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p <= 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("dropout stream not seeded; call seed_dropout()")
        return T.dropout(x, self.p, self.rng, True)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, act: str = "relu"):
        super().__init__()
        self.act = act
        self.fc1 = Linear(d_model, d_ff)
        self.fc2 = Linear(d_ff, d_model)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.activation(self.fc1(x), self.act))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``n_heads`` heads.

    ``bias`` is an additive (non-trainable) array broadcastable to
    (batch, heads, q_len, k_len); masked keys carry a large negative value.
    The last attention weights are kept in ``last_weights`` for inspection.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = Linear(d_model, d_model)
        self.k = Linear(d_model, d_model)
        self.v = Linear(d_model, d_model)
        self.o = Linear(d_model, d_model)
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def forward(self, xq: Tensor, xkv: Tensor, bias: Optional[np.ndarray] = None) -> Tensor:
        b, nq, d = xq.shape
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.d_head))
        if bias is not None:
            scores = scores + bias
        attn = T.softmax(scores, axis=-1)
        self.last_weights = attn.data
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, nq, d)
        return self.o(ctx)


NEG_INF = -1e9


def key_padding_bias(valid: np.ndarray) -> np.ndarray:
    """(batch, k_len) bool validity -> additive bias (batch, 1, 1, k_len)."""
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def causal_bias(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe
