"""Reconstruction latent-space similarity regularisation.

The decoder's last-layer embeddings are mapped back into the CNN feature space
and averaged over the caption; the CNN features are locally max-pooled over
time and then averaged.  The distance between the two vectors is an auxiliary
loss added to the captioning cross entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

SIMILARITIES = ("l1", "l2")


@dataclass
class RlssrConfig:
    similarity: str = "l1"
    local_max_kernel: int = 3
    local_max_stride: int = 2
    stop_grad_audio: bool = False

    def __post_init__(self):
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}, got {self.similarity!r}")
        if self.local_max_kernel < 1 or self.local_max_stride < 1:
            raise ValueError("local max kernel and stride must be >= 1")


@dataclass
class RlssrTensors:
    A_pooled: Tensor
    A_rec: Tensor
    loss: Tensor


@dataclass
class LossBundle:
    L_ce: Tensor
    L_rlssr: Tensor
    alpha: float
    beta: float
    L_total: Tensor


def window_starts(length: int, kernel: int, stride: int) -> np.ndarray:
    """Start offsets of the local-max windows over ``length`` valid steps.

    A sequence shorter than the kernel gets one truncated window.
    """
    if length < 1:
        raise ValueError("no valid time steps to pool")
    if length <= kernel:
        return np.array([0])
    return np.arange(0, length - kernel + 1, stride)


def pool_audio(A: Tensor, time_mask: Optional[np.ndarray] = None, kernel: int = 3,
               stride: int = 2) -> Tensor:
    """(batch, time, d) or (time, d) CNN features -> (batch, d) or (d,) pooled vector.

    Local max over time (valid steps only), then the mean of the window maxima.
    """
    single = A.ndim == 2
    if single:
        A = A.reshape(1, *A.shape)
        if time_mask is not None:
            time_mask = np.asarray(time_mask)[None, :]
    n, t, _ = A.shape
    lengths = np.full(n, t) if time_mask is None else np.asarray(time_mask).sum(axis=1).astype(int)
    rows = []
    for b in range(n):
        length = int(lengths[b])
        if time_mask is not None and not np.all(time_mask[b, :length]):
            raise ValueError("time_mask must be a prefix mask")
        starts = window_starts(length, kernel, stride)
        width = min(kernel, length)
        idx = starts[:, None] + np.arange(width)[None, :]
        win = A[b][idx]  # (n_win, width, d)
        rows.append(win.max(axis=1).mean(axis=0, keepdims=True))
    out = T.concat(rows, axis=0)
    return out.reshape(out.shape[1]) if single else out


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of (batch, seq, d) restricted to mask==1 positions."""
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("no valid positions to average")
    w = (m / counts)[..., None]
    return (x * w).sum(axis=-2)


def reconstruct(T_emb: Tensor, token_mask: np.ndarray, ffn: Callable[[Tensor], Tensor]) -> Tensor:
    """Apply the affine bridge per position, then average over unpadded positions."""
    single = T_emb.ndim == 2
    if single:
        T_emb = T_emb.reshape(1, *T_emb.shape)
        token_mask = np.asarray(token_mask)[None, :]
    out = masked_mean(ffn(T_emb), token_mask)
    return out.reshape(out.shape[1]) if single else out


def rlssr_loss(A_rec: Tensor, A_pooled: Tensor, similarity: str = "l1",
               stop_grad_audio: bool = False, reduction: str = "mean") -> Tensor:
    """Mean absolute (l1) or squared (l2) difference.

    With batched (batch, d) inputs, ``reduction="mean"`` averages over every
    element and ``"sum"`` sums the per-item means.
    """
    if A_rec.shape != A_pooled.shape:
        raise ValueError(f"shape mismatch {A_rec.shape} vs {A_pooled.shape}")
    target = A_pooled.detach() if stop_grad_audio else A_pooled
    diff = A_rec - target
    if similarity == "l1":
        per = diff.abs()
    elif similarity == "l2":
        per = diff * diff
    else:
        raise ValueError(f"unknown similarity {similarity!r}")
    if reduction == "mean":
        return per.mean()
    if reduction == "sum":
        return per.mean(axis=-1).sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def rlssr_forward(A: Tensor, time_mask: np.ndarray, T_emb: Tensor, token_mask: np.ndarray,
                  ffn: Callable[[Tensor], Tensor], cfg: RlssrConfig,
                  reduction: str = "mean") -> RlssrTensors:
    a_pooled = pool_audio(A, time_mask, cfg.local_max_kernel, cfg.local_max_stride)
    a_rec = reconstruct(T_emb, token_mask, ffn)
    loss = rlssr_loss(a_rec, a_pooled, cfg.similarity, cfg.stop_grad_audio, reduction)
    return RlssrTensors(A_pooled=a_pooled, A_rec=a_rec, loss=loss)


def combine_losses(L_ce, L_rlssr, alpha: float = 1.0, beta: float = 1.0) -> LossBundle:
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    L_ce, L_rlssr = T.as_tensor(L_ce), T.as_tensor(L_rlssr)
    return LossBundle(L_ce=L_ce, L_rlssr=L_rlssr, alpha=alpha, beta=beta,
                      L_total=L_ce * alpha + L_rlssr * beta)
