"""CNN10 + transformer encoder, transformer decoder, and transfer-learning loads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    causal_bias,
    key_padding_bias,
    sinusoidal_positions,
)
from .tensor import Tensor

POOL_FACTOR = 16  # four 2x2 poolings


@dataclass
class EncoderConfig:
    cnn_channels: Sequence[int] = (64, 128, 256, 512)
    enc_layers: int = 2
    d_model: int = 192
    n_heads: int = 4
    ffn_dim: Optional[int] = None
    dropout: float = 0.1
    use_transformer_encoder: bool = True

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        if len(self.cnn_channels) != 4:
            raise ValueError("CNN10 has exactly 4 conv blocks")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model

    @property
    def d_audio(self) -> int:
        return self.cnn_channels[-1]


@dataclass
class DecoderConfig:
    vocab_size: int
    dec_layers: int = 2
    d_model: int = 192
    n_heads: int = 4
    ffn_dim: Optional[int] = None
    dropout: float = 0.1
    max_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model


@dataclass
class EncoderOutput:
    A: Tensor  # (batch, time', d_audio) CNN features after frequency averaging
    E: Tensor  # (batch, time', d_model) memory for cross-attention
    time_mask: np.ndarray  # (batch, time') bool
    lengths: np.ndarray


@dataclass
class DecoderOutput:
    logits: Tensor  # (batch, seq, vocab)
    T: Tensor  # (batch, seq, d_model) last-layer embeddings


def pooled_lengths(lengths: np.ndarray, n_pool: int = 4) -> np.ndarray:
    out = np.asarray(lengths, dtype=np.int64)
    for _ in range(n_pool):
        out = out // 2
    return out


class ConvBlock(Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out)
        self.bn2 = BatchNorm2d(c_out)

    def forward(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        # mask: (N, 1, H, 1) with zeros on padded frames, or None
        if mask is not None:
            x = x * mask
        for conv, bn in ((self.conv1, self.bn1), (self.conv2, self.bn2)):
            x = T.relu(bn(conv(x), mask))
            if mask is not None:
                x = x * mask
        return T.avg_pool2d(x, 2)


class Cnn10(Module):
    """Four [conv3x3-BN-ReLU]x2 + 2x2 avg-pool blocks, then a mean over frequency."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        c_in = 1
        for i, c in enumerate(channels, start=1):
            setattr(self, f"block{i}", ConvBlock(c_in, c))
            c_in = c

    @property
    def blocks(self) -> List[ConvBlock]:
        return [self.block1, self.block2, self.block3, self.block4]

    def forward(self, specs, lengths: Optional[np.ndarray] = None):
        x = specs if isinstance(specs, Tensor) else Tensor(np.asarray(specs, dtype=np.float64))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        n, t, _ = x.shape
        if t < POOL_FACTOR:
            raise ValueError(f"{t} frames is fewer than {POOL_FACTOR}: CNN10 would pool it away")
        lengths = np.full(n, t) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if np.any(lengths < POOL_FACTOR):
            raise ValueError(f"every clip needs at least {POOL_FACTOR} frames")
        padded = bool(np.any(lengths < t))
        if padded:
            keep = (np.arange(t)[None, :] < lengths[:, None]).astype(np.float64)
            x = x * keep[:, :, None]
        x = x.reshape(n, 1, *x.shape[1:])
        cur = lengths.copy()
        for block in self.blocks:
            mask = None
            if padded:
                mask = (np.arange(x.shape[2])[None, :] < cur[:, None]).astype(np.float64)[:, None, :, None]
            x = block(x, mask)
            cur = cur // 2
        # (N, C, t', F') -> mean over F' -> (N, t', C)
        a = x.mean(axis=3).transpose(0, 2, 1)
        return a, cur


class EncoderLayer(Module):
    """Post-norm self-attention + feed-forward layer."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, p: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff)
        self.norm2 = LayerNorm(d_model)
        self.drop1 = Dropout(p)
        self.drop2 = Dropout(p)

    def forward(self, x: Tensor, bias: np.ndarray) -> Tensor:
        x = self.norm1(x + self.drop1(self.self_attn(x, x, bias)))
        return self.norm2(x + self.drop2(self.ffn(x)))


class AudioEncoder(Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.cnn = Cnn10(cfg.cnn_channels)
        self.proj = Linear(cfg.d_audio, cfg.d_model)
        self.drop = Dropout(cfg.dropout)
        self.layers = [
            EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.dropout)
            for _ in range(cfg.enc_layers if cfg.use_transformer_encoder else 0)
        ]

    def forward(self, specs, lengths: Optional[np.ndarray] = None) -> EncoderOutput:
        a, out_len = self.cnn(specs, lengths)
        n, t, _ = a.shape
        mask = np.arange(t)[None, :] < out_len[:, None]
        x = self.drop(self.proj(a) + sinusoidal_positions(t, self.cfg.d_model))
        bias = key_padding_bias(mask)
        for layer in self.layers:
            x = layer(x, bias)
        return EncoderOutput(A=a, E=x, time_mask=mask, lengths=out_len)


class DecoderLayer(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, p: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff)
        self.norm3 = LayerNorm(d_model)
        self.drop1 = Dropout(p)
        self.drop2 = Dropout(p)
        self.drop3 = Dropout(p)

    def forward(self, x: Tensor, mem: Tensor, self_bias: np.ndarray, mem_bias: np.ndarray) -> Tensor:
        x = self.norm1(x + self.drop1(self.self_attn(x, x, self_bias)))
        x = self.norm2(x + self.drop2(self.cross_attn(x, mem, mem_bias)))
        return self.norm3(x + self.drop3(self.ffn(x)))


class CaptionDecoder(Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = Parameter((cfg.vocab_size, cfg.d_model), ("trunc_normal", 0.02))
        self.drop = Dropout(cfg.dropout)
        self.layers = [
            DecoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.dropout)
            for _ in range(cfg.dec_layers)
        ]
        self.out = Linear(cfg.d_model, cfg.vocab_size)

    def forward(self, tokens, mem: Tensor, mem_mask: np.ndarray) -> DecoderOutput:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        n, length = tokens.shape
        if np.any(tokens < 0) or np.any(tokens >= self.cfg.vocab_size):
            raise ValueError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        if length > self.cfg.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.cfg.max_len}")
        d = self.cfg.d_model
        x = self.embed[tokens] * np.sqrt(d) + sinusoidal_positions(length, d)
        x = self.drop(x)
        self_bias = causal_bias(length)
        mem_bias = key_padding_bias(mem_mask)
        for layer in self.layers:
            x = layer(x, mem, self_bias, mem_bias)
        return DecoderOutput(logits=self.out(x), T=x)


class RlssrHead(Module):
    """The small affine bridge from decoder embeddings back to the CNN latent space."""

    def __init__(self, d_model: int, d_audio: int):
        super().__init__()
        self.ffn = Linear(d_model, d_audio)

    def forward(self, x: Tensor) -> Tensor:
        return self.ffn(x)


class CaptionModel(Module):
    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, with_rlssr: bool = False):
        super().__init__()
        if enc_cfg.d_model != dec_cfg.d_model:
            raise ValueError("encoder and decoder d_model differ")
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.encoder = AudioEncoder(enc_cfg)
        self.decoder = CaptionDecoder(dec_cfg)
        self.rlssr = RlssrHead(dec_cfg.d_model, enc_cfg.d_audio) if with_rlssr else None

    def encode(self, specs, lengths: Optional[np.ndarray] = None) -> EncoderOutput:
        return self.encoder(specs, lengths)

    def decode(self, tokens, enc: EncoderOutput) -> DecoderOutput:
        return self.decoder(tokens, enc.E, enc.time_mask)

    def forward(self, specs, lengths, tokens):
        enc = self.encode(specs, lengths)
        return enc, self.decode(tokens, enc)


def build_model(enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, with_rlssr: bool = False,
                seed: int = 0) -> CaptionModel:
    model = CaptionModel(enc_cfg, dec_cfg, with_rlssr)
    model.reset_parameters(seed)
    model.seed_dropout(seed)
    return model


def count_parameters(model: Module) -> int:
    return sum(p.size for p in model.parameters())


@dataclass
class LoadReport:
    loaded: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)
    ignored: List[str] = field(default_factory=list)


def load_pretrained(model: Module, checkpoint: Dict[str, np.ndarray], prefix_filter: str = "encoder.cnn.",
                    freeze: bool = False) -> LoadReport:
    """Overwrite the parameters and buffers whose names start with ``prefix_filter``.

    Everything else keeps its current (initial) values.  With ``freeze`` the
    loaded parameters stop receiving updates, and batch-norm layers whose
    parameters are frozen normalise with their loaded running statistics.
    """
    report = LoadReport()
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name in checkpoint:
        if not name.startswith(prefix_filter):
            report.ignored.append(name)
    for name in list(params) + list(buffers):
        if not name.startswith(prefix_filter):
            continue
        if name not in checkpoint:
            report.missing.append(name)
            continue
        src = np.asarray(checkpoint[name], dtype=np.float64)
        if name in params:
            p = params[name]
            if p.shape != src.shape:
                raise ValueError(f"shape mismatch loading {name}: model {p.shape}, checkpoint {src.shape}")
            p.data = src.copy()
            if freeze:
                p.freeze()
        else:
            buf = buffers[name]
            if buf.shape != src.shape:
                raise ValueError(f"shape mismatch loading {name}: model {buf.shape}, checkpoint {src.shape}")
            buf[...] = src
        report.loaded.append(name)
    return report
