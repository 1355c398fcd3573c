"""Flat ``key = value`` run configuration covering every tunable knob.

Precedence is command-line flags > config file > defaults.  Lines starting
with ``#`` are comments; unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Tuple

from .audio import MelConfig, SpecAugmentConfig
from .decoding import BeamConfig
from .model import DecoderConfig, EncoderConfig
from .rlssr import RlssrConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # audio front end
    sample_rate: int = 44100
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 64
    center_pad: bool = True
    log_floor: float = 1e-10
    # SpecAugment (training only)
    spec_augment: bool = True
    n_time_masks: int = 2
    max_time_width_frames: int = 64
    n_freq_masks: int = 2
    max_freq_width_bins: int = 8
    fill_value: float = 0.0
    # encoder / decoder
    cnn_channels: Tuple[int, ...] = (8, 16, 32, 64)
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 192
    n_heads: int = 4
    ffn_dim: int = 0  # 0 -> 4 * d_model
    dropout: float = 0.1
    use_transformer_encoder: bool = True
    max_len: int = 64  # longest decoder input the model accepts
    # auxiliary loss
    rlssr: str = "none"
    local_max_kernel: int = 3
    local_max_stride: int = 2
    stop_grad_audio: bool = False
    alpha: float = 1.0
    beta: float = 1.0
    # training
    batch_size: int = 8
    grad_accum_steps: int = 1
    lr: float = 3e-4
    max_epochs: int = 200
    max_steps: int = 0  # 0 -> unlimited
    early_stop_patience: int = 10
    stop_at_train_ce: float = 0.0  # 0 -> off
    seed: int = 0
    min_freq: int = 1
    val_fraction: float = 0.1
    pretrained_ckpt: str = ""
    freeze_cnn: bool = False
    # decoding
    beam_size: int = 4
    beam_max_len: int = 30
    length_penalty_alpha: float = 0.0
    # locations
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.rlssr not in ("none", "l1", "l2"):
            raise ConfigError(f"rlssr must be none, l1 or l2 (got {self.rlssr!r})")
        if self.batch_size * self.grad_accum_steps < 1 or self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ConfigError("batch_size and grad_accum_steps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    # -- module views -------------------------------------------------------

    @property
    def mel(self) -> MelConfig:
        return MelConfig(self.sample_rate, self.n_fft, self.hop, self.n_mels, self.center_pad, self.log_floor)

    @property
    def specaug(self) -> SpecAugmentConfig:
        return SpecAugmentConfig(self.n_time_masks, self.max_time_width_frames, self.n_freq_masks,
                                 self.max_freq_width_bins, self.fill_value)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.cnn_channels, self.enc_layers, self.d_model, self.n_heads,
                             self.ffn_dim or None, self.dropout, self.use_transformer_encoder)

    def decoder(self, vocab_size: int) -> DecoderConfig:
        return DecoderConfig(vocab_size, self.dec_layers, self.d_model, self.n_heads,
                             self.ffn_dim or None, self.dropout, self.max_len)

    @property
    def rlssr_cfg(self) -> RlssrConfig:
        return RlssrConfig("l1" if self.rlssr == "none" else self.rlssr, self.local_max_kernel,
                           self.local_max_stride, self.stop_grad_audio)

    @property
    def beam(self) -> BeamConfig:
        return BeamConfig(self.beam_size, self.beam_max_len, self.length_penalty_alpha)

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def override(self, **values) -> "RunConfig":
        return replace(self, **coerce_all(values))


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def coerce(key: str, raw: Any) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(_DEFAULTS, key)
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None
    return text


def coerce_all(values: Dict[str, Any]) -> Dict[str, Any]:
    return {k: coerce(k, v) for k, v in values.items()}


def parse_config_text(text: str) -> Dict[str, Any]:
    out = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config(path=None, **overrides) -> RunConfig:
    values: Dict[str, Any] = {}
    if path:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(coerce_all({k: v for k, v in overrides.items() if v is not None}))
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def from_dict(values: Dict[str, Any]) -> RunConfig:
    return RunConfig(**coerce_all(values))
