"""Beam search and greedy caption decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import EOS, PAD, SOS

StepFn = Callable[[List[List[int]]], np.ndarray]


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 4
    max_len: int = 30
    length_penalty_alpha: float = 0.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")


@dataclass
class Hypothesis:
    tokens: List[int]  # starts with sos
    logprob: float
    finished: bool = False

    def score(self, alpha: float) -> float:
        if alpha == 0.0:
            return self.logprob
        return self.logprob / max(len(self.tokens) - 1, 1) ** alpha


def _rank(h: Hypothesis, alpha: float):
    return (-h.score(alpha), tuple(h.tokens))


def beam_search_steps(step: StepFn, cfg: BeamConfig, sos: int = SOS, eos: int = EOS,
                      banned: Sequence[int] = (PAD, SOS)) -> Hypothesis:
    """Generic beam search over a next-token log-probability function.

    ``step`` maps a list of equal-length prefixes to an (n, vocab) array of
    log-probabilities.  ``max_len`` bounds the number of generated tokens.
    Finished hypotheses stay in the beam and compete with live ones; equal
    scores are broken towards the lexicographically smaller token sequence.
    """
    beam = [Hypothesis([sos], 0.0)]
    done: List[Hypothesis] = []
    for _ in range(cfg.max_len):
        live = [h for h in beam if not h.finished]
        if not live:
            break
        lp = np.array(step([h.tokens for h in live]), dtype=np.float64)
        lp[:, list(banned)] = -np.inf
        cands = [h for h in beam if h.finished]
        for h, row in zip(live, lp):
            for tok in np.argsort(-row, kind="stable")[: cfg.beam_size]:
                if not np.isfinite(row[tok]):
                    continue
                tok = int(tok)
                cands.append(Hypothesis(h.tokens + [tok], h.logprob + float(row[tok]), tok == eos))
        cands.sort(key=lambda h: _rank(h, cfg.length_penalty_alpha))
        beam = cands[: cfg.beam_size]
        done.extend(h for h in beam if h.finished and all(h is not d for d in done))
    pool = done or beam
    return min(pool, key=lambda h: _rank(h, cfg.length_penalty_alpha))


def greedy_steps(step: StepFn, max_len: int, sos: int = SOS, eos: int = EOS,
                 banned: Sequence[int] = (PAD, SOS)) -> Hypothesis:
    h = Hypothesis([sos], 0.0)
    for _ in range(max_len):
        row = np.array(step([h.tokens])[0], dtype=np.float64)
        row[list(banned)] = -np.inf
        tok = int(np.argmax(row))
        h = Hypothesis(h.tokens + [tok], h.logprob + float(row[tok]), tok == eos)
        if h.finished:
            break
    return h


def model_step_fn(model, spectrogram: np.ndarray) -> StepFn:
    """Encode once; each call scores the last position of every prefix."""
    model.eval()
    spec = np.asarray(spectrogram, dtype=np.float64)
    with T.no_grad():
        enc = model.encode(spec[None] if spec.ndim == 2 else spec)

    def step(prefixes: List[List[int]]) -> np.ndarray:
        toks = np.asarray(prefixes, dtype=np.int64)
        n = len(toks)
        with T.no_grad():
            mem = T.Tensor(np.repeat(enc.E.data, n, axis=0))
            out = model.decoder(toks, mem, np.repeat(enc.time_mask, n, axis=0))
            return T.log_softmax(out.logits[:, -1, :], axis=-1).data

    return step


def beam_search(model, spectrogram: np.ndarray, cfg: BeamConfig = BeamConfig()) -> List[int]:
    """Generated ids (no sos; a terminal eos when one was produced)."""
    return beam_search_steps(model_step_fn(model, spectrogram), cfg).tokens[1:]


def greedy_decode(model, spectrogram: np.ndarray, max_len: int = 30) -> List[int]:
    return greedy_steps(model_step_fn(model, spectrogram), max_len).tokens[1:]


def sequence_logprob(step: StepFn, tokens: Sequence[int], sos: int = SOS) -> float:
    """Cumulative log-probability of generated ``tokens`` after sos."""
    prefix, total = [sos], 0.0
    for tok in tokens:
        total += float(step([prefix])[0][tok])
        prefix = prefix + [int(tok)]
    return total
