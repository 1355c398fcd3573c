"""Clotho-style ingestion, word vocabulary, batching, and the synthetic toy corpus."""

from __future__ import annotations

import csv
import itertools
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .audio import MelConfig, write_wav_pcm16
from .rng import stream

PAD, SOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<sos>", "<eos>", "<unk>")
MAX_CAPTIONS = 5

_PUNCT = re.compile(r'[.,!?;:"]')


class DataError(ValueError):
    pass


@dataclass
class CaptionedClip:
    audio_path: Path
    captions: List[str]


def normalize_and_tokenize(caption: str) -> List[str]:
    """Lowercase, drop . , ! ? ; : and double quotes, split on whitespace."""
    words = _PUNCT.sub(" ", caption.lower()).split()
    if not words:
        raise DataError(f"caption {caption!r} is empty after normalisation")
    return words


def load_clotho_csv(csv_path, audio_dir) -> List[CaptionedClip]:
    """Read ``file_name,caption_1,...,caption_k`` rows (k <= 5, Clotho uses 5).

    Every problem found is collected and reported in a single error.
    """
    csv_path, audio_dir = Path(csv_path), Path(audio_dir)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{csv_path}: empty file")
    header = [h.strip() for h in rows[0]]
    k = len(header) - 1
    expected = ["file_name"] + [f"caption_{i}" for i in range(1, k + 1)]
    if k < 1 or k > MAX_CAPTIONS or header != expected:
        raise DataError(f"{csv_path}: header must be file_name,caption_1,...,caption_5; got {header}")
    clips, problems = [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            problems.append(f"row {line_no}: expected {len(header)} fields, got {len(row)}")
            continue
        name = row[0].strip()
        path = audio_dir / name
        if not name:
            problems.append(f"row {line_no}: empty file_name")
        elif not path.is_file():
            problems.append(f"row {line_no}: audio file {path} not found")
        caps = []
        for col, cell in zip(header[1:], row[1:]):
            if not _PUNCT.sub(" ", cell).strip():
                problems.append(f"row {line_no}, column {col}: empty caption")
            caps.append(cell.strip())
        clips.append(CaptionedClip(audio_path=path, captions=caps))
    if problems:
        raise DataError(f"{csv_path}: " + "; ".join(problems))
    return clips


class Vocab:
    def __init__(self, words: Sequence[str] = (), min_freq: int = 1):
        self.min_freq = min_freq
        self.itos: List[str] = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.stoi: Dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    def to_json(self) -> dict:
        return {"min_freq": self.min_freq, "itos": self.itos}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        itos = obj["itos"]
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary does not start with the special tokens")
        return cls(itos[len(SPECIALS):], obj.get("min_freq", 1))


def build_vocab(clips: Iterable[CaptionedClip], min_freq: int = 1) -> Vocab:
    """Words with count >= min_freq, ordered by descending count then alphabetically."""
    counts = Counter(w for c in clips for cap in c.captions for w in normalize_and_tokenize(cap))
    words = sorted((w for w, n in counts.items() if n >= min_freq), key=lambda w: (-counts[w], w))
    return Vocab(words, min_freq)


def encode(caption: str, vocab: Vocab) -> List[int]:
    return [SOS] + [vocab.id(w) for w in normalize_and_tokenize(caption)] + [EOS]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, SOS):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


def pad_tokens(seqs: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def pad_spectrograms(specs: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([s.shape[0] for s in specs], dtype=np.int64)
    out = np.zeros((len(specs), int(lengths.max()), specs[0].shape[1]))
    for i, s in enumerate(specs):
        out[i, : s.shape[0]] = s
    return out, lengths


@dataclass
class Example:
    """One (clip, caption) training pair."""

    clip_index: int
    caption_index: int
    tokens: List[int]


@dataclass
class Batch:
    specs: np.ndarray  # (B, T, n_mels), zero padded
    spec_lengths: np.ndarray
    tokens: np.ndarray  # (B, L) sos ... eos pad ...
    token_lengths: np.ndarray
    examples: List[Example] = field(default_factory=list)

    @property
    def decoder_input(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def decoder_target(self) -> np.ndarray:
        return self.tokens[:, 1:]

    @property
    def target_mask(self) -> np.ndarray:
        """Decoder-input positions that carry a prediction target (sos .. last word)."""
        return np.arange(self.tokens.shape[1] - 1)[None, :] < (self.token_lengths - 1)[:, None]

    def unbatch(self) -> List[Tuple[np.ndarray, List[int]]]:
        return [
            (self.specs[i, : self.spec_lengths[i]], self.tokens[i, : self.token_lengths[i]].tolist())
            for i in range(len(self.spec_lengths))
        ]


def make_examples(clips: Sequence[CaptionedClip], vocab: Vocab) -> List[Example]:
    return [
        Example(ci, k, encode(cap, vocab))
        for ci, clip in enumerate(clips)
        for k, cap in enumerate(clip.captions)
    ]


def collate(examples: Sequence[Example], specs: Sequence[np.ndarray]) -> Batch:
    s, sl = pad_spectrograms(specs)
    t, tl = pad_tokens([e.tokens for e in examples])
    return Batch(specs=s, spec_lengths=sl, tokens=t, token_lengths=tl, examples=list(examples))


def shuffled(items: Sequence, seed: int, name: str) -> list:
    order = stream(seed, name).permutation(len(items))
    return [items[i] for i in order]


def split_train_val(clips: Sequence[CaptionedClip], seed: int, val_fraction: float = 0.1):
    """Deterministic 90/10 split by seeded shuffle; at least one clip on each side when possible."""
    items = shuffled(list(clips), seed, "split")
    if val_fraction <= 0:
        return items, []
    n_val = int(round(len(items) * val_fraction))
    if len(items) > 1:
        n_val = min(max(n_val, 1), len(items) - 1)
    else:
        n_val = 0
    return items[n_val:], items[:n_val]


# -- toy corpus -------------------------------------------------------------

EVENTS = ("low", "high", "noise")
_EVENT_PHRASE = {"low": "a low tone", "high": "a high tone", "noise": "noise"}
_LINKS = (" followed by ", " then ")
TOY_LOW_HZ = 330.0
TOY_HIGH_HZ = 3520.0


def toy_caption(events: Sequence[str], variant: int = 0) -> str:
    """Caption for an event sequence; ``variant`` picks an alternative phrasing."""
    phrases = [_EVENT_PHRASE[e] for e in events]
    if variant % 2 == 0:
        text = phrases[0]
        for i, p in enumerate(phrases[1:]):
            text += _LINKS[0] if i == 0 else _LINKS[1]
            text += p
    else:
        text = phrases[0] + " and then " + " and then ".join(phrases[1:])
    if variant >= 2:
        text = "we hear " + text
    return text


def all_event_sequences() -> List[Tuple[str, ...]]:
    seqs = [s for n in (2, 3) for s in itertools.product(EVENTS, repeat=n)]
    return [s for s in seqs if all(a != b for a, b in zip(s, s[1:]))]


def synth_events(events: Sequence[str], rng: np.random.Generator, sample_rate: int,
                 duration_s: float) -> np.ndarray:
    """Render events in order, separated by short silences, into ``duration_s`` seconds."""
    n_total = int(round(duration_s * sample_rate))
    gap = int(0.15 * sample_rate)
    ev_len = (n_total - gap * (len(events) + 1)) // len(events)
    out = np.zeros(n_total)
    pos = gap
    t = np.arange(ev_len) / sample_rate
    fade = np.minimum(1.0, np.minimum(np.arange(ev_len), np.arange(ev_len)[::-1]) / (0.01 * sample_rate))
    for ev in events:
        amp = rng.uniform(0.3, 0.5)
        if ev == "noise":
            sig = rng.uniform(-1.0, 1.0, ev_len)
        else:
            f0 = (TOY_LOW_HZ if ev == "low" else TOY_HIGH_HZ) * rng.uniform(0.97, 1.03)
            sig = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
        out[pos : pos + ev_len] = amp * fade * sig
        pos += ev_len + gap
    return out


def gen_toy_corpus(n_clips: int, seed: int, out_dir, n_captions: int = 1,
                   mel: MelConfig = MelConfig()) -> List[CaptionedClip]:
    """Write ``captions.csv`` and ``audio/clip_XXXX.wav`` for a learnable toy task.

    Each clip is 2-4 s of low tones, high tones and noise bursts; its captions
    describe the order of the events.  Clips get distinct event orders while
    there are orders left (18 exist), so small corpora are unambiguous.
    """
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    if not 1 <= n_captions <= MAX_CAPTIONS:
        raise ValueError("n_captions must be in 1..5")
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    rng = stream(seed, "toy-corpus")
    pool = all_event_sequences()
    order = list(rng.permutation(len(pool)))
    clips = []
    rows = [["file_name"] + [f"caption_{i}" for i in range(1, n_captions + 1)]]
    for i in range(n_clips):
        if not order:
            order = list(rng.permutation(len(pool)))
        events = pool[order.pop(0)]
        duration = float(rng.uniform(2.0, 4.0))
        audio = synth_events(events, rng, mel.sample_rate, duration)
        name = f"clip_{i:04d}.wav"
        write_wav_pcm16(audio_dir / name, audio, mel.sample_rate)
        caps = [toy_caption(events, v) for v in range(n_captions)]
        rows.append([name] + caps)
        clips.append(CaptionedClip(audio_path=audio_dir / name, captions=caps))
    with open(out_dir / "captions.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return clips


def load_dataset_dir(data_dir) -> List[CaptionedClip]:
    """A directory holding ``captions.csv`` and ``audio/``."""
    data_dir = Path(data_dir)
    return load_clotho_csv(data_dir / "captions.csv", data_dir / "audio")
