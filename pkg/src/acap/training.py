"""Teacher-forced training with gradient accumulation, early stopping and the ablation grid."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .audio import MelConfig, load_wav, logmel, spec_augment
from .checkpoint import load_checkpoint, load_meta, save_checkpoint
from .config import RunConfig, from_dict
from .data import (
    PAD,
    CaptionedClip,
    Vocab,
    build_vocab,
    collate,
    load_dataset_dir,
    make_examples,
    shuffled,
    split_train_val,
)
from .metrics import MetricReport, evaluate
from .model import CaptionModel, build_model, load_pretrained
from .optim import Adam
from .rlssr import combine_losses, rlssr_forward
from .rng import stream

log = logging.getLogger(__name__)

CNN_PREFIX = "encoder.cnn."


class NumericError(RuntimeError):
    pass


@dataclass
class TrainLog:
    steps: List[Dict] = field(default_factory=list)  # step, l_ce, l_rlssr, l_total
    epochs: List[Dict] = field(default_factory=list)  # epoch, step, val_ce
    best_epoch: int = -1
    best_val_ce: float = float("inf")
    early_stop_epoch: Optional[int] = None
    wall_clock_s: float = 0.0
    config: Dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "l_ce", "l_rlssr", "l_total"])
            for s in self.steps:
                w.writerow([s["step"], repr(s["l_ce"]), repr(s["l_rlssr"]), repr(s["l_total"])])


@dataclass
class TrainResult:
    model: CaptionModel
    vocab: Vocab
    log: TrainLog
    config: RunConfig

    def meta(self) -> dict:
        return {"config": self.config.to_dict(), "vocab": self.vocab.to_json()}


def compute_features(clips: Sequence[CaptionedClip], mel: MelConfig) -> List[np.ndarray]:
    return [logmel(load_wav(c.audio_path, mel.sample_rate)[0], mel).frames for c in clips]


def new_model(cfg: RunConfig, vocab_size: int) -> CaptionModel:
    return build_model(cfg.encoder, cfg.decoder(vocab_size), with_rlssr=cfg.rlssr != "none", seed=cfg.seed)


def batch_losses(model: CaptionModel, batch, cfg: RunConfig):
    """Summed CE over target tokens and summed per-item RLSSR loss for one micro-batch."""
    enc, dec = model(batch.specs, batch.spec_lengths, batch.decoder_input)
    ce_sum = T.cross_entropy(dec.logits, batch.decoder_target, ignore_id=PAD, reduction="sum")
    rl_sum = None
    if model.rlssr is not None:
        rl_sum = rlssr_term(model, enc, dec, batch.decoder_input, batch.target_mask, cfg.rlssr_cfg, "sum")
    return ce_sum, rl_sum


def rlssr_term(model: CaptionModel, enc, dec, dec_input, token_mask, rcfg, reduction: str = "mean"):
    """RLSSR loss for one forward pass.

    With ``stop_grad_audio`` the text side is re-decoded against a detached
    encoder memory, so the auxiliary loss cannot reach the encoder through
    cross-attention either.
    """
    t_emb = dec.T
    if rcfg.stop_grad_audio:
        t_emb = model.decoder(dec_input, enc.E.detach(), enc.time_mask).T
    return rlssr_forward(enc.A, enc.time_mask, t_emb, token_mask, model.rlssr, rcfg, reduction).loss


def mean_ce(model: CaptionModel, examples, feats, batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i : i + batch_size]
            b = collate(chunk, [feats[e.clip_index] for e in chunk])
            _, dec = model(b.specs, b.spec_lengths, b.decoder_input)
            total += T.cross_entropy(dec.logits, b.decoder_target, ignore_id=PAD, reduction="sum").item()
            count += int((b.token_lengths - 1).sum())
    model.train()
    return total / count


def _chunks(items: Sequence, size: int) -> list:
    return [items[i : i + size] for i in range(0, len(items), size)]


def train(cfg: RunConfig, train_clips: Sequence[CaptionedClip],
          val_clips: Optional[Sequence[CaptionedClip]] = None, vocab: Optional[Vocab] = None,
          train_feats: Optional[List[np.ndarray]] = None,
          val_feats: Optional[List[np.ndarray]] = None) -> TrainResult:
    """Train a captioner on ``train_clips``.

    Without ``val_clips`` a seeded 90/10 split is taken from ``train_clips``;
    an explicitly empty validation list disables validation and early
    stopping (the final weights are returned).  Features may be precomputed.
    """
    t0 = time.time()
    if val_clips is None:
        train_clips, val_clips = split_train_val(train_clips, cfg.seed, cfg.val_fraction)
        train_feats = val_feats = None
    vocab = vocab or build_vocab(train_clips, cfg.min_freq)
    train_feats = train_feats if train_feats is not None else compute_features(train_clips, cfg.mel)
    val_feats = val_feats if val_feats is not None else compute_features(val_clips, cfg.mel)

    model = new_model(cfg, len(vocab))
    if cfg.pretrained_ckpt:
        report = load_pretrained(model, load_checkpoint(cfg.pretrained_ckpt), CNN_PREFIX, cfg.freeze_cnn)
        log.info("loaded %d tensors from %s", len(report.loaded), cfg.pretrained_ckpt)
    elif cfg.freeze_cnn:
        for name, p in model.named_parameters():
            if name.startswith(CNN_PREFIX):
                p.freeze()
    model.train()
    opt = Adam(model.parameters(), lr=cfg.lr)

    train_ex = make_examples(train_clips, vocab)
    val_ex = make_examples(val_clips, vocab) if val_clips else []
    tlog = TrainLog(config=cfg.to_dict())
    best_state = None
    step = 0
    done = False
    for epoch in range(cfg.max_epochs):
        order = shuffled(train_ex, cfg.seed, f"shuffle/{epoch}")
        for group in _chunks(_chunks(order, cfg.batch_size), cfg.grad_accum_steps):
            n_tok = sum(len(e.tokens) - 1 for mb in group for e in mb)
            n_items = sum(len(mb) for mb in group)
            ce_tot = rl_tot = 0.0
            for mb in group:
                feats = []
                for e in mb:
                    f = train_feats[e.clip_index]
                    if cfg.spec_augment:
                        rng = stream(cfg.seed, f"specaug/{epoch}/{e.clip_index}/{e.caption_index}")
                        f = spec_augment_frames(f, cfg, rng)
                    feats.append(f)
                batch = collate(mb, feats)
                ce_sum, rl_sum = batch_losses(model, batch, cfg)
                l_ce = ce_sum * (1.0 / n_tok)
                l_rl = rl_sum * (1.0 / n_items) if rl_sum is not None else T.Tensor(0.0)
                bundle = combine_losses(l_ce, l_rl, cfg.alpha, cfg.beta)
                if not np.isfinite(bundle.L_total.item()):
                    raise NumericError(f"non-finite loss at optimizer step {step + 1} (epoch {epoch})")
                bundle.L_total.backward()
                ce_tot += l_ce.item()
                rl_tot += l_rl.item()
            for p in opt.params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericError(f"non-finite gradient for {p.name} at optimizer step {step + 1}")
            opt.step()
            opt.zero_grad()
            step += 1
            tlog.steps.append({"step": step, "l_ce": ce_tot, "l_rlssr": rl_tot,
                               "l_total": cfg.alpha * ce_tot + cfg.beta * rl_tot})
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
            if cfg.stop_at_train_ce and ce_tot < cfg.stop_at_train_ce:
                done = True
                break
        if val_ex:
            val_ce = mean_ce(model, val_ex, val_feats, cfg.batch_size)
            tlog.epochs.append({"epoch": epoch, "step": step, "val_ce": val_ce})
            if val_ce < tlog.best_val_ce:
                tlog.best_val_ce, tlog.best_epoch = val_ce, epoch
                best_state = model.state_dict()
            elif epoch - tlog.best_epoch >= cfg.early_stop_patience:
                tlog.early_stop_epoch = epoch
                done = True
        if done:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    tlog.wall_clock_s = time.time() - t0
    return TrainResult(model=model, vocab=vocab, log=tlog, config=cfg)


def spec_augment_frames(frames: np.ndarray, cfg: RunConfig, rng) -> np.ndarray:
    from .audio import Spectrogram

    return spec_augment(Spectrogram(frames), cfg.specaug, rng).frames


def save_result(result: TrainResult, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.acap"
    save_checkpoint(result.model, ckpt, result.meta())
    result.log.write_csv(out_dir / "train_log.csv")
    return ckpt


def load_trained(ckpt_path):
    """Rebuild a model, vocabulary and config from a checkpoint and its sidecar."""
    meta = load_meta(ckpt_path)
    cfg = from_dict(meta["config"])
    vocab = Vocab.from_json(meta["vocab"])
    model = new_model(cfg, len(vocab))
    model.load_state_dict(load_checkpoint(ckpt_path))
    model.eval()
    return model, vocab, cfg


def eval_items(clips: Sequence[CaptionedClip], feats: Sequence[np.ndarray]):
    return [(f, c.captions) for c, f in zip(clips, feats)]


# -- ablation grid ------------------------------------------------------------

TABLE_COLUMNS = ["Model", "BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE_L", "METEOR", "CIDEr", "SPICE", "SPIDEr"]
RLSSR_ORDER = ("none", "l2", "l1")


def cell_label(use_encoder: bool, pretrained: bool, rlssr: str) -> str:
    label = "Base" if use_encoder else "Base - transformer enc"
    if pretrained:
        label += " + PANN"
    if rlssr != "none":
        label += f" + {rlssr.upper()} loss"
    return label


def grid_cells():
    return [(enc, pre, r) for enc in (True, False) for pre in (False, True) for r in RLSSR_ORDER]


@dataclass
class AblationRow:
    label: str
    use_transformer_encoder: bool
    pretrained: bool
    rlssr: str
    report: MetricReport
    checkpoint: str
    initial_rlssr: float = 0.0
    final_rlssr: float = 0.0

    def cells(self) -> List[str]:
        r = self.report
        dash = "—"
        return [self.label] + [f"{v:.3f}" for v in (r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l)] + [
            dash, f"{r.cider_d:.3f}", dash, dash]


def format_table(rows: Sequence[AblationRow]) -> str:
    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    lines += ["| " + " | ".join(r.cells()) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def tail_mean(values: Sequence[float], n: int = 10) -> float:
    tail = list(values)[-n:]
    return float(sum(tail) / len(tail)) if tail else 0.0


def run_ablation(base: RunConfig, out_dir, clips: Optional[Sequence[CaptionedClip]] = None,
                 eval_on: str = "val") -> List[AblationRow]:
    """Train and score every {encoder x pretrained x rlssr} cell.

    The "PANN" cells load the CNN from ``base.pretrained_ckpt`` or, when that
    is empty, from a CE-only model trained first on the same training split.
    Scores are computed on the validation split (``eval_on="train"`` scores the
    training clips instead).  Writes ``ablation.md`` and ``ablation.csv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = list(clips) if clips is not None else load_dataset_dir(base.data_dir)
    train_clips, val_clips = split_train_val(clips, base.seed, base.val_fraction)
    vocab = build_vocab(train_clips, base.min_freq)
    tf = compute_features(train_clips, base.mel)
    vf = compute_features(val_clips, base.mel)

    pretrained = base.pretrained_ckpt
    if not pretrained:
        pre_cfg = base.override(rlssr="none", use_transformer_encoder=True, pretrained_ckpt="", freeze_cnn=False)
        res = train(pre_cfg, train_clips, val_clips, vocab, tf, vf)
        pretrained = str(save_result(res, out_dir / "pretrain"))

    score_clips, score_feats = (train_clips, tf) if eval_on == "train" else (val_clips, vf)
    rows = []
    for enc, pre, rl in grid_cells():
        cfg = base.override(use_transformer_encoder=enc, rlssr=rl, pretrained_ckpt=pretrained if pre else "",
                            freeze_cnn=base.freeze_cnn and pre)
        res = train(cfg, train_clips, val_clips, vocab, tf, vf)
        slug = f"enc{int(enc)}_pre{int(pre)}_{rl}"
        ckpt = save_result(res, out_dir / "cells" / slug)
        report = evaluate(res.model, eval_items(score_clips, score_feats), cfg.beam, vocab,
                          {"cell": slug, "eval_on": eval_on})
        rl_vals = [s["l_rlssr"] for s in res.log.steps]
        rows.append(AblationRow(cell_label(enc, pre, rl), enc, pre, rl, report, str(ckpt),
                                rl_vals[0] if rl_vals else 0.0, tail_mean(rl_vals)))
        log.info("%s: %s", rows[-1].label, rows[-1].cells()[1:])
    (out_dir / "ablation.md").write_text(format_table(rows))
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS + ["initial_l_rlssr", "final_l_rlssr"])
        for r in rows:
            w.writerow(r.cells() + [repr(r.initial_rlssr), repr(r.final_rlssr)])
    return rows
