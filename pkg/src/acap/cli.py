"""``acap`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .audio import AudioFormatError, load_wav, logmel, write_mels
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import DataError, decode, gen_toy_corpus, load_dataset_dir, normalize_and_tokenize
from .decoding import beam_search
from .metrics import score_corpus
from .training import (
    NumericError,
    compute_features,
    eval_items,
    load_trained,
    run_ablation,
    save_result,
    train,
)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _config_from_args(args, **extra) -> RunConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "pretrained_ckpt": getattr(args, "pretrained", None),
        "rlssr": getattr(args, "rlssr", None),
        "data_dir": getattr(args, "data", None),
        "out_dir": getattr(args, "out", None),
    }
    if getattr(args, "freeze_cnn", False):
        overrides["freeze_cnn"] = True
    if getattr(args, "no_transformer_encoder", False):
        overrides["use_transformer_encoder"] = False
    overrides.update(extra)
    return load_config(args.config, **overrides)


def cmd_toydata(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} exists and is not empty (use --force)", file=sys.stderr)
        return EXIT_DATA
    gen_toy_corpus(args.n, args.seed, out, n_captions=args.captions)
    print(f"wrote {args.n} clips to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.data_dir:
        raise ConfigError("no data directory: set data_dir in the config or pass --data")
    out_dir = cfg.out_dir or "runs/train"
    result = train(cfg, load_dataset_dir(cfg.data_dir))
    ckpt = save_result(result, out_dir)
    last = result.log.steps[-1] if result.log.steps else {}
    print(json.dumps({"checkpoint": str(ckpt), "steps": len(result.log.steps),
                      "final_l_ce": last.get("l_ce"), "best_val_ce": result.log.best_val_ce if result.log.epochs else None,
                      "early_stop_epoch": result.log.early_stop_epoch}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model, vocab, cfg = load_trained(args.ckpt)
    beam = cfg.beam if args.beam is None else cfg.override(beam_size=args.beam).beam
    clips = load_dataset_dir(args.data)
    feats = compute_features(clips, cfg.mel)
    from .metrics import evaluate

    report = evaluate(model, eval_items(clips, feats), beam, vocab,
                      {"checkpoint": Path(args.ckpt).name, "beam_size": beam.beam_size})
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_caption(args) -> int:
    model, vocab, cfg = load_trained(args.ckpt)
    wave, _ = load_wav(args.wav, cfg.sample_rate)
    spec = logmel(wave, cfg.mel).frames
    beam = cfg.beam if args.beam is None else cfg.override(beam_size=args.beam).beam
    print(decode(beam_search(model, spec, beam), vocab))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.data_dir:
        raise ConfigError("no data directory: set data_dir in the config or pass --data")
    rows = run_ablation(cfg, args.out, eval_on=args.eval_on)
    print((Path(args.out) / "ablation.md").read_text(), end="")
    return 0 if len(rows) == 12 else 1


def read_references(path):
    """One row per item; every non-empty cell is a reference. A Clotho header is skipped."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if rows and rows[0] and (rows[0][0].strip() == "file_name" or rows[0][0].startswith("caption_")):
        drop_first_col = rows[0][0].strip() == "file_name"
        rows = [r[1:] if drop_first_col else r for r in rows[1:]]
    return [[c for c in r if c.strip()] for r in rows]


def cmd_score(args) -> int:
    cands = [line.rstrip("\n") for line in Path(args.candidates).read_text(encoding="utf-8").splitlines()]
    refs = read_references(args.references)
    if len(cands) != len(refs):
        raise DataError(f"{len(cands)} candidates but {len(refs)} reference rows")
    corpus = []
    for i, (c, rs) in enumerate(zip(cands, refs), start=1):
        if not rs:
            raise DataError(f"reference row {i} has no captions")
        words = normalize_and_tokenize(c) if c.strip() else []
        corpus.append((words, [normalize_and_tokenize(r) for r in rs]))
    text = score_corpus(corpus, {"candidates": Path(args.candidates).name}).to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_mels(args) -> int:
    cfg = load_config(args.config)
    wave, _ = load_wav(args.wav, cfg.sample_rate)
    write_mels(args.out, logmel(wave, cfg.mel))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acap", description="Audio captioning with RLSSR regularisation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("toydata", help="generate the synthetic toy corpus", formatter_class=_Formatter)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, default=8, help="number of clips")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--captions", type=int, default=1, help="captions per clip (1-5)")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_toydata)

    s = sub.add_parser("train", help="train a captioner", formatter_class=_Formatter)
    s.add_argument("--config", default=None, help="key = value config file")
    s.add_argument("--data", default=None, help="dataset directory (captions.csv + audio/)")
    s.add_argument("--out", default=None, help="output directory for model.acap and train_log.csv")
    s.add_argument("--pretrained", default=None, help="ACAP checkpoint whose CNN is loaded")
    s.add_argument("--freeze-cnn", action="store_true", help="freeze the loaded CNN")
    s.add_argument("--rlssr", choices=["none", "l1", "l2"], default=None, help="auxiliary loss")
    s.add_argument("--no-transformer-encoder", action="store_true", help="skip the transformer encoder layers")
    s.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="beam-decode a dataset and print metrics JSON", formatter_class=_Formatter)
    s.add_argument("--ckpt", required=True, help="model checkpoint")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--beam", type=int, default=None, help="beam size (default: from checkpoint config)")
    s.add_argument("--out", default=None, help="also write the report JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("caption", help="caption one WAV file", formatter_class=_Formatter)
    s.add_argument("--ckpt", required=True, help="model checkpoint")
    s.add_argument("--wav", required=True, help="input WAV")
    s.add_argument("--beam", type=int, default=None, help="beam size (default: from checkpoint config)")
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("ablate", help="run the 12-cell ablation grid", formatter_class=_Formatter)
    s.add_argument("--config", default=None, help="key = value config file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--data", default=None, help="dataset directory (overrides config)")
    s.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    s.add_argument("--pretrained", default=None, help="checkpoint for the PANN cells (default: pretrain one)")
    s.add_argument("--eval-on", choices=["val", "train"], default="val", help="split to score")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("score", help="score candidate captions against references", formatter_class=_Formatter)
    s.add_argument("--candidates", required=True, help="text file, one candidate per line")
    s.add_argument("--references", required=True, help="CSV, one row of references per candidate")
    s.add_argument("--out", default=None, help="also write the report JSON here")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("mels", help="dump log-mel features of a WAV as a MELS file", formatter_class=_Formatter)
    s.add_argument("--wav", required=True, help="input WAV")
    s.add_argument("--out", required=True, help="output .mels file")
    s.add_argument("--config", default=None, help="key = value config file")
    s.set_defaults(func=cmd_mels)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, AudioFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
