import csv
import hashlib
import json

import numpy as np
import pytest

from acap.audio import read_mels
from acap.cli import build_parser, main
from acap.data import load_dataset_dir
from conftest import tiny_cfg


def digest(d):
    h = hashlib.sha256()
    for p in sorted(d.rglob("*")):
        if p.is_file():
            h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def test_toydata(tmp_path, capsys):
    assert main(["toydata", "--out", str(tmp_path / "a"), "--n", "8", "--seed", "3"]) == 0
    rows = list(csv.reader(open(tmp_path / "a" / "captions.csv")))
    assert len(rows) == 9
    first = digest(tmp_path / "a")
    assert main(["toydata", "--out", str(tmp_path / "a"), "--n", "8", "--seed", "3"]) == 3
    assert "--force" in capsys.readouterr().err
    assert main(["toydata", "--out", str(tmp_path / "a"), "--n", "8", "--seed", "3", "--force"]) == 0
    assert digest(tmp_path / "a") == first
    main(["toydata", "--out", str(tmp_path / "b"), "--n", "8", "--seed", "4"])
    assert digest(tmp_path / "b") != first


def write_cfg(path, **kw):
    path.write_text(tiny_cfg(**kw).to_text())
    return str(path)


def test_train_rlssr_none_column_zero(tmp_path, toy_dir, capsys):
    cfg = write_cfg(tmp_path / "c.cfg", max_steps=3, rlssr="l1")
    assert main(["train", "--config", cfg, "--data", str(toy_dir), "--out", str(tmp_path / "o"), "--rlssr", "none"]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["steps"] == 3 and isinstance(out["best_val_ce"], float)
    rows = list(csv.DictReader(open(tmp_path / "o" / "train_log.csv")))
    assert list(rows[0]) == ["step", "l_ce", "l_rlssr", "l_total"]
    assert [int(r["step"]) for r in rows] == [1, 2, 3]
    assert all(float(r["l_rlssr"]) == 0.0 for r in rows)
    meta = json.loads((tmp_path / "o" / "model.acap.json").read_text())
    assert meta["config"]["rlssr"] == "none"


def test_train_flags_override_file(tmp_path, toy_dir):
    cfg = write_cfg(tmp_path / "c.cfg", max_steps=1, seed=5)
    assert main(["train", "--config", cfg, "--data", str(toy_dir), "--out", str(tmp_path / "o"),
                 "--seed", "9", "--no-transformer-encoder", "--rlssr", "l2"]) == 0
    meta = json.loads((tmp_path / "o" / "model.acap.json").read_text())["config"]
    assert meta["seed"] == 9 and meta["use_transformer_encoder"] is False and meta["rlssr"] == "l2"


def test_invalid_key_exit_2(tmp_path, toy_dir, capsys):
    (tmp_path / "bad.cfg").write_text("lr = 1e-3\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--data", str(toy_dir)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_bad_value_and_missing_data(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("batch_size = lots\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--data", str(tmp_path)]) == 2
    (tmp_path / "ok.cfg").write_text("max_steps = 1\n")
    assert main(["train", "--config", str(tmp_path / "ok.cfg"), "--data", str(tmp_path / "nowhere")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_exit_4(tmp_path, toy_dir, capsys):
    cfg = write_cfg(tmp_path / "c.cfg", max_steps=5, lr=1e300, spec_augment=False)
    code = main(["train", "--config", cfg, "--data", str(toy_dir), "--out", str(tmp_path / "o")])
    assert code == 4 and "step" in capsys.readouterr().err


@pytest.mark.parametrize("cmd", ["toydata", "train", "eval", "caption", "ablate", "score", "mels"])
def test_help_lists_flags_with_defaults(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    flags = [a for a in sub._actions if a.option_strings and a.dest != "help"]
    for a in flags:
        assert a.option_strings[-1] in text
    assert text.count("(default:") >= len(flags)


def test_eval_twice_identical(overfit_run, toy_dir, tmp_path, capsys):
    args = ["eval", "--ckpt", str(overfit_run["ckpt"]), "--data", str(toy_dir), "--beam", "2"]
    assert main(args + ["--out", str(tmp_path / "r1.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2.json")]) == 0
    r1, r2 = (tmp_path / "r1.json").read_text(), (tmp_path / "r2.json").read_text()
    assert r1 == r2
    rep = json.loads(r1)
    assert rep["n_items"] == 8 and set(rep) >= {"bleu1", "bleu4", "rouge_l", "cider_d", "config"}


def test_caption_returns_training_caption(overfit_run, toy_dir, capsys):
    clip = load_dataset_dir(toy_dir)[2]
    capsys.readouterr()
    assert main(["caption", "--ckpt", str(overfit_run["ckpt"]), "--wav", str(clip.audio_path)]) == 0
    assert capsys.readouterr().out.strip() == clip.captions[0]


def test_score(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("the cat\na b c\n")
    (tmp_path / "r.csv").write_text("the cat sat,\na c d,a b c\n")
    assert main(["score", "--candidates", str(tmp_path / "c.txt"), "--references", str(tmp_path / "r.csv"),
                 "--out", str(tmp_path / "s.json")]) == 0
    rep = json.loads((tmp_path / "s.json").read_text())
    assert rep["n_items"] == 2 and rep["rouge_l"] == pytest.approx((2.44 * (2 / 3) / (2 / 3 + 1.44) + 1.0) / 2)
    (tmp_path / "r2.csv").write_text("x\n")
    assert main(["score", "--candidates", str(tmp_path / "c.txt"), "--references", str(tmp_path / "r2.csv")]) == 3


def test_mels(tmp_path, toy_dir):
    clip = load_dataset_dir(toy_dir)[0]
    assert main(["mels", "--wav", str(clip.audio_path), "--out", str(tmp_path / "f.mels")]) == 0
    spec = read_mels(tmp_path / "f.mels")
    assert spec.frames.shape[1] == 64 and np.all(np.isfinite(spec.frames))
