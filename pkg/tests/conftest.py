import numpy as np
import pytest

from acap.config import RunConfig
from acap.data import gen_toy_corpus
from acap.training import compute_features, train

TINY = dict(cnn_channels=(4, 8, 16, 32), d_model=64, n_heads=4, enc_layers=2, dec_layers=2)

# Memorisation run: no augmentation or dropout, larger step size.
OVERFIT_CFG = RunConfig(**TINY, dropout=0.0, spec_augment=False, lr=1e-3, batch_size=8,
                        max_epochs=2000, max_steps=2000, stop_at_train_ce=0.01, seed=0)


def tiny_cfg(**kw) -> RunConfig:
    base = dict(TINY, dropout=0.0, spec_augment=False, lr=1e-3, batch_size=4, max_epochs=1000, seed=0)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    gen_toy_corpus(8, 0, out)
    return out


@pytest.fixture(scope="session")
def toy_clips(toy_dir):
    from acap.data import load_dataset_dir

    return load_dataset_dir(toy_dir)


@pytest.fixture(scope="session")
def toy_feats(toy_clips):
    return compute_features(toy_clips, OVERFIT_CFG.mel)


@pytest.fixture(scope="session")
def short_feats(toy_feats):
    """First 48 frames of every clip: cheap inputs for multi-run training tests."""
    return [f[:48] for f in toy_feats]


@pytest.fixture(scope="session")
def overfit_run(toy_dir, tmp_path_factory):
    """The memorisation run, driven through the command line."""
    import time

    from acap.cli import main

    work = tmp_path_factory.mktemp("overfit")
    (work / "overfit.cfg").write_text(OVERFIT_CFG.override(val_fraction=0.0).to_text())
    t0 = time.time()
    code = main(["train", "--config", str(work / "overfit.cfg"), "--data", str(toy_dir), "--out", str(work / "run")])
    return {"exit": code, "dir": work / "run", "ckpt": work / "run" / "model.acap", "seconds": time.time() - t0}


@pytest.fixture(scope="session")
def overfit(overfit_run):
    from acap.training import load_trained

    model, vocab, cfg = load_trained(overfit_run["ckpt"])
    return model, vocab, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[key])
