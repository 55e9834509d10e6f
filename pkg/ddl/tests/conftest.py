"""Session fixtures: one toy training run shared across test modules."""

import subprocess

import pytest

from _toy import SCALE, TEST_SEEDS, TRAIN_SEEDS, toy_pair, write_pair_set
from ddl import DdlConfig, train_model
from ddl.cli import entry


@pytest.fixture(scope="session")
def toy_train_pairs():
    return [toy_pair(s) for s in TRAIN_SEEDS]


@pytest.fixture(scope="session")
def trained(tmp_path_factory, toy_train_pairs):
    """One 500-step training run shared by the learning and integration tests."""
    out = tmp_path_factory.mktemp("run")
    cfg = DdlConfig(n_atoms=16, scale=SCALE, steps=500, seed=3, batch_size=4)
    result = train_model(toy_train_pairs, cfg, out)
    return cfg, result


@pytest.fixture(scope="session")
def scored_run(tmp_path_factory, trained):
    """Enhance the held-out set with the trained model, score it externally.

    The enhanced outputs are written as IQV files into the layout the `iqt
    evaluate` command expects for externally produced estimates, then scored
    by that command in a subprocess, so the two packages touch only through
    files and console scripts.
    """
    _, result = trained
    base = tmp_path_factory.mktemp("integration")
    manifest = write_pair_set(base / "data", TEST_SEEDS)
    evalout = base / "eval"
    est_dir = evalout / "estimates" / "ddl"
    est_dir.mkdir(parents=True)
    for seed in TEST_SEEDS:
        rc = entry(["enhance", "--ckpt", result.checkpoint_path,
                    "--in", str(base / "data" / f"vol{seed}_low.iqv"),
                    "--out", str(est_dir / f"vol{seed}_high.iqv")])
        assert rc == 0
    cfg = base / "eval.cfg"
    cfg.write_text("eval.methods = interpolation, ddl\n", encoding="utf-8")
    proc = subprocess.run(
        ["iqt", "evaluate", str(manifest), "--config", str(cfg), "--out", str(evalout)],
        capture_output=True, text=True)
    return base, evalout, proc
