import numpy as np
import pytest

from rfsplat.experiment import build_dataset_file, run_experiment
from rfsplat.pipeline import WORKERS_ENV, derive_seed, iter_dataset, split_indices, worker_count

from conftest import tiny_config


def test_derive_seed_streams_distinct():
    seeds = {derive_seed(0, s) for s in ("codebook", "noise", "init", "split")}
    assert len(seeds) == 4
    assert derive_seed(0, "noise", 1, 0) != derive_seed(0, "noise", 0, 1)
    assert derive_seed(5, "init") == derive_seed(5, "init")


def test_split_indices():
    tr, va, te = split_indices(100, (0.8, 0.1, 0.1), seed=1)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(100))
    assert all(np.array_equal(a, b) for a, b in zip((tr, va, te), split_indices(100, seed=1)))
    with pytest.raises(ValueError):
        split_indices(10, (-1, 1, 1))


def test_worker_env(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert worker_count() == 3
    monkeypatch.setenv(WORKERS_ENV, "x")
    with pytest.raises(ValueError):
        worker_count()


def test_pool_matches_serial(tiny_cfg):
    plan, params = tiny_cfg.plan(), tiny_cfg.scene.build()
    serial = list(iter_dataset(4, params, plan, workers=1))
    pooled = list(iter_dataset(4, params, plan, workers=2))
    for (sa, fa), (sb, fb) in zip(serial, pooled):
        assert sa == sb and np.array_equal(fa.grid, fb.grid)


def test_dataset_file_deterministic(tmp_path):
    cfg = tiny_config(n_scenes=4)
    a, b = tmp_path / "a.ds", tmp_path / "b.ds"
    build_dataset_file(cfg, str(a), keep=False)
    build_dataset_file(cfg, str(b), keep=False)
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.ds"
    build_dataset_file(tiny_config(n_scenes=4, seed=8), str(c), keep=False)
    assert c.read_bytes() != a.read_bytes()


def test_measured_features_differ(tmp_path):
    plain = tiny_config(n_scenes=2)
    noisy = plain.with_overrides(["features.measured=true"])
    a = build_dataset_file(plain, str(tmp_path / "a.ds"))
    b = build_dataset_file(noisy, str(tmp_path / "b.ds"))
    assert not np.array_equal(a[0].features.grid, b[0].features.grid)
    assert a[0].scene == b[0].scene


def test_run_experiment_deterministic(tmp_path):
    cfg = tiny_config(n_scenes=12, eval={"tau": 0.0})
    r1 = run_experiment(cfg, str(tmp_path / "one"))
    r2 = run_experiment(cfg, str(tmp_path / "two"))
    for key in ("report", "matches", "confusion", "scenes"):
        assert open(r1.files[key], "rb").read() == open(r2.files[key], "rb").read()
    assert open(r1.files["weights"], "rb").read() == open(r2.files["weights"], "rb").read()
    assert r1.report.extra["test_scenes"] == len(r1.report.scenes)
    assert len(r1.report.pairs) == 3 * len(r1.report.scenes)
    assert np.all(r1.mae_ratio > 0)
