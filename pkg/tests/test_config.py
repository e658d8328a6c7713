import json

import pytest

from rfsplat.config import RunConfig, desk_preset
from rfsplat.exceptions import ConfigError
from rfsplat.model import DEFAULT_TAU


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.eval.tau == DEFAULT_TAU == 0.52
    assert cfg.scene.n_spheres == 12 and len(cfg.scene.materials) == 5
    assert cfg.training.learning_rate == 1e-4 and cfg.model.n_queries == 16


def test_unknown_keys_rejected_at_every_level():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="model"):
        RunConfig.from_dict({"model": {"hidden": 3}})


def test_section_must_be_object():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": 3})


def test_load_and_echo(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 3, "training": {"epochs": 5}}))
    cfg = RunConfig.load(str(path))
    assert cfg.seed == 3 and cfg.training.epochs == 5
    out = cfg.save(str(tmp_path / "echo.json"))
    assert RunConfig.load(out) == cfg


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(str(path))


def test_overrides():
    cfg = RunConfig().with_overrides(["model.hidden_dim=16", "seed=9", "scene.materials=[\"metal\",\"wood\"]"])
    assert cfg.model.hidden_dim == 16 and cfg.seed == 9 and cfg.scene.materials == ["metal", "wood"]
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["model.nope=1"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["seed"])


@pytest.mark.parametrize("override", [
    "eval.tau=1.5",
    "training.learning_rate=0",
    "training.split=[0.5,0.5]",
    "model.heads=3",
    "model.n_queries=4",
    "model.dtype=\"float16\"",
    "scene.materials=[\"unobtainium\"]",
    "simulation.max_reflections=0",
    "codebook.n_entries=0",
])
def test_range_validation(override):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides([override])


def test_estimator_from_config():
    cfg = RunConfig()
    est = cfg.estimator()
    assert est.n_classes == 6 and est.tau == 0.52 and est.grid == (8, 8)
    assert est.seed == cfg.estimator().seed
    assert est.seed != RunConfig(seed=1).estimator().seed


def test_desk_preset():
    cfg = desk_preset().validate()
    assert cfg.scene.n_spheres == 3 and cfg.scene.materials == ["metal", "glass", "wood"]
    assert cfg.codebook.n_entries == 2 and cfg.n_scenes == 2000
