import pytest

from rfsplat.config import RunConfig


def tiny_config(**top):
    """A run small enough for unit tests: 3 spheres, 4x4 array, single bounce."""
    cfg = RunConfig.from_dict({
        "seed": 7,
        "n_scenes": 10,
        "simulation": {"max_reflections": 1, "rx_shape": [4, 4]},
        "scene": {"n_spheres": 3, "materials": ["metal", "glass", "wood"]},
        "model": {"hidden_dim": 8, "encoder_layers": 1, "decoder_layers": 1, "heads": 2, "ff_dim": 16,
                  "n_queries": 4},
        "training": {"epochs": 2, "batch_size": 4},
        **top,
    })
    return cfg.validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from rfsplat.experiment import build_dataset_file

    cfg = tiny_config()
    path = tmp_path_factory.mktemp("data") / "tiny.ds"
    records = build_dataset_file(cfg, str(path), workers=1)
    return cfg, str(path), records


# one verdict line per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
