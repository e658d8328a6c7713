import itertools

import numpy as np
import pytest
from scipy import stats

from rfsplat.exceptions import InvalidInputError, PlacementInfeasibleError
from rfsplat.scenes import (
    SceneParams,
    SceneRecord,
    bridson_sample,
    generate_scene,
    lookup_material,
    material_table,
    material_table_default,
    scene_seed,
)


def test_default_materials():
    table = material_table_default()
    assert [m.name for m in table] == ["brick", "wood", "glass", "ceiling-board", "metal"]
    assert lookup_material("metal").conductivity == 10_000_000
    assert lookup_material("glass").rel_permittivity == 6.31
    assert lookup_material("brick").conductivity == 0.028
    assert lookup_material("ceiling-board").rel_permittivity == 1.48
    assert sorted(m.class_index for m in table) == [1, 2, 3, 4, 5]


def test_subset_reindexed():
    table = material_table(["metal", "glass", "wood"])
    assert [(m.name, m.class_index) for m in table] == [("metal", 1), ("glass", 2), ("wood", 3)]
    with pytest.raises(InvalidInputError):
        material_table(["unobtainium"])


def test_imaginary_permittivity_from_conductivity():
    glass = lookup_material("glass")
    eps = glass.complex_permittivity(2.8e9)
    assert eps.real == 6.31
    assert eps.imag == pytest.approx(-0.014 / (2 * np.pi * 2.8e9 * 8.8541878128e-12))


def check_scene(scene, params):
    g = scene.geometry()
    assert len(scene.spheres) == params.n_spheres
    for axis, (lo, hi) in enumerate(params.bounds):
        assert np.all(g[:, axis] >= lo) and np.all(g[:, axis] <= hi)
    assert np.all(g[:, 3] >= params.radius_range[0]) and np.all(g[:, 3] <= params.radius_range[1])
    for i, j in itertools.combinations(range(len(g)), 2):
        assert np.linalg.norm(g[i, :3] - g[j, :3]) >= params.min_separation


def test_default_params_seed_42():
    params = SceneParams()
    scene = generate_scene(42, params)
    check_scene(scene, params)
    assert scene.n_spheres == 12


def test_singleton():
    params = SceneParams(n_spheres=1)
    scene = generate_scene(5, params)
    check_scene(scene, params)


def test_determinism():
    assert generate_scene(123) == generate_scene(123)
    assert generate_scene(123) != generate_scene(124)


def test_round_trip_dict():
    scene = generate_scene(9)
    assert SceneRecord.from_dict(scene.to_dict()) == scene


def test_infeasible():
    params = SceneParams(n_spheres=50)
    with pytest.raises(PlacementInfeasibleError):
        generate_scene(0, params)


def test_bridson_separation_dense():
    rng = np.random.default_rng(0)
    pts = bridson_sample(((0, 4), (0, 4), (0, 4)), 0.5, rng)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 0.5
    # maximality: a Bridson set in a 4 m cube at r=0.5 holds several hundred points
    assert len(pts) > 300


def test_scene_seeds_distinct():
    seeds = {scene_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert scene_seed(7, 3) == scene_seed(7, 3)


def test_marginals_roughly_uniform():
    params = SceneParams(n_spheres=3)
    centers = np.concatenate([generate_scene(scene_seed(1, i), params).geometry()[:, :3] for i in range(2000)])
    # interior bins only: blue-noise samplers over-populate the faces
    interior = [np.histogram(centers[:, a], bins=10, range=b)[0][1:-1] for a, b in enumerate(params.bounds)]
    assert stats.chisquare(interior[1]).pvalue > 0.01
    assert stats.chisquare(interior[2]).pvalue > 0.01
    # the 3 m axis holds only ~3 columns at 1 m separation, which leaves ripples
    assert np.max(np.abs(interior[0] / interior[0].mean() - 1)) < 0.25
