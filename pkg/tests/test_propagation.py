import math
from collections import Counter

import numpy as np
import pytest
from scipy.optimize import minimize

from rfsplat.geometry import Sphere
from rfsplat.propagation import (
    C0,
    SPHERE,
    PathSet,
    SimulationConfig,
    apply_codebook_entry,
    build_codebook,
    fresnel,
    room_panels,
    specular_entry,
    synthesize_wavefront,
    trace_geometry,
    trace_paths,
)
from rfsplat.scenes import SceneParams, SceneRecord, SpherePrimitive, generate_scene, lookup_material, material_table

CFG = SimulationConfig()


def scene_with(*spheres):
    prims = tuple(SpherePrimitive(Sphere(c, r), lookup_material(m)) for c, r, m in spheres)
    return SceneRecord(prims, 0, ((-3, 3), (-5, 5), (0, 4)), 0.0)


def small_scene(seed, n=3):
    return generate_scene(seed, SceneParams(n_spheres=n, materials=material_table(["metal", "glass", "wood"])))


class TestLineOfSight:
    def test_delay_at_array_center(self):
        ps = trace_geometry(None, CFG, receivers=[CFG.rx_center], max_reflections=0)
        assert len(ps) == 1
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(CFG.tx_position, CFG.rx_center)))
        assert d == pytest.approx(math.sqrt(100.0625))
        assert ps.length[0] == pytest.approx(d, rel=1e-15)
        assert ps.delay[0] * 1e9 == pytest.approx(33.37, abs=0.01)

    def test_one_path_per_antenna(self):
        ps = trace_geometry(None, CFG, max_reflections=0)
        assert np.array_equal(ps.antenna, np.arange(64))
        brute = np.linalg.norm(CFG.rx_positions() - np.asarray(CFG.tx_position), axis=1)
        np.testing.assert_allclose(ps.length, brute, rtol=1e-14)

    def test_los_jones_is_scaled_identity(self):
        ps = trace_geometry(None, CFG, max_reflections=0)
        amp = math.sqrt(1e-3) * CFG.wavelength / (4 * math.pi * ps.length)
        np.testing.assert_allclose(ps.jones[:, 0, 0], amp, rtol=1e-12)
        np.testing.assert_allclose(ps.jones[:, 1, 1], amp, rtol=1e-12)
        assert np.max(np.abs(ps.jones[:, 0, 1])) < 1e-20

    def test_array_geometry(self):
        pos = CFG.rx_positions()
        assert pos.shape == (64, 3)
        assert np.allclose(pos[:, 1], -5.0)
        assert np.allclose(pos.mean(axis=0), CFG.rx_center)
        assert np.linalg.norm(pos[1] - pos[0]) == pytest.approx(C0 / 2.8e9 / 2)


class TestImageMethod:
    def test_pec_first_order_matches_mirrored_source(self):
        cfg = SimulationConfig(wall_surfaces=("pec",) * 6)
        ps = trace_geometry(None, cfg, receivers=[cfg.rx_center], max_reflections=1)
        tx = np.asarray(cfg.tx_position)
        lo, hi = cfg.room_bounds
        expected = []
        for axis in range(3):
            for bound in (lo[axis], hi[axis]):
                img = tx.copy()
                img[axis] = 2 * bound - img[axis]
                expected.append(np.linalg.norm(img - np.asarray(cfg.rx_center)))
        got = sorted(ps.length[ps.order == 1])
        # the receiver sits on the y=-5 wall, so that wall gives no distinct bounce
        assert len(got) == 5
        for g in got:
            assert min(abs(g - e) for e in expected) < 1e-12
        # PEC: |gamma| = 1 so magnitudes follow 1/d exactly
        amp = np.abs(ps.jones[ps.order == 1]).max(axis=(1, 2))
        np.testing.assert_allclose(amp * ps.length[ps.order == 1], math.sqrt(1e-3) * cfg.wavelength / (4 * math.pi),
                                   rtol=1e-9)

    @pytest.mark.parametrize("wall", range(6))
    def test_reflection_law_against_brute_force(self, wall):
        cfg = SimulationConfig()
        rx = np.array([0.4, -2.0, 1.3])
        ps = trace_geometry(None, cfg, receivers=[rx], max_reflections=1)
        first = ps.select((ps.order == 1) & (ps.ids[:, 0] >= 0))
        tx = np.asarray(cfg.tx_position)
        lo, hi = cfg.room_bounds
        axis = wall // 2
        value = (lo if wall % 2 == 0 else hi)[axis]
        free = [a for a in range(3) if a != axis]

        def path_len(uv):
            p = np.empty(3)
            p[axis] = value
            p[free] = uv
            return np.linalg.norm(p - tx) + np.linalg.norm(rx - p)

        res = minimize(path_len, x0=[(lo[a] + hi[a]) / 2 for a in free], method="Nelder-Mead",
                       options=dict(xatol=1e-12, fatol=1e-14, maxiter=20000))
        match = [L for L in first.length if abs(L - res.fun) < 1e-7]
        assert len(match) == 1
        # reconstruct the bounce point from the image method and check the law
        img = tx.copy()
        img[axis] = 2 * value - img[axis]
        t = (value - img[axis]) / (rx[axis] - img[axis])
        p = img + t * (rx - img)
        assert np.allclose(p[free], res.x, atol=1e-5)
        n = np.zeros(3)
        n[axis] = 1.0
        k_in = (p - tx) / np.linalg.norm(p - tx)
        k_out = (rx - p) / np.linalg.norm(rx - p)
        inc = math.acos(abs(k_in @ n))
        ref = math.acos(abs(k_out @ n))
        assert abs(inc - ref) < 1e-9
        assert match[0] == pytest.approx(np.linalg.norm(img - rx), abs=1e-12)

    def test_delay_distance_consistency(self):
        ps = trace_geometry(small_scene(3), CFG, max_reflections=3)
        np.testing.assert_array_equal(ps.delay, ps.length / C0)

    def test_order_bound_and_ris_hits(self):
        ps = trace_geometry(small_scene(4), CFG, max_reflections=3)
        assert ps.order.max() <= 3
        assert np.all(np.sum(ps.ris_panel >= 0, axis=1) <= 2)
        # at most one sphere bounce per path
        assert np.all(np.sum(ps.kinds == SPHERE, axis=1) <= 1)

    def test_reciprocity(self):
        scene = small_scene(5)
        ant = CFG.rx_positions()[10]
        fwd = trace_geometry(scene, CFG, receivers=[ant], max_reflections=3)
        swapped = SimulationConfig(tx_position=tuple(ant), rx_center=CFG.tx_position)
        back = trace_geometry(scene, swapped, receivers=[CFG.tx_position], max_reflections=3)
        a, b = np.sort(fwd.length), np.sort(back.length)
        assert len(a) == len(b)
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)


class TestSpheres:
    def test_metal_sphere_blocks_los(self):
        tx, rx = np.asarray(CFG.tx_position), np.asarray(CFG.rx_center)
        mid = tuple(tx + 0.5 * (rx - tx))
        scene = scene_with((mid, 0.5, "metal"))
        ps = trace_geometry(scene, CFG, receivers=[CFG.rx_center])
        assert not np.any(ps.order == 0)
        assert np.any(np.any(ps.kinds == SPHERE, axis=1))

    def test_specular_point_on_sphere_obeys_reflection_law(self):
        scene = scene_with(((0.0, 0.0, 2.0), 0.4, "metal"))
        ps = trace_geometry(scene, CFG, receivers=[CFG.rx_center], max_reflections=1)
        single = [c for c in ps.components() if c.interactions == (("sphere", 0),)]
        assert len(single) == 1
        # recover the bounce point from the unfolded length: |tx-P| + |P-rx| = L with P on the sphere
        tx, rx, c = np.asarray(CFG.tx_position), np.asarray(CFG.rx_center), np.array([0.0, 0.0, 2.0])
        res = minimize(lambda ang: np.linalg.norm(c + 0.4 * _dir(ang) - tx) + np.linalg.norm(rx - c - 0.4 * _dir(ang)),
                       x0=[0.0, -1.0], method="Nelder-Mead", options=dict(xatol=1e-12, fatol=1e-15))
        assert single[0].path_length == pytest.approx(res.fun, abs=1e-9)

    def test_metal_reflects_more_than_wood(self):
        powers = {}
        for m in ("metal", "glass", "wood"):
            scene = scene_with(((0.0, 0.0, 2.0), 0.4, m))
            ps = trace_geometry(scene, CFG, receivers=[CFG.rx_center], max_reflections=1)
            powers[m] = ps.power[np.any(ps.kinds == SPHERE, axis=1)].sum()
        assert powers["metal"] > powers["glass"] > powers["wood"] > 0

    def test_energy_non_increasing_with_order(self):
        sums = np.zeros(5)
        counts = np.zeros(5)
        for seed in range(100):
            ps = trace_geometry(small_scene(100 + seed), CFG, max_reflections=3)
            sums += np.bincount(ps.order, weights=ps.power, minlength=5)
            counts += np.bincount(ps.order, minlength=5)
        mean = sums[:4] / counts[:4]
        assert np.all(np.diff(mean) <= 0)


def _dir(ang):
    th, ph = ang
    return np.array([math.cos(ph) * math.cos(th), math.cos(ph) * math.sin(th), math.sin(ph)])


class TestFresnel:
    def test_pec_limit(self):
        te, tm = fresnel(lookup_material("metal").complex_permittivity(2.8e9), np.array([1.0, 0.5, 0.1]))
        np.testing.assert_allclose(np.abs(te), 1, atol=1e-3)
        np.testing.assert_allclose(np.abs(tm), 1, atol=1e-2)

    def test_normal_incidence(self):
        eps = 4.0
        te, tm = fresnel(eps, np.array([1.0]))
        assert te[0] == pytest.approx(-1 / 3)
        assert tm[0] == pytest.approx(1 / 3)

    def test_brewster(self):
        eps = 6.31
        theta_b = math.atan(math.sqrt(eps))
        _, tm = fresnel(eps, np.array([math.cos(theta_b)]))
        assert abs(tm[0]) < 1e-12


class TestCodebook:
    def test_entries_and_determinism(self):
        cb = build_codebook(3, n_entries=5)
        assert len(cb) == 5
        cb2 = build_codebook(3, n_entries=5)
        for a, b in zip(cb.entries, cb2.entries):
            np.testing.assert_array_equal(a.gradients, b.gradients)
        assert not np.array_equal(cb[0].gradients, cb[1].gradients)

    def test_panels_tile_ris_walls(self):
        panels = room_panels(CFG)
        area = sum(p.size_u * p.size_v for p in panels)
        assert area == pytest.approx(2 * (10 * 4) + 2 * (6.5 * 4))
        assert len(panels) == 2 * 40 + 2 * 28

    def test_steering_into_room(self):
        cb = build_codebook(1, n_entries=2)
        normals = {0: [1, 0, 0], 1: [-1, 0, 0], 2: [0, 1, 0], 3: [0, -1, 0]}
        for p, s in zip(cb.panels, cb[0].steering):
            assert np.dot(s, normals[p.wall]) >= 0
            assert np.linalg.norm(s) == pytest.approx(1)

    def test_specular_steering_means_plain_reflector(self):
        ps = trace_geometry(small_scene(2), CFG, max_reflections=2)
        phased = apply_codebook_entry(ps, specular_entry(CFG))
        np.testing.assert_array_equal(phased.jones, ps.jones)

    def test_entry_changes_only_ris_paths(self):
        ps = trace_geometry(None, CFG, max_reflections=2)
        phased = apply_codebook_entry(ps, build_codebook(0, 1)[0])
        no_ris = np.all(ps.ris_panel < 0, axis=1)
        np.testing.assert_array_equal(phased.jones[no_ris], ps.jones[no_ris])
        np.testing.assert_allclose(np.abs(phased.jones), np.abs(ps.jones), rtol=1e-12)
        assert not np.allclose(phased.jones[~no_ris], ps.jones[~no_ris])


def one_path(length, jones, n_rx=1):
    return PathSet(np.zeros(1, np.int64), np.array([length]), np.zeros(1), np.zeros(1),
                   np.asarray(jones, complex).reshape(1, 2, 2), -np.ones((1, 4), np.int8),
                   -np.ones((1, 4), np.int32), -np.ones((1, 2), np.int32), np.zeros((1, 2, 2)), n_rx)


class TestWavefront:
    def test_empty(self):
        out = synthesize_wavefront(PathSet.empty(64), CFG, noise_seed=None)
        assert out.shape == (64, 2, 2) and np.all(out == 0)

    def test_single_path(self):
        g = 0.3 * np.exp(0.7j)
        d = 7.123
        r = synthesize_wavefront(one_path(d, [[g, 0], [0, 0]]), CFG)
        assert abs(r[0, 0, 0]) == pytest.approx(abs(g), rel=1e-14)
        expected = (-2 * math.pi * CFG.frequency * d / C0 + 0.7) % (2 * math.pi)
        assert np.angle(r[0, 0, 0]) % (2 * math.pi) == pytest.approx(expected, abs=1e-9)

    def test_half_wavelength_cancellation(self):
        lam = C0 / CFG.frequency
        assert lam == pytest.approx(0.10707, abs=1e-5)
        a = one_path(5.0, np.eye(2))
        b = one_path(5.0 + lam / 2, np.eye(2))
        both = PathSet.concat([a, b], 1)
        r = synthesize_wavefront(both, CFG)
        single = synthesize_wavefront(a, CFG)
        assert np.sum(np.abs(r) ** 2) < 1e-10 * np.sum(np.abs(single) ** 2)

    def test_noise_statistics_and_determinism(self):
        cfg = SimulationConfig(noise_variance=2.0)
        empty = PathSet.empty(64)
        samples = np.concatenate([synthesize_wavefront(empty, cfg, noise_seed=s).ravel() for s in range(200)])
        assert np.mean(np.abs(samples) ** 2) == pytest.approx(2.0, rel=0.05)
        assert abs(np.mean(samples.real * samples.imag)) < 0.05
        np.testing.assert_array_equal(synthesize_wavefront(empty, cfg, 7), synthesize_wavefront(empty, cfg, 7))

    def test_default_noise_is_20db_below_los(self):
        ps = trace_geometry(None, CFG, receivers=[CFG.rx_center], max_reflections=0)
        assert CFG.resolved_noise_variance() == pytest.approx(abs(ps.jones[0, 0, 0]) ** 2 / 100, rel=1e-12)

    def test_trace_paths_determinism(self):
        scene = small_scene(8)
        entry = build_codebook(2, 2)[1]
        a = synthesize_wavefront(trace_paths(scene, CFG, entry, max_reflections=2), CFG, noise_seed=3)
        b = synthesize_wavefront(trace_paths(scene, CFG, entry, max_reflections=2), CFG, noise_seed=3)
        assert a.tobytes() == b.tobytes()


def test_interaction_listing():
    ps = trace_geometry(small_scene(6), CFG, receivers=[CFG.rx_center], max_reflections=2)
    comps = ps.components()
    kinds = Counter(k for c in comps for k, _ in c.interactions)
    assert set(kinds) <= {"wall", "ris-panel", "sphere"}
    assert kinds["ris-panel"] > 0 and kinds["sphere"] > 0
    for c in comps:
        assert c.delay == c.path_length / C0
