import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfsplat.exceptions import InvalidInputError
from rfsplat.geometry import (
    Sphere,
    giou,
    giou_batch,
    giou_loss,
    intersection_volume,
    min_enclosing_sphere,
    monte_carlo_intersection,
    sphere_volume,
)


def unit(center=(0, 0, 0), r=1.0):
    return Sphere(center, r)


class TestVolume:
    def test_unit_sphere(self):
        assert sphere_volume(unit()) == pytest.approx(4 * math.pi / 3, rel=1e-15)

    def test_quarter_radius(self):
        # frozen from a 4e6-sample box estimate: 0.065494 +- 0.00003
        assert sphere_volume(unit(r=0.25)) == pytest.approx(0.0654498, abs=5e-8)

    def test_cubic_scaling(self):
        assert sphere_volume(unit(r=0.5)) == pytest.approx(8 * sphere_volume(unit(r=0.25)), rel=1e-15)

    @pytest.mark.parametrize("r", [0.0, -1.0, float("nan"), float("inf")])
    def test_invalid_radius(self, r):
        with pytest.raises(InvalidInputError):
            Sphere((0, 0, 0), r)
        with pytest.raises(InvalidInputError):
            sphere_volume(r)


class TestIntersection:
    def test_identical(self):
        assert intersection_volume(unit(), unit()) == pytest.approx(4 * math.pi / 3)

    def test_unit_lens(self):
        got = intersection_volume(unit(), unit((1, 0, 0)))
        assert got == pytest.approx(5 * math.pi / 12, rel=1e-14)
        # Monte Carlo oracle agrees to 3 significant digits
        est, _ = monte_carlo_intersection(unit(), unit((1, 0, 0)), 2_000_000, rng=1)
        assert round(est, 2) == round(got, 2)

    def test_tangent(self):
        assert intersection_volume(unit(), unit((2, 0, 0))) == 0.0

    def test_contained(self):
        small = Sphere((0.5, 0, 0), 0.3)
        assert intersection_volume(unit(), small) == pytest.approx(sphere_volume(small))


class TestEnclosing:
    def test_containment(self):
        a = Sphere((0, 0, 0), 3)
        assert min_enclosing_sphere(a, Sphere((1, 0, 0), 1)) == a

    def test_separated(self):
        a, b = unit(), unit((3, 0, 0))
        c = min_enclosing_sphere(a, b)
        assert c.center == pytest.approx((1.5, 0, 0))
        assert c.radius == pytest.approx(2.5)
        # extreme surface points sit exactly on the enclosing surface
        for p in [(-1, 0, 0), (4, 0, 0)]:
            assert np.linalg.norm(np.subtract(p, c.center)) == pytest.approx(c.radius)
        rng = np.random.default_rng(0)
        for s in (a, b):
            v = rng.normal(size=(20000, 3))
            v *= (s.radius * rng.uniform(size=(20000, 1)) ** (1 / 3)) / np.linalg.norm(v, axis=1, keepdims=True)
            pts = v + np.asarray(s.center)
            assert np.all(np.linalg.norm(pts - np.asarray(c.center), axis=1) <= c.radius + 1e-12)

    def test_identity(self):
        assert min_enclosing_sphere(unit(), unit()) == unit()


class TestGiou:
    def test_identical(self):
        r = giou(unit(), unit())
        assert r.iou == pytest.approx(1.0) and r.giou == pytest.approx(1.0)

    def test_half_overlap(self):
        r = giou(unit(), unit((1, 0, 0)))
        assert r.iou == pytest.approx(5 / 27, rel=1e-13)
        assert r.giou == pytest.approx(5 / 27 - 0.5, rel=1e-13)
        assert r.enclosing == pytest.approx(4.5 * math.pi)
        assert r.union == pytest.approx(9 * math.pi / 4)

    def test_disjoint(self):
        r = giou(unit(), unit((4, 0, 0)))
        assert r.iou == 0
        assert r.giou == pytest.approx(-25 / 27, rel=1e-13)

    def test_loss_values(self):
        assert giou_loss(unit(), unit())[0] == pytest.approx(0.0, abs=1e-15)
        assert giou_loss(unit(), unit((1, 0, 0)))[0] == pytest.approx(1 + 0.5 - 5 / 27, rel=1e-13)
        losses = [giou_loss(unit(), unit((d, 0, 0)))[0] for d in [2, 3, 5, 10, 100, 1e4]]
        assert all(np.diff(losses) > 0)
        assert losses[-1] < 2 and losses[-1] > 1.999

    def test_loss_gradient_is_negated(self):
        a, b = unit(), Sphere((0.7, 0.2, -0.1), 0.8)
        _, g = giou_loss(a, b)
        assert g == pytest.approx(tuple(-x for x in giou(a, b).gradient))

    def test_boundary_flag(self):
        assert giou(unit(), unit((2, 0, 0))).at_boundary
        assert giou(unit(), unit()).at_boundary
        assert not giou(unit(), unit((1, 0, 0))).at_boundary

    def test_contained_giou_equals_iou(self):
        r = giou(Sphere((0, 0, 0), 2), Sphere((0.5, 0.1, 0), 0.7))
        assert r.giou == pytest.approx(r.iou, rel=1e-14)

    def test_coincident_centers_gradient_finite(self):
        r = giou(unit(), unit())
        assert np.all(np.isfinite(r.gradient))
        assert r.gradient[:3] == (0.0, 0.0, 0.0)


def random_pairs(rng, n):
    ca = rng.uniform(-2, 2, size=(n, 3))
    cb = rng.uniform(-2, 2, size=(n, 3))
    ra = rng.uniform(0.1, 1.5, size=n)
    rb = rng.uniform(0.1, 1.5, size=n)
    return ca, ra, cb, rb


def finite_difference(ca, ra, cb, rb, h=1e-5):
    params = np.concatenate([ca, [ra], cb, [rb]])
    grad = np.empty(8)
    for i in range(8):
        up, dn = params.copy(), params.copy()
        up[i] += h
        dn[i] -= h
        f = [giou_batch(p[:3], p[3], p[4:7], p[7], with_grad=False)["giou"] for p in (up, dn)]
        grad[i] = (f[0] - f[1]) / (2 * h)
    return grad


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 100:
        ca, ra, cb, rb = random_pairs(rng, 1)
        d = np.linalg.norm(ca - cb)
        # stay clear of branch seams so the central difference does not straddle one
        if min(abs(d - ra - rb), abs(d - abs(ra - rb)), d)[0] < 1e-3:
            continue
        g = giou_batch(ca[0], ra[0], cb[0], rb[0])["grad"]
        fd = finite_difference(ca[0], ra[0], cb[0], rb[0])
        scale = np.maximum(np.abs(fd), 1e-8)
        mask = np.abs(fd) > 1e-10
        assert np.all(np.abs(g - fd)[mask] / scale[mask] < 1e-4)
        assert np.all(np.abs(g[~mask]) < 1e-9)
        checked += 1


def test_monte_carlo_agreement_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(20):
        ca, ra, cb, rb = random_pairs(rng, 1)
        cb = ca + (cb - ca) * 0.5  # bias towards overlap
        a, b = Sphere(ca[0], ra[0]), Sphere(cb[0], rb[0])
        est, se = monte_carlo_intersection(a, b, 200_000, rng=rng)
        assert abs(est - intersection_volume(a, b)) <= 3 * se + 1e-12


coord = st.floats(-5, 5, allow_nan=False)
radius = st.floats(0.05, 3, allow_nan=False)
sphere = st.builds(lambda x, y, z, r: Sphere((x, y, z), r), coord, coord, coord, radius)


@settings(max_examples=300, deadline=None, derandomize=True)
@given(sphere, sphere)
def test_volume_invariants(a, b):
    r = giou(a, b)
    va, vb = sphere_volume(a), sphere_volume(b)
    assert 0 <= r.intersection <= min(va, vb) * (1 + 1e-12)
    assert r.union == pytest.approx(va + vb - r.intersection, rel=1e-12)
    assert r.enclosing >= r.union * (1 - 1e-12)
    assert -1 < r.giou <= 1 + 1e-12
    assert r.giou <= r.iou + 1e-12


@settings(max_examples=200, deadline=None, derandomize=True)
@given(sphere, sphere, st.floats(0.01, 100), st.integers(0, 2**32 - 1))
def test_rigid_and_scale_invariance(a, b, k, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    t = rng.uniform(-10, 10, size=3)
    move = lambda s: Sphere(q @ np.asarray(s.center) + t, s.radius)
    base = giou(a, b)
    moved = giou(move(a), move(b))
    # rigid motions perturb the center distance by rounding only
    assert moved.iou == pytest.approx(base.iou, rel=1e-12, abs=1e-12)
    assert moved.giou == pytest.approx(base.giou, rel=1e-12, abs=1e-12)
    scaled = giou(Sphere(np.asarray(a.center) * k, a.radius * k), Sphere(np.asarray(b.center) * k, b.radius * k))
    assert scaled.iou == pytest.approx(base.iou, rel=1e-10, abs=1e-12)
    assert scaled.giou == pytest.approx(base.giou, rel=1e-10, abs=1e-12)
