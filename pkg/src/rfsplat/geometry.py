"""Closed-form geometry of sphere pairs: volumes, lens intersections,
minimum enclosing spheres and a sphere-specialised generalized IoU with
analytic gradients.

All routines work in float64.  The ``*_batch`` functions take arrays of
centers ``(..., 3)`` and radii ``(...)`` and broadcast; the scalar
functions wrap them for :class:`Sphere` objects.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError

# branch classification tolerance (m)
BRANCH_TOL = 1e-12

# branch codes returned by :func:`pair_branch`
DISJOINT, LENS, CONTAINED = 0, 1, 2

_FOUR_THIRDS_PI = 4.0 * np.pi / 3.0


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        if len(center) != 3:
            raise InvalidInputError(f"sphere center must have 3 coordinates, got {len(center)}")
        radius = float(self.radius)
        if not all(np.isfinite(center)) or not np.isfinite(radius):
            raise InvalidInputError("sphere center and radius must be finite")
        if radius <= 0:
            raise InvalidInputError(f"sphere radius must be positive, got {radius}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", radius)

    @property
    def volume(self) -> float:
        return sphere_volume(self)

    def as_array(self) -> np.ndarray:
        """``[x, y, z, r]`` as float64."""
        return np.array([*self.center, self.radius], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Sphere":
        values = np.asarray(values, dtype=np.float64)
        return cls(tuple(values[:3]), float(values[3]))


@dataclass(frozen=True)
class GiouResult:
    iou: float
    giou: float
    intersection: float
    union: float
    enclosing: float
    # d giou / d (ax, ay, az, ar, bx, by, bz, br)
    gradient: tuple
    at_boundary: bool = False

    @property
    def volumes(self):
        return self.intersection, self.union, self.enclosing


def _check_arrays(centers, radii):
    centers = np.asarray(centers, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    if centers.shape[-1:] != (3,):
        raise InvalidInputError(f"centers must have trailing dimension 3, got {centers.shape}")
    if not (np.all(np.isfinite(centers)) and np.all(np.isfinite(radii))):
        raise InvalidInputError("non-finite sphere parameters")
    if np.any(radii <= 0):
        raise InvalidInputError("sphere radii must be positive")
    return centers, radii


def sphere_volume(s: Sphere) -> float:
    r = float(s.radius) if isinstance(s, Sphere) else float(s)
    if not np.isfinite(r):
        raise InvalidInputError("non-finite radius")
    if r <= 0:
        raise InvalidInputError(f"radius must be positive, got {r}")
    return _FOUR_THIRDS_PI * r**3


def pair_branch(d, ra, rb, tol=BRANCH_TOL):
    """Classify pairs as DISJOINT, LENS or CONTAINED (vectorised)."""
    d, ra, rb = np.broadcast_arrays(np.asarray(d, float), np.asarray(ra, float), np.asarray(rb, float))
    branch = np.full(d.shape, LENS, dtype=np.int8)
    branch[d >= ra + rb - tol] = DISJOINT
    branch[d <= np.abs(ra - rb) + tol] = CONTAINED
    return branch


def _lens_volume(d, ra, rb):
    big_r = ra + rb
    delta = ra - rb
    safe_d = np.where(d > 0, d, 1.0)
    return np.pi * (big_r - d) ** 2 * (d * d + 2 * d * big_r - 3 * delta**2) / (12 * safe_d)


def _lens_partials(d, ra, rb):
    """Partials of the lens volume w.r.t. (d, ra, rb)."""
    big_r = ra + rb
    delta = ra - rb
    safe_d = np.where(d > 0, d, 1.0)
    g = (big_r - d) ** 2
    h = d * d + 2 * d * big_r - 3 * delta**2
    dv_dd = np.pi / 12 * ((-2 * (big_r - d) * h + g * (2 * d + 2 * big_r)) / safe_d - g * h / safe_d**2)
    dv_dbig = np.pi / 12 * (2 * (big_r - d) * h + g * 2 * d) / safe_d
    dv_ddelta = np.pi / 12 * (-6 * g * delta) / safe_d
    return dv_dd, dv_dbig + dv_ddelta, dv_dbig - dv_ddelta


def intersection_volume_batch(ca, ra, cb, rb):
    ca, ra = _check_arrays(ca, ra)
    cb, rb = _check_arrays(cb, rb)
    d = np.linalg.norm(ca - cb, axis=-1)
    branch = pair_branch(d, ra, rb)
    vol_small = _FOUR_THIRDS_PI * np.minimum(ra, rb) ** 3
    lens = _lens_volume(d, ra, rb)
    return np.where(branch == DISJOINT, 0.0, np.where(branch == CONTAINED, vol_small, lens))


def intersection_volume(a: Sphere, b: Sphere) -> float:
    return float(intersection_volume_batch(a.center, a.radius, b.center, b.radius))


def enclosing_batch(ca, ra, cb, rb):
    """Minimum enclosing sphere of each pair; returns ``(centers, radii)``."""
    ca, ra = _check_arrays(ca, ra)
    cb, rb = _check_arrays(cb, rb)
    diff = cb - ca
    d = np.linalg.norm(diff, axis=-1)
    contained = d <= np.abs(ra - rb) + BRANCH_TOL
    big_radius = (d + ra + rb) / 2
    unit = diff / np.where(d > 0, d, 1.0)[..., None]
    center = ca + unit * (big_radius - ra)[..., None]
    a_wins = (ra >= rb)[..., None]
    center = np.where(contained[..., None], np.where(a_wins, ca, cb), center)
    radius = np.where(contained, np.maximum(ra, rb), big_radius)
    return center, radius


def min_enclosing_sphere(a: Sphere, b: Sphere) -> Sphere:
    center, radius = enclosing_batch(a.center, a.radius, b.center, b.radius)
    return Sphere(tuple(center), float(radius))


def giou_batch(ca, ra, cb, rb, with_grad=True):
    """Vectorised sphere GIoU.

    Returns a dict with ``iou``, ``giou``, ``intersection``, ``union``,
    ``enclosing``, ``branch``, ``at_boundary`` and, when requested,
    ``grad`` of shape ``(..., 8)`` ordered (ax, ay, az, ar, bx, by, bz, br).
    """
    ca, ra = _check_arrays(ca, ra)
    cb, rb = _check_arrays(cb, rb)
    diff = ca - cb
    d = np.linalg.norm(diff, axis=-1)
    d, ra, rb = np.broadcast_arrays(d, ra, rb)
    branch = pair_branch(d, ra, rb)

    va = _FOUR_THIRDS_PI * ra**3
    vb = _FOUR_THIRDS_PI * rb**3
    a_small = ra <= rb
    inter = np.where(
        branch == DISJOINT, 0.0,
        np.where(branch == CONTAINED, np.where(a_small, va, vb), _lens_volume(d, ra, rb)),
    )
    contained = branch == CONTAINED
    # contained: the union is the larger ball, bit-equal to the enclosing volume
    union = np.where(contained, np.maximum(va, vb), va + vb - inter)
    enc_r = np.where(contained, np.maximum(ra, rb), (d + ra + rb) / 2)
    enc = _FOUR_THIRDS_PI * enc_r**3
    iou = inter / union
    giou = iou - (enc - union) / enc

    at_boundary = (
        (np.abs(d - (ra + rb)) <= BRANCH_TOL)
        | (np.abs(d - np.abs(ra - rb)) <= BRANCH_TOL)
        | (d <= BRANCH_TOL)
    )
    out = dict(iou=iou, giou=giou, intersection=inter, union=union, enclosing=enc,
               branch=branch, at_boundary=at_boundary)
    if not with_grad:
        return out

    zero = np.zeros_like(d)
    # intersection partials w.r.t. (d, ra, rb)
    l_dd, l_dra, l_drb = _lens_partials(d, ra, rb)
    dsmall_a = np.where(a_small, 4 * np.pi * ra**2, 0.0)
    dsmall_b = np.where(a_small, 0.0, 4 * np.pi * rb**2)
    di_dd = np.select([branch == LENS], [l_dd], zero)
    di_dra = np.select([branch == LENS, contained], [l_dra, dsmall_a], zero)
    di_drb = np.select([branch == LENS, contained], [l_drb, dsmall_b], zero)

    dva = 4 * np.pi * ra**2
    dvb = 4 * np.pi * rb**2
    du_dd = -di_dd
    du_dra = dva - di_dra
    du_drb = dvb - di_drb

    half_sq = 2 * np.pi * enc_r**2  # d/dx of (4/3)pi((d+ra+rb)/2)^3
    a_big = ra >= rb
    dc_dd = np.where(contained, 0.0, half_sq)
    dc_dra = np.where(contained, np.where(a_big, 4 * np.pi * ra**2, 0.0), half_sq)
    dc_drb = np.where(contained, np.where(a_big, 0.0, 4 * np.pi * rb**2), half_sq)

    def dgiou(di, du, dc):
        return (di * union - inter * du) / union**2 + (du * enc - union * dc) / enc**2

    g_d = dgiou(di_dd, du_dd, dc_dd)
    g_ra = dgiou(di_dra, du_dra, dc_dra)
    g_rb = dgiou(di_drb, du_drb, dc_drb)

    safe_d = np.where(d > BRANCH_TOL, d, 1.0)
    unit = np.where((d > BRANCH_TOL)[..., None], diff / safe_d[..., None], 0.0)
    grad = np.concatenate(
        [g_d[..., None] * unit, g_ra[..., None], -g_d[..., None] * unit, g_rb[..., None]],
        axis=-1,
    )
    out["grad"] = grad
    return out


def giou(a: Sphere, b: Sphere) -> GiouResult:
    r = giou_batch(a.center, a.radius, b.center, b.radius)
    return GiouResult(
        iou=float(r["iou"]),
        giou=float(r["giou"]),
        intersection=float(r["intersection"]),
        union=float(r["union"]),
        enclosing=float(r["enclosing"]),
        gradient=tuple(float(g) for g in r["grad"]),
        at_boundary=bool(r["at_boundary"]),
    )


def giou_loss(a: Sphere, b: Sphere):
    """``1 - giou`` and its gradient (same parameter ordering as :func:`giou`)."""
    r = giou(a, b)
    return 1.0 - r.giou, tuple(-g for g in r.gradient)


def monte_carlo_intersection(a: Sphere, b: Sphere, n_samples=1_000_000, rng=None, chunk=1_000_000):
    """Box-sampling estimate of ``|A ∩ B|``; returns ``(estimate, std_error)``.

    Independent of the closed form: counts uniform samples of the joint
    bounding box that fall inside both spheres.
    """
    rng = np.random.default_rng(rng)
    ca, cb = np.asarray(a.center), np.asarray(b.center)
    lo = np.minimum(ca - a.radius, cb - b.radius)
    hi = np.maximum(ca + a.radius, cb + b.radius)
    box = float(np.prod(hi - lo))
    hits = 0
    remaining = int(n_samples)
    while remaining > 0:
        m = min(chunk, remaining)
        p = rng.uniform(lo, hi, size=(m, 3))
        inside = (np.sum((p - ca) ** 2, axis=1) <= a.radius**2) & (np.sum((p - cb) ** 2, axis=1) <= b.radius**2)
        hits += int(np.count_nonzero(inside))
        remaining -= m
    frac = hits / n_samples
    return frac * box, box * np.sqrt(frac * (1 - frac) / n_samples)
