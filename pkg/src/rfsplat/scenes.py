"""Ground-truth scene generation: material-labelled spheres placed by
Bridson's Poisson-disk sampler inside an axis-aligned box."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, PlacementInfeasibleError
from .geometry import Sphere

EPS0 = 8.8541878128e-12

# name -> (relative permittivity, conductivity S/m)
_MATERIAL_TABLE = (
    ("brick", 3.91, 0.028),
    ("wood", 1.99, 0.014),
    ("glass", 6.31, 0.014),
    ("ceiling-board", 1.48, 0.003),
    ("metal", 1.00, 1e7),
)

DEFAULT_BOUNDS = ((-1.5, 1.5), (-3.5, 3.5), (1.75, 2.25))
DEFAULT_RADIUS_RANGE = (0.25, 0.5)


@dataclass(frozen=True)
class MaterialSpec:
    name: str
    rel_permittivity: float
    conductivity: float
    class_index: int

    def __post_init__(self):
        if self.rel_permittivity < 1:
            raise InvalidInputError(f"{self.name}: relative permittivity must be >= 1")
        if self.conductivity < 0:
            raise InvalidInputError(f"{self.name}: conductivity must be >= 0")

    def complex_permittivity(self, frequency: float) -> complex:
        """eps' - j eps'' with eps'' = sigma / (2 pi f eps0)."""
        return complex(self.rel_permittivity, -self.conductivity / (2 * math.pi * frequency * EPS0))

    def to_dict(self):
        return dict(name=self.name, rel_permittivity=self.rel_permittivity,
                    conductivity=self.conductivity, class_index=self.class_index)


def material_table_default():
    return tuple(MaterialSpec(n, e, s, i + 1) for i, (n, e, s) in enumerate(_MATERIAL_TABLE))


def material_table(names=None):
    """Materials by name, re-indexed densely ``1..L`` in the given order."""
    if names is None:
        return material_table_default()
    known = {m.name: m for m in material_table_default()}
    out = []
    for i, name in enumerate(names):
        if name not in known:
            raise InvalidInputError(f"unknown material {name!r}; known: {sorted(known)}")
        m = known[name]
        out.append(MaterialSpec(m.name, m.rel_permittivity, m.conductivity, i + 1))
    if len({m.name for m in out}) != len(out):
        raise InvalidInputError("duplicate material names")
    return tuple(out)


def lookup_material(name, table=None):
    for m in table or material_table_default():
        if m.name == name:
            return m
    raise KeyError(name)


@dataclass(frozen=True)
class SpherePrimitive:
    sphere: Sphere
    material: MaterialSpec

    @property
    def label(self) -> int:
        return self.material.class_index


@dataclass(frozen=True)
class SceneParams:
    n_spheres: int = 12
    bounds: tuple = DEFAULT_BOUNDS
    radius_range: tuple = DEFAULT_RADIUS_RANGE
    min_separation: float = 1.0
    materials: tuple = field(default_factory=material_table_default)
    candidates: int = 30

    def __post_init__(self):
        bounds = tuple(tuple(float(v) for v in b) for b in self.bounds)
        if len(bounds) != 3 or any(len(b) != 2 or b[0] > b[1] for b in bounds):
            raise InvalidInputError(f"bounds must be three (lo, hi) pairs, got {self.bounds}")
        object.__setattr__(self, "bounds", bounds)
        lo, hi = (float(v) for v in self.radius_range)
        if not 0 < lo <= hi:
            raise InvalidInputError(f"invalid radius range {self.radius_range}")
        object.__setattr__(self, "radius_range", (lo, hi))
        if self.n_spheres < 1:
            raise InvalidInputError("n_spheres must be >= 1")
        if self.min_separation <= 0:
            raise InvalidInputError("min_separation must be positive")
        if not self.materials:
            raise InvalidInputError("material table is empty")
        indices = sorted(m.class_index for m in self.materials)
        if indices != list(range(1, len(indices) + 1)):
            raise InvalidInputError("material class indices must be dense 1..L")


@dataclass(frozen=True)
class SceneRecord:
    spheres: tuple
    rng_seed: int
    bounds: tuple
    min_separation: float

    @property
    def n_spheres(self):
        return len(self.spheres)

    def geometry(self) -> np.ndarray:
        """``(S, 4)`` array of ``[x, y, z, r]``."""
        if not self.spheres:
            return np.zeros((0, 4))
        return np.array([p.sphere.as_array() for p in self.spheres])

    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.spheres], dtype=np.int64)

    def to_dict(self):
        return dict(
            rng_seed=int(self.rng_seed),
            bounds=[list(b) for b in self.bounds],
            min_separation=self.min_separation,
            spheres=[dict(center=list(p.sphere.center), radius=p.sphere.radius,
                          material=p.material.to_dict()) for p in self.spheres],
        )

    @classmethod
    def from_dict(cls, d):
        spheres = tuple(
            SpherePrimitive(Sphere(tuple(s["center"]), s["radius"]), MaterialSpec(**s["material"]))
            for s in d["spheres"]
        )
        return cls(spheres, int(d["rng_seed"]), tuple(tuple(b) for b in d["bounds"]), d["min_separation"])


def scene_seed(master_seed: int, index: int) -> int:
    """Independent 64-bit seed for scene ``index`` of a run."""
    state = np.random.SeedSequence([int(master_seed) & (2**64 - 1), int(index)]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def _shell_candidates(base, r, lo, hi, k, rng, max_rounds=64):
    """Up to ``k`` in-box points drawn uniformly from the shell [r, 2r] around ``base``.

    Out-of-box draws are discarded and do not count towards ``k``; in thin
    slabs most of the shell lies outside the box.
    """
    out = []
    for _ in range(max_rounds):
        dirs = rng.normal(size=(4 * k, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cand = base + dirs * (r * np.cbrt(1 + 7 * rng.uniform(size=4 * k)))[:, None]
        out.append(cand[np.all((cand >= lo) & (cand <= hi), axis=1)])
        if sum(len(c) for c in out) >= k:
            break
    return np.concatenate(out)[:k]


def bridson_sample(bounds, min_separation, rng, k=30):
    """Maximal Poisson-disk point set in a 3D box (Bridson, 2007).

    Candidates are drawn uniformly in the spherical shell ``[r, 2r]`` around
    an active point; a point is retired after ``k`` failed in-box candidates.
    Returns points in insertion order.
    """
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    r = float(min_separation)
    r2 = r * r
    points = np.empty((16, 3))
    points[0] = rng.uniform(lo, hi)
    n = 1
    active = [0]
    while active:
        slot = int(rng.integers(len(active)))
        cand = _shell_candidates(points[active[slot]], r, lo, hi, k, rng)
        if len(cand):
            d2 = np.sum((cand[:, None, :] - points[None, :n, :]) ** 2, axis=-1)
            ok = np.flatnonzero(np.all(d2 >= r2, axis=1))
        else:
            ok = ()
        if len(ok):
            if n == len(points):
                points = np.concatenate([points, np.empty_like(points)])
            points[n] = cand[ok[0]]
            active.append(n)
            n += 1
        else:
            active[slot] = active[-1]
            active.pop()
    return points[:n].copy()


def generate_scene(seed: int, params: SceneParams | None = None) -> SceneRecord:
    """Draw one scene.

    Bridson's sampler runs to completion over the whole box and the
    ``n_spheres`` centers are then a uniform random subset of the maximal
    set, so the chosen centers are not clustered around the seed point.
    """
    params = params or SceneParams()
    rng = np.random.default_rng(int(seed))
    points = bridson_sample(params.bounds, params.min_separation, rng, params.candidates)
    if len(points) < params.n_spheres:
        raise PlacementInfeasibleError(
            f"Poisson-disk sampling placed {len(points)} < {params.n_spheres} centers "
            f"(separation {params.min_separation} m); retry with another seed"
        )
    chosen = points[np.sort(rng.choice(len(points), size=params.n_spheres, replace=False))]
    lo, hi = params.radius_range
    radii = rng.uniform(lo, hi, size=params.n_spheres)
    mat_idx = rng.integers(len(params.materials), size=params.n_spheres)
    spheres = tuple(
        SpherePrimitive(Sphere(tuple(c), float(r)), params.materials[int(m)])
        for c, r, m in zip(chosen, radii, mat_idx)
    )
    return SceneRecord(spheres, int(seed), params.bounds, float(params.min_separation))
