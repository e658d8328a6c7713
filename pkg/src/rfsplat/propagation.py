"""Image-method ray tracer for a rectangular room with RIS-coated walls.

Paths are specular: wall and RIS-panel bounces are enumerated with
mirrored source images, and at most one bounce per path lands on a sphere
(at its geometric-optics specular point).  Every path carries a 2x2 Jones
matrix built from free-space spreading, Fresnel coefficients in the local
TE/TM frame, RIS panel phases and the sphere divergence factor.

Geometry does not depend on the RIS configuration, so tracing is split in
two: :func:`trace_geometry` does the expensive enumeration once per scene,
and :func:`apply_codebook_entry` multiplies in the panel phases of one
codebook entry.  :func:`trace_paths` chains both.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .exceptions import InvalidInputError
from .scenes import EPS0, MaterialSpec, SceneRecord, lookup_material

C0 = 299_792_458.0

# interaction kinds
WALL, RIS_PANEL, SPHERE = 0, 1, 2
KIND_NAMES = {WALL: "wall", RIS_PANEL: "ris-panel", SPHERE: "sphere"}

_T_EPS = 1e-9
_POS_TOL = 1e-9


@dataclass(frozen=True)
class SimulationConfig:
    room_size: tuple = (6.5, 10.0, 4.0)
    frequency: float = 2.8e9
    tx_position: tuple = (2.75, 4.5, 3.5)
    tx_power_dbm: float = 0.0
    rx_center: tuple = (0.0, -5.0, 2.0)
    rx_shape: tuple = (8, 8)
    rx_pitch: float | None = None
    max_reflections: int = 4
    max_ris_hits: int = 2
    noise_variance: float | None = None
    snr_db: float = 20.0
    # surface treatment per wall: "ris", "pec" or a material name
    wall_surfaces: tuple = ("ris", "ris", "ris", "ris", "brick", "ceiling-board")
    panel_size: float = 1.0

    def __post_init__(self):
        if len(self.room_size) != 3 or min(self.room_size) <= 0:
            raise InvalidInputError(f"invalid room size {self.room_size}")
        if self.frequency <= 0:
            raise InvalidInputError("frequency must be positive")
        if self.max_reflections < 1:
            raise InvalidInputError("max_reflections must be >= 1")
        if self.max_ris_hits < 0:
            raise InvalidInputError("max_ris_hits must be >= 0")
        if len(self.wall_surfaces) != 6:
            raise InvalidInputError("wall_surfaces needs one entry per wall (6)")
        for s in self.wall_surfaces:
            if s not in ("ris", "pec"):
                lookup_material(s)
        lo, hi = self.room_bounds
        for name, p in (("tx_position", self.tx_position), ("rx_center", self.rx_center)):
            p = np.asarray(p, float)
            if p.shape != (3,) or np.any(p < lo - _POS_TOL) or np.any(p > hi + _POS_TOL):
                raise InvalidInputError(f"{name} {tuple(p)} outside the room")
        if np.any(self.rx_positions() < lo - _POS_TOL) or np.any(self.rx_positions() > hi + _POS_TOL):
            raise InvalidInputError("receiver array extends outside the room")

    @property
    def wavelength(self) -> float:
        return C0 / self.frequency

    @property
    def wavenumber(self) -> float:
        return 2 * math.pi / self.wavelength

    @property
    def room_bounds(self):
        size = np.asarray(self.room_size, float)
        lo = np.array([-size[0] / 2, -size[1] / 2, 0.0])
        return lo, lo + size

    @property
    def tx_power_w(self) -> float:
        return 10 ** (self.tx_power_dbm / 10) * 1e-3

    @property
    def n_rx(self) -> int:
        return int(self.rx_shape[0] * self.rx_shape[1])

    @property
    def pitch(self) -> float:
        return self.wavelength / 2 if self.rx_pitch is None else float(self.rx_pitch)

    def rx_positions(self) -> np.ndarray:
        """Antenna positions ``(N_r, 3)`` in row-major (row, col) order.

        The array lies in the plane of the wall the center sits on (the
        x-z plane when it is not on a wall); rows run along the vertical.
        """
        center = np.asarray(self.rx_center, float)
        lo, hi = self.room_bounds
        on_wall = [a for a in range(2) if min(abs(center[a] - lo[a]), abs(center[a] - hi[a])) < _POS_TOL]
        horiz = np.array([0.0, 1.0, 0.0]) if on_wall == [0] else np.array([1.0, 0.0, 0.0])
        vert = np.array([0.0, 0.0, 1.0])
        rows, cols = self.rx_shape
        r_off = (np.arange(rows) - (rows - 1) / 2) * self.pitch
        c_off = (np.arange(cols) - (cols - 1) / 2) * self.pitch
        rr, cc = np.meshgrid(r_off, c_off, indexing="ij")
        return center + rr.reshape(-1, 1) * vert + cc.reshape(-1, 1) * horiz

    def resolved_noise_variance(self) -> float:
        """Explicit variance, else the value giving ``snr_db`` on the LoS to ``rx_center``."""
        if self.noise_variance is not None:
            return float(self.noise_variance)
        d = float(np.linalg.norm(np.subtract(self.rx_center, self.tx_position)))
        los_power = self.tx_power_w * (self.wavelength / (4 * math.pi * d)) ** 2
        return los_power / 10 ** (self.snr_db / 10)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


# ----------------------------------------------------------------------------
# room walls and RIS panels

def _wall_planes(config):
    lo, hi = config.room_bounds
    axis = np.array([0, 0, 1, 1, 2, 2])
    value = np.array([lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]])
    normal = np.zeros((6, 3))
    normal[np.arange(6), axis] = [1, -1, 1, -1, 1, -1]
    return axis, value, normal


@dataclass(frozen=True)
class Panel:
    wall: int
    origin: np.ndarray  # panel corner (min u, min v)
    u_axis: int
    v_axis: int
    size_u: float
    size_v: float

    @property
    def center(self):
        c = self.origin.copy()
        c[self.u_axis] += self.size_u / 2
        c[self.v_axis] += self.size_v / 2
        return c


def _tangent_axes(wall_axis):
    return [a for a in range(3) if a != wall_axis]


def room_panels(config):
    """1 m panels tiling every RIS wall from its low corner; the last row or
    column of a wall is clipped to the wall edge."""
    axis, value, _ = _wall_planes(config)
    lo, hi = config.room_bounds
    panels = []
    for w in range(6):
        if config.wall_surfaces[w] != "ris":
            continue
        ua, va = _tangent_axes(axis[w])
        us = np.arange(lo[ua], hi[ua] - 1e-9, config.panel_size)
        vs = np.arange(lo[va], hi[va] - 1e-9, config.panel_size)
        for u0 in us:
            for v0 in vs:
                origin = np.zeros(3)
                origin[axis[w]] = value[w]
                origin[ua], origin[va] = u0, v0
                panels.append(Panel(w, origin, ua, va,
                                    min(config.panel_size, hi[ua] - u0),
                                    min(config.panel_size, hi[va] - v0)))
    return tuple(panels)


def _panel_index(config):
    """Per-wall lookup ``(first_panel_id, n_u, n_v)`` for RIS walls."""
    axis, _, _ = _wall_planes(config)
    lo, hi = config.room_bounds
    table = {}
    first = 0
    for w in range(6):
        if config.wall_surfaces[w] != "ris":
            continue
        ua, va = _tangent_axes(axis[w])
        nu = int(math.ceil((hi[ua] - lo[ua]) / config.panel_size - 1e-9))
        nv = int(math.ceil((hi[va] - lo[va]) / config.panel_size - 1e-9))
        table[w] = (first, nu, nv)
        first += nu * nv
    return table


@dataclass(frozen=True)
class CodebookEntry:
    """One RIS configuration: per-panel steering directions and the linear
    phase gradients (rad/m, along the panel's u and v axes) realising them."""

    index: int
    steering: np.ndarray  # (n_panels, 3)
    gradients: np.ndarray  # (n_panels, 2)


@dataclass(frozen=True)
class RISCodebook:
    panels: tuple
    entries: tuple
    seed: int

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


def _hemisphere_directions(normals, rng):
    """Uniform directions on the hemispheres around ``normals``."""
    v = rng.normal(size=normals.shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    flip = np.sum(v * normals, axis=1) < 0
    v[flip] *= -1
    return v


def steering_gradients(panels, steering, config):
    """Phase gradients turning the specular reflection of the Tx ray at each
    panel center into the requested steering direction."""
    _, _, normals = _wall_planes(config)
    tx = np.asarray(config.tx_position, float)
    out = np.zeros((len(panels), 2))
    for i, p in enumerate(panels):
        n = normals[p.wall]
        k_in = p.center - tx
        k_in /= np.linalg.norm(k_in)
        spec = k_in - 2 * np.dot(k_in, n) * n
        diff = spec - steering[i]
        out[i] = config.wavenumber * diff[[p.u_axis, p.v_axis]]
    return out


def build_codebook(seed, n_entries=5, realizations_per_panel=5, config=None) -> RISCodebook:
    """Random steering codebook.

    Every panel gets a pool of ``realizations_per_panel`` directions drawn
    uniformly over the hemisphere facing into the room; each entry picks one
    pool member per panel independently.
    """
    if n_entries < 1:
        raise InvalidInputError("codebook needs at least one entry")
    if realizations_per_panel < 1:
        raise InvalidInputError("realizations_per_panel must be >= 1")
    config = config or SimulationConfig()
    panels = room_panels(config)
    rng = np.random.default_rng(int(seed))
    _, _, normals = _wall_planes(config)
    panel_normals = np.array([normals[p.wall] for p in panels]).reshape(-1, 3)
    pool = np.stack([_hemisphere_directions(panel_normals, rng) for _ in range(realizations_per_panel)], axis=1)
    entries = []
    for c in range(n_entries):
        pick = rng.integers(realizations_per_panel, size=len(panels))
        steering = pool[np.arange(len(panels)), pick]
        entries.append(CodebookEntry(c, steering, steering_gradients(panels, steering, config)))
    return RISCodebook(panels, tuple(entries), int(seed))


def specular_entry(config=None, index=0) -> CodebookEntry:
    """Entry whose panels all steer specularly (zero phase gradients)."""
    config = config or SimulationConfig()
    panels = room_panels(config)
    return CodebookEntry(index, np.zeros((len(panels), 3)), np.zeros((len(panels), 2)))


# ----------------------------------------------------------------------------
# path containers

@dataclass(frozen=True)
class PathComponent:
    rx_antenna: int
    delay: float
    azimuth: float
    elevation: float
    jones: np.ndarray  # (2, 2) complex, [p_rx, q_tx], index 0 = h, 1 = v
    path_length: float
    interactions: tuple = ()

    @property
    def power(self) -> float:
        """Received power with both transmit polarizations excited."""
        return float(np.sum(np.abs(self.jones) ** 2))

    def response(self, wavelength) -> np.ndarray:
        return self.jones * np.exp(-2j * math.pi * self.path_length / wavelength)


@dataclass
class PathSet:
    """Struct-of-arrays container for every path of one scene.

    Rows are in canonical order: by antenna, then enumeration order.
    ``kinds``/``ids`` hold the interaction sequence padded with -1;
    ``ris_panel``/``ris_offset`` record up to ``max_ris_hits`` panel hits
    (panel id, hit offset from panel center along u/v) so codebook phases
    can be applied after tracing.
    """

    antenna: np.ndarray
    length: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    jones: np.ndarray
    kinds: np.ndarray
    ids: np.ndarray
    ris_panel: np.ndarray
    ris_offset: np.ndarray
    n_rx: int
    entry_index: int | None = None

    def __len__(self):
        return len(self.antenna)

    @property
    def delay(self):
        return self.length / C0

    @property
    def order(self):
        return np.sum(self.kinds >= 0, axis=1)

    @property
    def power(self):
        return np.sum(np.abs(self.jones) ** 2, axis=(1, 2))

    def select(self, mask) -> "PathSet":
        return replace(self, **{k: getattr(self, k)[mask] for k in _ROW_FIELDS})

    def for_antenna(self, n) -> "PathSet":
        return self.select(self.antenna == n)

    def components(self, antenna=None):
        rows = range(len(self)) if antenna is None else np.flatnonzero(self.antenna == antenna)
        out = []
        for i in rows:
            inter = tuple(
                (KIND_NAMES[int(k)], int(j)) for k, j in zip(self.kinds[i], self.ids[i]) if k >= 0
            )
            out.append(PathComponent(int(self.antenna[i]), float(self.length[i] / C0), float(self.azimuth[i]),
                                     float(self.elevation[i]), self.jones[i].copy(), float(self.length[i]), inter))
        return out

    @classmethod
    def empty(cls, n_rx, max_order=4, max_ris=2):
        return cls(np.zeros(0, np.int64), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, 2, 2), complex),
                   np.zeros((0, max_order), np.int8), np.zeros((0, max_order), np.int32),
                   np.zeros((0, max_ris), np.int32), np.zeros((0, max_ris, 2)), n_rx)

    @classmethod
    def concat(cls, parts, n_rx):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(n_rx)
        width = max(p.kinds.shape[1] for p in parts)
        ris_w = max(p.ris_panel.shape[1] for p in parts)

        def pad(a, w, fill):
            if a.shape[1] == w:
                return a
            extra = np.full((a.shape[0], w - a.shape[1]) + a.shape[2:], fill, a.dtype)
            return np.concatenate([a, extra], axis=1)

        fields = {k: np.concatenate([getattr(p, k) for p in parts]) for k in
                  ("antenna", "length", "azimuth", "elevation", "jones")}
        fields["kinds"] = np.concatenate([pad(p.kinds, width, -1) for p in parts])
        fields["ids"] = np.concatenate([pad(p.ids, width, -1) for p in parts])
        fields["ris_panel"] = np.concatenate([pad(p.ris_panel, ris_w, -1) for p in parts])
        fields["ris_offset"] = np.concatenate([pad(p.ris_offset, ris_w, 0.0) for p in parts])
        out = cls(n_rx=n_rx, **fields)
        order = np.argsort(out.antenna, kind="stable")
        return out.select(order)


_ROW_FIELDS = ("antenna", "length", "azimuth", "elevation", "jones", "kinds", "ids", "ris_panel", "ris_offset")


# ----------------------------------------------------------------------------
# vector helpers

def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def polarization_basis(k):
    """Horizontal and vertical unit vectors transverse to propagation ``k``."""
    phi = np.arctan2(k[..., 1], k[..., 0])
    h = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=-1)
    v = np.cross(k, h)
    return h, v


def fresnel(eps, cos_i):
    """TE and TM reflection coefficients for relative permittivity ``eps``.

    TM uses the convention where the reflected p-vector is ``s x k_out``,
    so a perfect conductor gives ``(-1, +1)``.
    """
    cos_i = np.clip(cos_i, 0.0, 1.0)
    sin2 = 1 - cos_i**2
    root = np.sqrt(eps - sin2 + 0j)
    te = (cos_i - root) / (cos_i + root)
    tm = (eps * cos_i - root) / (eps * cos_i + root)
    return te, tm


def _surface_coefficients(surface, cos_i, frequency):
    if surface in ("ris", "pec"):
        return -np.ones_like(cos_i, complex), np.ones_like(cos_i, complex)
    material = surface if isinstance(surface, MaterialSpec) else lookup_material(surface)
    return fresnel(material.complex_permittivity(frequency), cos_i)


def _reflect_field(fields, k_in, k_out, normal, gamma_te, gamma_tm):
    """Apply one specular bounce to transverse fields ``(B, 2, 3)``."""
    s = np.cross(k_in, normal)
    s_norm = np.linalg.norm(s, axis=-1)
    fallback = polarization_basis(k_in)[0]
    s = np.where((s_norm > 1e-12)[:, None], s / np.where(s_norm > 1e-12, s_norm, 1.0)[:, None], fallback)
    p_in = np.cross(s, k_in)
    p_out = np.cross(s, k_out)
    a_s = np.einsum("bqc,bc->bq", fields, s)
    a_p = np.einsum("bqc,bc->bq", fields, p_in)
    return ((gamma_te[:, None] * a_s)[..., None] * s[:, None, :]
            + (gamma_tm[:, None] * a_p)[..., None] * p_out[:, None, :])


# ----------------------------------------------------------------------------
# image method

@lru_cache(maxsize=None)
def _wall_sequences(m):
    if m == 0:
        return np.zeros((1, 0), dtype=np.int64)
    seqs = [s for s in itertools.product(range(6), repeat=m) if all(a != b for a, b in zip(s, s[1:]))]
    return np.array(seqs, dtype=np.int64)


def _images(source, seqs, axis, value):
    """Successive mirror images ``(B, m+1, 3)`` of ``source`` across ``seqs``."""
    b, m = seqs.shape
    out = np.empty((b, m + 1, 3))
    out[:, 0] = source
    for i in range(m):
        cur = out[:, i].copy()
        ax = axis[seqs[:, i]]
        rows = np.arange(b)
        cur[rows, ax] = 2 * value[seqs[:, i]] - cur[rows, ax]
        out[:, i + 1] = cur
    return out


def _backtrack(images, seqs, target, axis, value, lo, hi):
    """Bounce points of unfolded paths ending at ``target``.

    ``images``: ``(B, m+1, 3)``; ``target``: ``(B, 3)``.  Returns the
    bounce points ``(B, m, 3)`` in travel order (source side first) and a
    validity mask: each crossing must fall strictly inside its segment and
    on the finite wall.
    """
    b, m = seqs.shape
    points = np.empty((b, m, 3))
    valid = np.ones(b, dtype=bool)
    cur = target
    rows = np.arange(b)
    for i in range(m - 1, -1, -1):
        a = images[:, i + 1]
        w = seqs[:, i]
        ax = axis[w]
        da = cur[rows, ax] - a[rows, ax]
        safe = np.where(np.abs(da) > 1e-15, da, 1.0)
        t = (value[w] - a[rows, ax]) / safe
        valid &= (np.abs(da) > 1e-15) & (t > _T_EPS) & (t < 1 - _T_EPS)
        p = a + t[:, None] * (cur - a)
        p[rows, ax] = value[w]
        valid &= np.all((p >= lo - _POS_TOL) & (p <= hi + _POS_TOL), axis=1)
        points[:, i] = p
        cur = p
    return points, valid


def _sphere_specular(center, radius, src, dst, iters=30):
    """Specular reflection point on spheres for sources/receivers ``(B, 3)``.

    Solves the stationarity of ``|src-P| + |P-dst|`` along the great-circle
    arc between the directions of ``src`` and ``dst`` (bracketed root of the
    arc-length derivative).  Returns
    points ``(B, 3)``, outward normals and a mask of geometrically valid
    reflections (both endpoints outside the sphere and above the tangent
    plane).
    """
    s_vec = src - center
    d_vec = dst - center
    s_len = np.linalg.norm(s_vec, axis=1)
    u1 = s_vec / np.where(s_len > 0, s_len, 1.0)[:, None]
    along = np.sum(d_vec * u1, axis=1)
    perp_vec = d_vec - along[:, None] * u1
    perp = np.linalg.norm(perp_vec, axis=1)
    # degenerate when dst lies on the src axis; any perpendicular works
    helper = np.where(np.abs(u1[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    alt = _unit(np.cross(u1, helper))
    u2 = np.where((perp > 1e-12)[:, None], perp_vec / np.where(perp > 1e-12, perp, 1.0)[:, None], alt)
    gamma = np.arctan2(perp, along)

    sx, sy = s_len, np.zeros_like(s_len)
    dx, dy = along, perp
    a = radius if np.ndim(radius) else np.full_like(s_len, radius)

    def slope(t):
        px, py = a * np.cos(t), a * np.sin(t)
        tx, ty = -a * np.sin(t), a * np.cos(t)
        ds = np.hypot(sx - px, sy - py)
        dd = np.hypot(dx - px, dy - py)
        return -((sx - px) * tx + (sy - py) * ty) / ds - ((dx - px) * tx + (dy - py) * ty) / dd

    # slope < 0 at t=0 and > 0 at t=gamma; a few bisections, then Illinois
    # false position to full precision
    lo_t = np.zeros_like(gamma)
    hi_t = gamma.copy()
    for _ in range(4):
        mid = 0.5 * (lo_t + hi_t)
        pos = slope(mid) > 0
        hi_t = np.where(pos, mid, hi_t)
        lo_t = np.where(pos, lo_t, mid)
    f_lo, f_hi = slope(lo_t), slope(hi_t)
    side = np.zeros(gamma.shape, dtype=np.int8)
    for _ in range(iters):
        denom = f_hi - f_lo
        t = np.where(np.abs(denom) > 0, (lo_t * f_hi - hi_t * f_lo) / np.where(denom != 0, denom, 1.0),
                     0.5 * (lo_t + hi_t))
        t = np.clip(t, lo_t, hi_t)
        f = slope(t)
        pos = f > 0
        hi_t, lo_t = np.where(pos, t, hi_t), np.where(pos, lo_t, t)
        # Illinois: halve the stale endpoint's value when the same side repeats
        f_lo = np.where(pos, np.where(side == 1, f_lo / 2, f_lo), f)
        f_hi = np.where(pos, f, np.where(side == -1, f_hi / 2, f_hi))
        side = np.where(pos, 1, -1).astype(np.int8)
        if np.all(hi_t - lo_t < 1e-13) or np.all(np.abs(f) < 1e-13):
            break
    normal = np.cos(t)[:, None] * u1 + np.sin(t)[:, None] * u2
    point = center + a[:, None] * normal
    valid = (
        (s_len > a * (1 + 1e-12))
        & (np.linalg.norm(d_vec, axis=1) > a * (1 + 1e-12))
        & (np.sum((src - point) * normal, axis=1) > 1e-12)
        & (np.sum((dst - point) * normal, axis=1) > 1e-12)
        & (gamma < math.pi - 1e-9)
    )
    return point, normal, valid


def _occluded(points, centers, radii):
    """True where any segment of the polylines ``(B, L, 3)`` pierces a sphere.

    Segments that merely end on a sphere surface (specular bounces) touch it
    at distance exactly ``r`` and are not counted.
    """
    b = points.shape[0]
    hit = np.zeros(b, dtype=bool)
    if len(centers) == 0 or b == 0:
        return hit
    a = points[:, :-1]  # (B, L-1, 3)
    d = points[:, 1:] - a
    dd = np.sum(d * d, axis=-1)
    for j in range(len(centers)):
        w = centers[j] - a
        t = np.clip(np.sum(w * d, axis=-1) / np.where(dd > 0, dd, 1.0), 0.0, 1.0)
        closest = a + t[..., None] * d
        dist2 = np.sum((closest - centers[j]) ** 2, axis=-1)
        hit |= np.any(dist2 < radii[j] ** 2 * (1 - 1e-9), axis=1)
    return hit


class _Tracer:
    """Bookkeeping shared by the wall-only and sphere path enumerations."""

    def __init__(self, scene, config, receivers, max_reflections):
        self.config = config
        self.axis, self.value, self.normals = _wall_planes(config)
        self.lo, self.hi = config.room_bounds
        self.tx = np.asarray(config.tx_position, float)
        self.rx = receivers
        self.n_rx = len(receivers)
        self.max_order = max_reflections
        self.panel_table = _panel_index(config)
        self.panels = room_panels(config)
        geo = scene.geometry() if scene is not None else np.zeros((0, 4))
        self.centers = geo[:, :3]
        self.radii = geo[:, 3]
        self.materials = [p.material for p in scene.spheres] if scene is not None else []
        self.amp0 = math.sqrt(config.tx_power_w) * config.wavelength / (4 * math.pi)

    # -- interaction bookkeeping ------------------------------------------
    def _panel_hits(self, walls, points):
        """Panel ids ``(B, m)`` (-1 for non-RIS bounces) and u/v offsets from
        panel centers."""
        b, m = walls.shape
        ids = -np.ones((b, m), dtype=np.int64)
        offs = np.zeros((b, m, 2))
        for w, (first, nu, nv) in self.panel_table.items():
            mask = walls == w
            if not mask.any():
                continue
            ua, va = _tangent_axes(self.axis[w])
            pu = points[..., ua][mask] - self.lo[ua]
            pv = points[..., va][mask] - self.lo[va]
            iu = np.clip(np.floor(pu / self.config.panel_size).astype(np.int64), 0, nu - 1)
            iv = np.clip(np.floor(pv / self.config.panel_size).astype(np.int64), 0, nv - 1)
            pid = first + iu * nv + iv
            ids[mask] = pid
            centers = np.array([p.center for p in self.panels])[pid]
            offs[mask] = np.stack([points[..., ua][mask] - centers[:, ua], points[..., va][mask] - centers[:, va]], -1)
        return ids, offs

    def _assemble(self, antenna, pts, normals, gammas, kinds, ids, walls_for_ris, extra_amp):
        """Jones matrices and metadata for paths with bounce points ``pts``
        ``(B, m+2, 3)`` (tx first, rx last)."""
        b, npts, _ = pts.shape
        m = npts - 2
        seg = np.diff(pts, axis=1)
        seg_len = np.linalg.norm(seg, axis=-1)
        k = seg / seg_len[..., None]
        length = seg_len.sum(axis=1)
        h0, v0 = polarization_basis(k[:, 0])
        fields = np.stack([h0, v0], axis=1).astype(complex)
        for i in range(m):
            fields = _reflect_field(fields, k[:, i], k[:, i + 1], normals[:, i], gammas[0][:, i], gammas[1][:, i])
        h1, v1 = polarization_basis(k[:, -1])
        jones = np.stack([np.einsum("bqc,bc->bq", fields, h1), np.einsum("bqc,bc->bq", fields, v1)], axis=1)
        jones *= (self.amp0 / length * extra_amp)[:, None, None]
        arrival = -k[:, -1]
        az = np.arctan2(arrival[:, 1], arrival[:, 0])
        el = np.arcsin(np.clip(arrival[:, 2], -1.0, 1.0))
        ris_ids, ris_offs = self._panel_hits(walls_for_ris, pts[:, 1:-1])
        n_ris = np.sum(ris_ids >= 0, axis=1)
        keep = n_ris <= self.config.max_ris_hits
        width = self.config.max_ris_hits
        order = np.argsort(ris_ids < 0, axis=1, kind="stable")[:, :width] if m else np.zeros((b, 0), np.int64)
        rp = -np.ones((b, width), np.int32)
        ro = np.zeros((b, width, 2))
        if m and width:
            take = min(width, m)
            rp[:, :take] = np.take_along_axis(ris_ids, order[:, :take], axis=1)
            ro[:, :take] = np.take_along_axis(ris_offs, order[:, :take, None], axis=1)
            ro[rp < 0] = 0.0
        kinds = np.where(ris_ids >= 0, RIS_PANEL, kinds)
        ids = np.where(ris_ids >= 0, ris_ids, ids)
        kpad = -np.ones((b, self.max_order), np.int8)
        ipad = -np.ones((b, self.max_order), np.int32)
        kpad[:, :m] = kinds
        ipad[:, :m] = ids
        ps = PathSet(antenna, length, az, el, jones, kpad, ipad, rp, ro, self.n_rx)
        return ps.select(keep)

    def _wall_gammas(self, walls, cos_i):
        te = np.empty(walls.shape, complex)
        tm = np.empty(walls.shape, complex)
        for w in range(6):
            mask = walls == w
            if mask.any():
                te[mask], tm[mask] = _surface_coefficients(self.config.wall_surfaces[w], cos_i[mask],
                                                           self.config.frequency)
        return te, tm

    # -- enumerations ---------------------------------------------------------
    def wall_paths(self):
        parts = []
        for m in range(0, self.max_order + 1):
            seqs = _wall_sequences(m)
            imgs = _images(self.tx, seqs, self.axis, self.value)
            ns = len(seqs)
            # (n_rx * ns) rows, antenna-major
            seqs_r = np.tile(seqs, (self.n_rx, 1))
            imgs_r = np.tile(imgs, (self.n_rx, 1, 1))
            target = np.repeat(self.rx, ns, axis=0)
            antenna = np.repeat(np.arange(self.n_rx), ns)
            pts, valid = _backtrack(imgs_r, seqs_r, target, self.axis, self.value, self.lo, self.hi)
            if not valid.any():
                continue
            seqs_r, pts, target, antenna = seqs_r[valid], pts[valid], target[valid], antenna[valid]
            full = np.concatenate([np.broadcast_to(self.tx, (len(pts), 1, 3)), pts, target[:, None]], axis=1)
            if len(self.centers):
                blocked = _occluded(full, self.centers, self.radii)
                full, seqs_r, antenna = full[~blocked], seqs_r[~blocked], antenna[~blocked]
            if not len(full):
                continue
            normals = self.normals[seqs_r]
            k = np.diff(full, axis=1)
            k /= np.linalg.norm(k, axis=-1, keepdims=True)
            cos_i = -np.sum(k[:, :m] * normals, axis=-1) if m else np.zeros((len(full), 0))
            gammas = self._wall_gammas(seqs_r, cos_i)
            kinds = np.full(seqs_r.shape, WALL, np.int8)
            parts.append(self._assemble(antenna, full, normals, gammas, kinds, seqs_r, seqs_r,
                                        np.ones(len(full))))
        return parts

    def sphere_paths(self):
        parts = []
        n_s = len(self.centers)
        if n_s == 0:
            return parts
        rx_all = self.rx
        for la in range(0, self.max_order):
            for lb in range(0, self.max_order - la):
                seq_a = _wall_sequences(la)
                seq_b = _wall_sequences(lb)
                img_a = _images(self.tx, seq_a, self.axis, self.value)  # (Na, la+1, 3)
                na, nb = len(seq_a), len(seq_b)
                # receiver images through the post-sphere walls, last wall first
                rev_b = seq_b[:, ::-1]
                img_b = np.stack([_images(r, rev_b, self.axis, self.value) for r in rx_all], axis=0)  # (R, Nb, lb+1, 3)
                # rows: antenna x sphere x a x b
                R = self.n_rx
                ant = np.repeat(np.arange(R), n_s * na * nb)
                sph = np.tile(np.repeat(np.arange(n_s), na * nb), R)
                ia = np.tile(np.repeat(np.arange(na), nb), R * n_s)
                ib = np.tile(np.arange(nb), R * n_s * na)
                src = img_a[ia, -1]
                dst = img_b[ant, ib, -1]
                point, normal, valid = _sphere_specular(self.centers[sph], self.radii[sph], src, dst)
                if not valid.any():
                    continue
                ant, sph, ia, ib, point, normal = (x[valid] for x in (ant, sph, ia, ib, point, normal))
                pa, va = _backtrack(img_a[ia], seq_a[ia], point, self.axis, self.value, self.lo, self.hi)
                pb, vb = _backtrack(img_b[ant, ib], rev_b[ib], point, self.axis, self.value, self.lo, self.hi)
                ok = va & vb
                if not ok.any():
                    continue
                ant, sph, ia, ib, point, normal, pa, pb = (x[ok] for x in (ant, sph, ia, ib, point, normal, pa, pb))
                b = len(ant)
                full = np.concatenate([
                    np.broadcast_to(self.tx, (b, 1, 3)), pa, point[:, None], pb[:, ::-1], rx_all[ant][:, None]
                ], axis=1)
                blocked = _occluded(full, self.centers, self.radii)
                keep = ~blocked
                if not keep.any():
                    continue
                ant, sph, ia, ib, normal, full = (x[keep] for x in (ant, sph, ia, ib, normal, full))
                b = len(ant)
                walls_a, walls_b = seq_a[ia], seq_b[ib]
                m = la + 1 + lb
                k = np.diff(full, axis=1)
                seg_len = np.linalg.norm(k, axis=-1)
                k /= seg_len[..., None]
                normals = np.concatenate([self.normals[walls_a], normal[:, None], self.normals[walls_b]], axis=1)
                cos_i = -np.sum(k[:, :m] * normals, axis=-1)
                te = np.empty((b, m), complex)
                tm = np.empty((b, m), complex)
                if la:
                    te[:, :la], tm[:, :la] = self._wall_gammas(walls_a, cos_i[:, :la])
                if lb:
                    te[:, la + 1:], tm[:, la + 1:] = self._wall_gammas(walls_b, cos_i[:, la + 1:])
                for j in range(n_s):
                    mask = sph == j
                    if mask.any():
                        eps = self.materials[j].complex_permittivity(self.config.frequency)
                        te[mask, la], tm[mask, la] = fresnel(eps, cos_i[mask, la])
                d_out = seg_len[:, la + 1:].sum(axis=1)
                divergence = self.radii[sph] / (self.radii[sph] + 2 * d_out)
                walls = np.concatenate([walls_a, -np.ones((b, 1), np.int64), walls_b], axis=1)
                kinds = np.full((b, m), WALL, np.int8)
                kinds[:, la] = SPHERE
                ids = walls.copy()
                ids[:, la] = sph
                parts.append(self._assemble(ant, full, normals, (te, tm), kinds, ids, walls, divergence))
        return parts


def trace_geometry(scene: SceneRecord | None, config: SimulationConfig, receivers=None, max_reflections=None) -> PathSet:
    """Enumerate all specular paths (RIS phases not yet applied).

    ``receivers`` defaults to the configured antenna array;
    ``max_reflections=0`` keeps only line-of-sight paths.
    """
    receivers = config.rx_positions() if receivers is None else np.atleast_2d(np.asarray(receivers, float))
    order = config.max_reflections if max_reflections is None else int(max_reflections)
    tracer = _Tracer(scene, config, receivers, order)
    parts = tracer.wall_paths() + tracer.sphere_paths()
    return PathSet.concat(parts, len(receivers))


def apply_codebook_entry(paths: PathSet, entry: CodebookEntry) -> PathSet:
    """Multiply in the RIS panel phases of one codebook entry."""
    phase = np.zeros(len(paths))
    hit = paths.ris_panel >= 0
    if hit.any():
        grads = entry.gradients[np.where(hit, paths.ris_panel, 0)]  # (P, h, 2)
        phase = np.sum(np.where(hit, np.sum(grads * paths.ris_offset, axis=-1), 0.0), axis=1)
    jones = paths.jones * np.exp(1j * phase)[:, None, None]
    return replace(paths, jones=jones, entry_index=entry.index)


def trace_paths(scene, config, codebook_entry, max_reflections=None) -> PathSet:
    return apply_codebook_entry(trace_geometry(scene, config, max_reflections=max_reflections), codebook_entry)


def synthesize_wavefront(paths: PathSet, config: SimulationConfig, noise_seed=None, noise_variance=None):
    """Received complex samples ``(N_r, 2, 2)`` indexed ``[antenna, p_rx, q_tx]``.

    Coherent sum of path contributions ``jones * exp(-j 2 pi d / lambda)``
    plus circularly-symmetric Gaussian noise of the configured variance
    (``noise_seed=None`` disables noise).
    """
    out = np.zeros((paths.n_rx, 2, 2), complex)
    if len(paths):
        contrib = paths.jones * np.exp(-2j * math.pi * paths.length / config.wavelength)[:, None, None]
        # np.add.at accumulates in row order, which is canonical
        np.add.at(out, paths.antenna, contrib)
    if noise_seed is not None:
        var = config.resolved_noise_variance() if noise_variance is None else float(noise_variance)
        rng = np.random.default_rng(noise_seed)
        noise = rng.normal(size=(paths.n_rx, 2, 2, 2)) * math.sqrt(var / 2)
        out = out + noise[..., 0] + 1j * noise[..., 1]
    return out
