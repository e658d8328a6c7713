"""Per-antenna RF signatures from traced multipath: polarization power and
phase, power-weighted equivalent angle of arrival, RMS angular spreads and
delay statistics, concatenated over RIS configurations."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import IncompleteInputError, InvalidInputError
from .propagation import C0, PathComponent, PathSet

log = logging.getLogger(__name__)

FEATURE_NAMES = ("P_h", "P_v", "omega_h", "omega_v", "phi_t", "theta_t", "sigma_phi", "sigma_theta",
                 "tau_av", "sigma_tau")
N_FEATURES = len(FEATURE_NAMES)
DEFAULT_WAVELENGTH = C0 / 2.8e9
_DEGENERATE_NORM = 1e-15


@dataclass(frozen=True)
class AntennaFeatures:
    P_h: float
    P_v: float
    omega_h: float
    omega_v: float
    phi_t: float
    theta_t: float
    sigma_phi: float
    sigma_theta: float
    tau_av: float
    sigma_tau: float
    degenerate: bool = False

    def as_array(self):
        return np.array([getattr(self, n) for n in FEATURE_NAMES])


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + math.pi, 2 * math.pi) - math.pi
    return np.where(w <= -math.pi, w + 2 * math.pi, w)


def _path_arrays(paths):
    """(jones, length, delay, azimuth, elevation) from a PathSet or a
    sequence of PathComponent."""
    if isinstance(paths, PathSet):
        return paths.jones, paths.length, paths.delay, paths.azimuth, paths.elevation
    paths = list(paths)
    if not paths:
        z = np.zeros(0)
        return np.zeros((0, 2, 2), complex), z, z, z, z
    if not all(isinstance(p, PathComponent) for p in paths):
        raise InvalidInputError("paths must be a PathSet or PathComponent objects")
    return (np.array([p.jones for p in paths]), np.array([p.path_length for p in paths]),
            np.array([p.delay for p in paths]), np.array([p.azimuth for p in paths]),
            np.array([p.elevation for p in paths]))


def path_powers(jones):
    """I_k = |E_h|^2 + |E_v|^2 with both transmit polarizations excited."""
    return np.sum(np.abs(jones) ** 2, axis=(-2, -1))


def polarization_features(paths, wavelength=DEFAULT_WAVELENGTH):
    """``(P_h, P_v, omega_h, omega_v, degenerate)`` for one antenna.

    X_p sums co-polar (q = p) and cross-polar (q != p) contributions of
    every path, including the propagation phase ``exp(-j 2 pi d / lambda)``.
    """
    jones, length, *_ = _path_arrays(paths)
    if len(jones) == 0:
        return 0.0, 0.0, 0.0, 0.0, True
    phase = np.exp(-2j * math.pi * length / wavelength)
    x = np.sum(jones.sum(axis=2) * phase[:, None], axis=0)
    p = np.abs(x) ** 2
    omega = wrap_angle(np.angle(x))
    return float(p[0]), float(p[1]), float(omega[0]), float(omega[1]), False


def equivalent_aoa(paths):
    """``(phi_t, theta_t, degenerate)``: direction of the power-weighted sum
    of arrival unit vectors."""
    jones, _, _, az, el = _path_arrays(paths)
    return _aoa(path_powers(jones), az, el)


def _unit_vectors(az, el):
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def _aoa(power, az, el):
    if len(power) == 0:
        return 0.0, 0.0, True
    r = np.sum(power[:, None] * _unit_vectors(az, el), axis=0)
    norm = np.linalg.norm(r)
    if norm < _DEGENERATE_NORM * max(np.sum(power), 1e-300):
        return 0.0, 0.0, True
    return float(np.arctan2(r[1], r[0])), float(np.arcsin(np.clip(r[2] / norm, -1, 1))), False


def angular_spread(paths, center, kind="phi"):
    """Power-weighted RMS spread of azimuth (``kind="phi"``, residuals
    wrapped) or elevation (``kind="theta"``) about ``center``."""
    jones, _, _, az, el = _path_arrays(paths)
    power = path_powers(jones)
    if len(power) == 0 or power.sum() == 0:
        return 0.0
    if kind == "phi":
        resid = wrap_angle(az - center)
    elif kind == "theta":
        resid = el - center
    else:
        raise InvalidInputError(f"kind must be 'phi' or 'theta', got {kind!r}")
    return float(math.sqrt(np.sum(power * resid**2) / power.sum()))


def delay_stats(paths):
    """Power-weighted mean excess delay and RMS delay spread (seconds)."""
    jones, _, delay, *_ = _path_arrays(paths)
    return _delay_stats(path_powers(jones), delay)


def _delay_stats(power, delay):
    total = power.sum()
    if len(power) == 0 or total == 0:
        return 0.0, 0.0
    mean = float(np.sum(power * delay) / total)
    # centered second moment: equal to E[tau^2] - mean^2 without the cancellation
    return mean, math.sqrt(float(np.sum(power * (delay - mean) ** 2) / total))


def antenna_features(paths, wavelength=DEFAULT_WAVELENGTH) -> AntennaFeatures:
    """All ten features of one antenna's path list."""
    jones, length, delay, az, el = _path_arrays(paths)
    power = path_powers(jones)
    ph, pv, wh, wv, _ = polarization_features(paths, wavelength)
    phi, theta, degenerate = _aoa(power, az, el)
    if len(power) == 0 or power.sum() == 0:
        return AntennaFeatures(0, 0, 0, 0, 0, 0, 0, 0, 0, 0, degenerate=True)
    s_phi = math.sqrt(np.sum(power * wrap_angle(az - phi) ** 2) / power.sum())
    s_theta = math.sqrt(np.sum(power * (el - theta) ** 2) / power.sum())
    tau, s_tau = _delay_stats(power, delay)
    return AntennaFeatures(ph, pv, wh, wv, phi, theta, s_phi, s_theta, tau, s_tau, degenerate)


def feature_block(paths: PathSet, wavelength=DEFAULT_WAVELENGTH, wavefront=None):
    """Vectorised features ``(N_r, 10)`` for every antenna of a PathSet.

    When ``wavefront`` (``(N_r, 2, 2)`` received samples, noise included) is
    given, the polarization power/phase come from the measured samples;
    otherwise from the coherent path sum.  Antennas without paths get
    all-zero rows and are logged.
    """
    n = paths.n_rx
    out = np.zeros((n, N_FEATURES))
    ant = paths.antenna
    power = paths.power
    if wavefront is None:
        contrib = paths.jones.sum(axis=2) * np.exp(-2j * math.pi * paths.length / wavelength)[:, None]
        x = np.zeros((n, 2), complex)
        np.add.at(x, ant, contrib)
    else:
        wavefront = np.asarray(wavefront)
        if wavefront.shape != (n, 2, 2):
            raise InvalidInputError(f"wavefront shape {wavefront.shape} != {(n, 2, 2)}")
        x = wavefront.sum(axis=2)
    out[:, 0:2] = np.abs(x) ** 2
    out[:, 2:4] = wrap_angle(np.angle(x))

    total = np.bincount(ant, weights=power, minlength=n)
    live = total > 0
    if not np.all(live):
        log.info("%d antenna(s) received no paths; their features are zero", int(np.sum(~live)))
    safe = np.where(live, total, 1.0)
    u = _unit_vectors(paths.azimuth, paths.elevation) * power[:, None]
    r = np.stack([np.bincount(ant, weights=u[:, i], minlength=n) for i in range(3)], axis=1)
    norm = np.linalg.norm(r, axis=1)
    ok = live & (norm >= _DEGENERATE_NORM * safe)
    phi = np.where(ok, np.arctan2(r[:, 1], r[:, 0]), 0.0)
    theta = np.where(ok, np.arcsin(np.clip(r[:, 2] / np.where(ok, norm, 1.0), -1, 1)), 0.0)
    out[:, 4] = phi
    out[:, 5] = theta
    d_phi = wrap_angle(paths.azimuth - phi[ant])
    d_theta = paths.elevation - theta[ant]
    out[:, 6] = np.sqrt(np.bincount(ant, weights=power * d_phi**2, minlength=n) / safe)
    out[:, 7] = np.sqrt(np.bincount(ant, weights=power * d_theta**2, minlength=n) / safe)
    tau = paths.delay
    mean = np.bincount(ant, weights=power * tau, minlength=n) / safe
    out[:, 8] = mean
    out[:, 9] = np.sqrt(np.bincount(ant, weights=power * (tau - mean[ant]) ** 2, minlength=n) / safe)
    out[~live, 4:] = 0.0
    return out


@dataclass(frozen=True)
class FeatureMap:
    """``grid``: ``(N_r, N_f * C)``, antennas in row-major array order,
    channels grouped by configuration then feature."""

    grid: np.ndarray
    scene_id: int | None = None
    entry_ids: tuple = ()
    rx_shape: tuple = (8, 8)

    @property
    def n_configs(self):
        return self.grid.shape[1] // N_FEATURES

    def spatial(self):
        """``(rows, cols, channels)`` view aligned with the antenna grid."""
        return self.grid.reshape(*self.rx_shape, -1)


def assemble_feature_map(traced, wavelength=DEFAULT_WAVELENGTH, wavefronts=None, n_configs=None,
                         scene_id=None, rx_shape=(8, 8)) -> FeatureMap:
    """Concatenate per-configuration feature blocks.

    ``traced``: one PathSet per codebook entry (phases applied), in the
    order the channel blocks should appear.  ``wavefronts`` optionally
    supplies matching measured samples.
    """
    traced = list(traced)
    if n_configs is not None and len(traced) != n_configs:
        raise IncompleteInputError(f"expected {n_configs} configurations, got {len(traced)}")
    if not traced or any(t is None for t in traced):
        raise IncompleteInputError("missing configuration data")
    if wavefronts is not None and len(wavefronts) != len(traced):
        raise IncompleteInputError("one wavefront per configuration required")
    blocks = [feature_block(t, wavelength, None if wavefronts is None else wavefronts[i])
              for i, t in enumerate(traced)]
    grid = np.concatenate(blocks, axis=1)
    if not np.all(np.isfinite(grid)):
        raise InvalidInputError("non-finite feature values")
    if grid.shape[0] != rx_shape[0] * rx_shape[1]:
        raise InvalidInputError(f"{grid.shape[0]} antennas do not fit a {rx_shape} grid")
    return FeatureMap(grid, scene_id, tuple(t.entry_index for t in traced), tuple(rx_shape))


class FeatureStandardizer(TransformerMixin, BaseEstimator):
    """Per-channel standardization of feature maps ``(n, N_r, channels)``.

    Statistics pool every antenna of every training map.  Channels with
    zero spread are centered only.
    """

    def __init__(self, eps=1e-12):
        self.eps = eps

    def fit(self, X, y=None):
        X = self._check(X)
        flat = X.reshape(-1, X.shape[-1])
        self.mean_ = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.scale_ = np.where(std > self.eps * np.maximum(np.abs(self.mean_), 1e-300), std, 1.0)
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = self._check(X)
        if X.shape[-1] != self.n_features_in_:
            raise InvalidInputError(f"expected {self.n_features_in_} channels, got {X.shape[-1]}")
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return np.asarray(X) * self.scale_ + self.mean_

    @staticmethod
    def _check(X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise InvalidInputError(f"expected (n, antennas, channels), got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidInputError("non-finite feature values")
        return X
