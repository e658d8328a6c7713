"""Scene -> multipath -> feature map, for one scene or a whole dataset.

Every random stream of a run derives from one master seed: scenes use
``scene_seed(master, i)``, the remaining streams use ``derive_seed``.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap, assemble_feature_map
from .propagation import RISCodebook, SimulationConfig, apply_codebook_entry, build_codebook, \
    synthesize_wavefront, trace_geometry
from .scenes import SceneParams, SceneRecord, generate_scene, scene_seed

log = logging.getLogger(__name__)

WORKERS_ENV = "RFSPLAT_WORKERS"
STREAMS = {"codebook": 1, "noise": 2, "init": 3, "split": 4}


def derive_seed(master_seed, stream, *index) -> int:
    """64-bit seed for a named stream of a run (and optional indices)."""
    key = [int(master_seed) & (2**64 - 1), STREAMS[stream], *[int(i) for i in index]]
    state = np.random.SeedSequence(key).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def worker_count(default=1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class SimulationPlan:
    """Everything needed to turn a scene into its feature map."""

    sim: SimulationConfig = field(default_factory=SimulationConfig)
    codebook: RISCodebook | None = None
    n_entries: int = 2
    realizations_per_panel: int = 5
    max_reflections: int | None = None
    # features from the traced path lists (default) or from noisy received samples
    measured: bool = False
    master_seed: int = 0

    def resolved_codebook(self) -> RISCodebook:
        if self.codebook is not None:
            return self.codebook
        return build_codebook(derive_seed(self.master_seed, "codebook"), self.n_entries,
                              self.realizations_per_panel, self.sim)


def simulate_scene(scene: SceneRecord, plan: SimulationPlan, index=0, codebook=None, keep_paths=False):
    """Feature map of one scene (and, optionally, the per-entry path sets).

    The geometry is traced once; each codebook entry only re-phases RIS
    bounces.  With ``plan.measured`` the polarization power/phase come from
    noisy received samples, noise per entry seeded from ``(master, index,
    entry)``.
    """
    codebook = codebook or plan.resolved_codebook()
    geo = trace_geometry(scene, plan.sim, max_reflections=plan.max_reflections)
    traced = [apply_codebook_entry(geo, e) for e in codebook.entries]
    wavefronts = None
    if plan.measured:
        wavefronts = [noisy_wavefront(t, plan, index, c) for c, t in enumerate(traced)]
    fm = assemble_feature_map(traced, plan.sim.wavelength, wavefronts, scene_id=index,
                              rx_shape=tuple(plan.sim.rx_shape))
    return (fm, traced) if keep_paths else fm


def noisy_wavefront(paths, plan: SimulationPlan, index, entry):
    return synthesize_wavefront(paths, plan.sim, noise_seed=derive_seed(plan.master_seed, "noise", index, entry))


def _scene_job(args):
    index, params, plan, codebook = args
    scene = generate_scene(scene_seed(plan.master_seed, index), params)
    return scene, simulate_scene(scene, plan, index, codebook)


def iter_dataset(n_scenes, params: SceneParams, plan: SimulationPlan, start=0, workers=None):
    """Yield ``(SceneRecord, FeatureMap)`` in scene-index order.

    With ``workers > 1`` scenes are computed in a process pool; results are
    still yielded in index order, so output does not depend on the pool.
    """
    workers = worker_count() if workers is None else max(1, int(workers))
    codebook = plan.resolved_codebook()
    jobs = ((i, params, plan, codebook) for i in range(start, start + n_scenes))
    if workers == 1:
        for job in jobs:
            yield _scene_job(job)
        return
    with ProcessPoolExecutor(workers) as pool:
        yield from pool.map(_scene_job, jobs, chunksize=8)


def build_dataset(n_scenes, params: SceneParams, plan: SimulationPlan, workers=None):
    return list(iter_dataset(n_scenes, params, plan, workers=workers))


def split_indices(n, fractions=(0.8, 0.1, 0.1), seed=0):
    """Deterministic shuffled train/val/test index arrays."""
    fractions = np.asarray(fractions, float)
    if np.any(fractions < 0) or fractions.sum() <= 0:
        raise ValueError(f"invalid split fractions {fractions}")
    fractions = fractions / fractions.sum()
    order = np.random.default_rng(seed).permutation(n)
    cuts = np.floor(np.cumsum(fractions)[:-1] * n).astype(int)
    return tuple(np.sort(part) for part in np.split(order, cuts))


def stack_features(maps):
    return np.stack([fm.grid if isinstance(fm, FeatureMap) else np.asarray(fm) for fm in maps])
