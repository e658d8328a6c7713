"""End-to-end run: scenes -> features -> training -> evaluation, all from
one master seed."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .evaluation import EvalReport, constant_baseline_mae, evaluate
from .features import N_FEATURES
from .pipeline import derive_seed, iter_dataset, split_indices, stack_features
from .storage import DatasetRecord, DatasetWriter, dataset_header, save_weights

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    report: EvalReport
    baseline_mae: np.ndarray
    history: list
    files: dict
    timings: dict

    @property
    def mae_ratio(self):
        """Constant-predictor MAE over model MAE, per axis (>= 2 means at
        least twice as good)."""
        return self.baseline_mae / self.report.mae


def header_for(cfg: RunConfig):
    return dataset_header(cfg.simulation.build().n_rx, N_FEATURES, cfg.codebook.n_entries, cfg.simulation.rx_shape,
                          cfg.scene.build().materials, extra={"seed": cfg.seed, "config": cfg.to_dict()})


def build_dataset_file(cfg: RunConfig, path, count=None, workers=None, keep=True):
    """Stream ``count`` scenes into a dataset file; returns the records when
    ``keep``."""
    count = cfg.n_scenes if count is None else count
    plan = cfg.plan()
    kept = []
    with DatasetWriter(path, header_for(cfg)) as w:
        for scene, fm in iter_dataset(count, cfg.scene.build(), plan, workers=workers):
            rec = DatasetRecord(scene, fm)
            w.write(rec)
            if keep:
                kept.append(rec)
    return kept


def dataset_splits(cfg: RunConfig, n):
    return split_indices(n, cfg.training.split, seed=derive_seed(cfg.seed, "split"))


def train_on_records(cfg: RunConfig, records, verbose=False):
    tr, va, _ = dataset_splits(cfg, len(records))
    X = stack_features([r.features for r in records])
    scenes = [r.scene for r in records]
    est = cfg.estimator(verbose=verbose)
    kwargs = {}
    if len(va):
        kwargs = dict(X_val=X[va], y_val=[scenes[i] for i in va])
    est.fit(X[tr], [scenes[i] for i in tr], **kwargs)
    return est


def evaluate_records(cfg: RunConfig, est, records, indices=None, tau=None):
    indices = np.arange(len(records)) if indices is None else np.asarray(indices)
    tau = cfg.eval.tau if tau is None else tau
    X = stack_features([records[i].features for i in indices])
    ids = [int(records[i].features.scene_id if records[i].features.scene_id is not None else i) for i in indices]
    dets = est.predict_and_filter(X, tau, scene_ids=ids) if len(indices) else []
    return evaluate(dets, [records[i].scene for i in indices], cfg.scene.materials, scene_ids=ids,
                    scaler=cfg.scaler(), weights=cfg.loss_weights(), tau=tau)


def run_experiment(cfg: RunConfig, workdir, workers=None, verbose=False) -> ExperimentResult:
    cfg.validate()
    os.makedirs(workdir, exist_ok=True)
    cfg.save(os.path.join(workdir, "resolved_config.json"))
    timings = {}
    t0 = time.perf_counter()
    records = build_dataset_file(cfg, os.path.join(workdir, "dataset.ds"), workers=workers)
    timings["dataset"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    est = train_on_records(cfg, records, verbose=verbose)
    timings["train"] = time.perf_counter() - t0
    weights = save_weights(os.path.join(workdir, "model.bin"), est)

    tr, _, te = dataset_splits(cfg, len(records))
    t0 = time.perf_counter()
    report = evaluate_records(cfg, est, records, te)
    baseline = constant_baseline_mae([records[i].scene for i in tr], [records[i].scene for i in te])
    report.extra["constant_baseline_mae"] = " ".join(f"{v:.6f}" for v in baseline)
    report.extra["train_scenes"] = len(tr)
    report.extra["test_scenes"] = len(te)
    files = report.write(workdir)
    timings["eval"] = time.perf_counter() - t0
    files.update(weights=weights, dataset=os.path.join(workdir, "dataset.ds"))
    write_loss_curve(os.path.join(workdir, "loss_curve.csv"), est.history_)
    files["loss_curve"] = os.path.join(workdir, "loss_curve.csv")
    return ExperimentResult(report, baseline, est.history_, files, timings)


def write_loss_curve(path, history):
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for e in history:
            fh.write(f"{e['epoch']},{e['train_loss']!r},{e.get('val_loss', float('nan'))!r}\n")
    return path
