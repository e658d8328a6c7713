"""Scoring reconstructed sphere sets against ground truth, and sphere-cloud
export.

Detections are paired with truth by a geometry-only Hungarian match (l1 on
normalized coordinates plus 1 - GIoU); labels never influence the pairing,
so localization errors and the material confusion matrix are measured on
the same pairs.  Unmatched truths are misses, unmatched detections are
spurious; both are counted, not folded into the errors.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import FormatError, InvalidInputError
from .matching import GeometryScaler, LossWeights, hungarian, matching_cost
from .scenes import SceneRecord

AXES = ("x", "y", "z", "r")


def box_stats(values):
    """Quartiles and 1.5 IQR whiskers (clipped to the data) of a sample."""
    v = np.sort(np.asarray(values, float))
    if len(v) == 0:
        return dict(n=0, mean=float("nan"), q1=float("nan"), median=float("nan"), q3=float("nan"),
                    whisker_lo=float("nan"), whisker_hi=float("nan"), outliers=0)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return dict(n=int(len(v)), mean=float(v.mean()), q1=float(q1), median=float(med), q3=float(q3),
                whisker_lo=float(lo), whisker_hi=float(hi), outliers=int(np.sum((v < lo) | (v > hi))))


@dataclass
class MatchedPair:
    scene_id: int
    truth_index: int
    detection_index: int
    truth: np.ndarray
    predicted: np.ndarray
    true_label: int
    predicted_label: int
    confidence: float

    @property
    def abs_error(self):
        return np.abs(self.predicted - self.truth)


@dataclass
class EvalReport:
    pairs: list
    scenes: list  # (scene_id, n_truth, n_detections, matched, missed, spurious)
    counts: np.ndarray  # raw L x L confusion counts, rows = true material
    material_names: tuple
    tau: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def errors(self):
        return np.array([p.abs_error for p in self.pairs]).reshape(-1, 4)

    @property
    def mae(self):
        e = self.errors
        return e.mean(axis=0) if len(e) else np.full(4, np.nan)

    def axis_stats(self):
        e = self.errors
        return {a: box_stats(e[:, i]) for i, a in enumerate(AXES)}

    @property
    def confusion(self):
        """Row-normalized; rows without any matched truth stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    @property
    def accuracy(self):
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else float("nan")

    @property
    def totals(self):
        s = np.array([row[3:] for row in self.scenes]).reshape(-1, 3)
        return dict(zip(("matched", "missed", "spurious"), (int(v) for v in s.sum(axis=0))))

    # serialization ---------------------------------------------------------

    def to_text(self):
        out = io.StringIO()
        w = out.write
        w("reconstruction evaluation\n")
        if self.tau is not None:
            w(f"confidence threshold: {self.tau:.6g}\n")
        w(f"scenes: {len(self.scenes)}\n")
        t = self.totals
        w(f"matched: {t['matched']}  missed: {t['missed']}  spurious: {t['spurious']}\n")
        w(f"material accuracy: {self.accuracy:.6f}\n\n")
        w("absolute error per axis (m)\n")
        w(f"{'axis':<5}{'n':>7}{'mean':>12}{'q1':>12}{'median':>12}{'q3':>12}{'lo':>12}{'hi':>12}{'out':>6}\n")
        for a, st in self.axis_stats().items():
            w(f"{a:<5}{st['n']:>7d}{st['mean']:>12.6f}{st['q1']:>12.6f}{st['median']:>12.6f}{st['q3']:>12.6f}"
              f"{st['whisker_lo']:>12.6f}{st['whisker_hi']:>12.6f}{st['outliers']:>6d}\n")
        w("\nconfusion (rows: true, columns: predicted, row-normalized)\n")
        names = self.material_names
        width = max(8, max(len(n) for n in names) + 2)
        w(" " * width + "".join(f"{n:>{width}}" for n in names) + "\n")
        for n, row in zip(names, self.confusion):
            w(f"{n:<{width}}" + "".join(f"{v:>{width}.4f}" for v in row) + "\n")
        for k, v in sorted(self.extra.items()):
            w(f"{k}: {v}\n")
        return out.getvalue()

    def matches_csv(self):
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["scene_id", "truth_index", "detection_index", "true_x", "true_y", "true_z", "true_r",
                     "pred_x", "pred_y", "pred_z", "pred_r", "err_x", "err_y", "err_z", "err_r",
                     "true_material", "pred_material", "confidence"])
        for p in self.pairs:
            wr.writerow([p.scene_id, p.truth_index, p.detection_index, *map(repr, map(float, p.truth)),
                         *map(repr, map(float, p.predicted)), *map(repr, map(float, p.abs_error)),
                         p.true_label, p.predicted_label, repr(float(p.confidence))])
        return out.getvalue()

    def confusion_csv(self):
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["true\\predicted", *self.material_names, "count"])
        for name, row, counts in zip(self.material_names, self.confusion, self.counts):
            wr.writerow([name, *(repr(float(v)) for v in row), int(counts.sum())])
        return out.getvalue()

    def scenes_csv(self):
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["scene_id", "truth", "detections", "matched", "missed", "spurious"])
        wr.writerows(self.scenes)
        return out.getvalue()

    def write(self, directory, prefix="eval"):
        """Write ``<prefix>_report.txt`` and three CSV tables; returns paths."""
        os.makedirs(directory, exist_ok=True)
        files = {"report": (f"{prefix}_report.txt", self.to_text()),
                 "matches": (f"{prefix}_matches.csv", self.matches_csv()),
                 "confusion": (f"{prefix}_confusion.csv", self.confusion_csv()),
                 "scenes": (f"{prefix}_scenes.csv", self.scenes_csv())}
        paths = {}
        for key, (name, text) in files.items():
            path = os.path.join(directory, name)
            with open(path, "w", newline="") as fh:
                fh.write(text)
            paths[key] = path
        return paths


def _truth_arrays(truth):
    if isinstance(truth, SceneRecord):
        return truth.geometry(), truth.labels()
    geo, labels = truth
    return np.asarray(geo, float).reshape(-1, 4), np.asarray(labels, np.int64).reshape(-1)


def _detection_arrays(det):
    """``(geometry (K, 4), labels (K,), confidences (K,))`` from a
    DetectionSet-like object or a tuple."""
    if hasattr(det, "geometry") and callable(det.geometry):
        return det.geometry(), det.labels(), det.confidences()
    geo, labels, *rest = det
    geo = np.asarray(geo, float).reshape(-1, 4)
    conf = np.asarray(rest[0], float) if rest else np.ones(len(geo))
    return geo, np.asarray(labels, np.int64).reshape(-1), conf


def evaluate(detections, truths, material_names, scene_ids=None, scaler=GeometryScaler(),
             weights=LossWeights(), tau=None) -> EvalReport:
    """Match each scene's detections to its truth and aggregate.

    ``material_names[l - 1]`` names class ``l``; scenes are aggregated in
    the order given.
    """
    detections = list(detections)
    truths = list(truths)
    if len(detections) != len(truths):
        raise InvalidInputError(f"{len(detections)} detection sets for {len(truths)} scenes")
    names = tuple(material_names)
    n_mat = len(names)
    if scene_ids is None:
        scene_ids = [getattr(d, "scene_id", None) for d in detections]
        if any(s is None for s in scene_ids):
            scene_ids = list(range(len(detections)))
    counts = np.zeros((n_mat, n_mat), dtype=np.int64)
    pairs, scenes = [], []
    for sid, det, truth in zip(scene_ids, detections, truths):
        t_geo, t_lab = _truth_arrays(truth)
        d_geo, d_lab, d_conf = _detection_arrays(det)
        for arr, what in ((t_lab, "truth"), (d_lab, "detection")):
            if len(arr) and (arr.min() < 1 or arr.max() > n_mat):
                raise InvalidInputError(f"{what} material labels must lie in 1..{n_mat}")
        matched = 0
        if len(t_geo) and len(d_geo):
            # class term off: a dummy uniform distribution keeps shapes valid
            probs = np.full((len(d_geo), n_mat + 1), 1.0 / (n_mat + 1))
            cost = matching_cost(scaler.normalize(d_geo), probs, scaler.normalize(t_geo), t_lab, weights, scaler,
                                 use_class=False)
            m = hungarian(cost)
            for di, ti in sorted(m.assignment.items(), key=lambda kv: kv[1]):
                pairs.append(MatchedPair(int(sid), int(ti), int(di), t_geo[ti].copy(), d_geo[di].copy(),
                                         int(t_lab[ti]), int(d_lab[di]), float(d_conf[di])))
                counts[t_lab[ti] - 1, d_lab[di] - 1] += 1
            matched = len(m.assignment)
        scenes.append((int(sid), len(t_geo), len(d_geo), matched, len(t_geo) - matched, len(d_geo) - matched))
    return EvalReport(pairs, scenes, counts, names, tau)


def constant_baseline_mae(train_truths, test_truths):
    """Per-axis MAE of the best constant predictor (training median per
    axis, the l1-optimal constant) over every test sphere."""
    train = np.concatenate([_truth_arrays(t)[0] for t in train_truths])
    test = np.concatenate([_truth_arrays(t)[0] for t in test_truths])
    return np.abs(test - np.median(train, axis=0)).mean(axis=0)


# sphere-cloud export ---------------------------------------------------------

PLY_PROPERTIES = (("x", "double"), ("y", "double"), ("z", "double"), ("radius", "double"),
                  ("material", "int"), ("confidence", "double"))


def export_reconstruction(detections, path, material_names=None):
    """Write spheres as an ASCII PLY vertex list with per-vertex radius,
    material class and confidence.  Values use shortest round-trip repr."""
    geo, labels, conf = _detection_arrays(detections)
    lines = ["ply", "format ascii 1.0", "comment sphere reconstruction: one vertex per sphere"]
    if material_names:
        lines += [f"comment material {i + 1} {n}" for i, n in enumerate(material_names)]
    lines.append(f"element vertex {len(geo)}")
    lines += [f"property {t} {n}" for n, t in PLY_PROPERTIES]
    lines.append("end_header")
    for g, l, c in zip(geo, labels, conf):
        lines.append(" ".join([*(repr(float(v)) for v in g), str(int(l)), repr(float(c))]))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_reconstruction(path):
    """Inverse of ``export_reconstruction``: ``(geometry, labels, confidences)``."""
    with open(path) as fh:
        text = fh.read().splitlines()
    if not text or text[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    try:
        end = text.index("end_header")
    except ValueError:
        raise FormatError(f"{path}: missing end_header") from None
    count = None
    for line in text[:end]:
        if line.startswith("element vertex"):
            count = int(line.split()[2])
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    body = [line.split() for line in text[end + 1:end + 1 + count]]
    if len(body) != count or any(len(b) != len(PLY_PROPERTIES) for b in body):
        raise FormatError(f"{path}: expected {count} vertex records")
    geo = np.array([[float(v) for v in b[:4]] for b in body]).reshape(-1, 4)
    labels = np.array([int(b[4]) for b in body], dtype=np.int64)
    conf = np.array([float(b[5]) for b in body])
    return geo, labels, conf
