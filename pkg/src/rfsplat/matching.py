"""Bipartite set matching between predicted and ground-truth spheres.

``hungarian`` is a shortest-augmenting-path solver (rectangular, O(n^2 m))
with a deterministic tie-break: among all optimal assignments the one whose
partner sequence, read over the smaller side in index order, is
lexicographically smallest.  Class index 0 is the no-object class.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch

from . import geometry
from .exceptions import InvalidInputError
from .scenes import DEFAULT_BOUNDS

NO_OBJECT = 0
DEFAULT_RADIUS_RANGE = (0.25, 0.5)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    cls: float = 1.0
    no_object: float = 0.1

    def __post_init__(self):
        for name in ("l1", "giou", "cls", "no_object"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidInputError(f"loss weight {name} must be finite and >= 0, got {v}")

    def to_dict(self):
        return dict(l1=self.l1, giou=self.giou, cls=self.cls, no_object=self.no_object)


@dataclass(frozen=True)
class GeometryScaler:
    """Affine map between physical (x, y, z, r) and the unit hypercube."""

    bounds: tuple = DEFAULT_BOUNDS
    radius_range: tuple = DEFAULT_RADIUS_RANGE

    @property
    def low(self):
        return np.array([b[0] for b in self.bounds] + [self.radius_range[0]], dtype=float)

    @property
    def span(self):
        return np.array([b[1] - b[0] for b in self.bounds] + [self.radius_range[1] - self.radius_range[0]],
                        dtype=float)

    def normalize(self, geo):
        return (np.asarray(geo, float) - self.low) / self.span

    def denormalize(self, unit):
        if torch.is_tensor(unit):
            low = torch.as_tensor(self.low, dtype=unit.dtype)
            return unit * torch.as_tensor(self.span, dtype=unit.dtype) + low
        return np.asarray(unit, float) * self.span + self.low


@dataclass
class MatchResult:
    """``assignment`` maps prediction (row) index to ground-truth (column) index."""

    assignment: dict
    unmatched: tuple
    total_cost: float
    n_rows: int = 0
    n_cols: int = 0

    @property
    def pairs(self):
        """Matched ``(row, col)`` pairs sorted by row."""
        return sorted(self.assignment.items())

    def rows(self):
        return np.array([r for r, _ in self.pairs], dtype=np.int64)

    def cols(self):
        return np.array([c for _, c in self.pairs], dtype=np.int64)


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    giou: float
    nll: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)


def _shortest_augmenting(cost):
    """Solve rows <= cols.  Returns (row -> col array, row duals, col duals).

    ``cost`` may be a float array or an object array of ``Fraction``; the
    latter solves exactly.
    """
    n, m = cost.shape
    inf = np.inf
    exact = cost.dtype == object
    u = np.full(n + 1, Fraction(0), dtype=object) if exact else np.zeros(n + 1)
    v = np.full(m + 1, Fraction(0), dtype=object) if exact else np.zeros(m + 1)
    owner = np.full(m + 1, -1, dtype=np.int64)  # owner[j]: row matched to column j-1 (1-based cols)
    for i in range(n):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf, dtype=object if exact else float)
        way = np.zeros(m + 1, dtype=np.int64)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            # potentials: rows/cols in the tree shift by delta
            rows_in_tree = owner[used]
            u[rows_in_tree] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == -1:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    match = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j] >= 0:
            match[owner[j]] = j - 1
    return match, u[:n], v[1:]


def _exact_total(cost, pairs):
    """Exact rational sum of ``cost[r, c]`` over ``pairs``; independent of
    summation order, so float near-ties never depend on rounding."""
    return sum((Fraction(float(cost[r, c])) for r, c in pairs), Fraction(0))


def _near_tie(cost, match, u, v):
    """True when some unmatched edge is tight within float error, i.e. the
    float optimum may not be unique or may differ from the exact one."""
    n, m = cost.shape
    tol = 64 * np.finfo(float).eps * max(1.0, float(np.abs(cost).max())) * (n + 1)
    reduced = cost - u[:, None] - v[None, :]
    reduced[np.arange(n), match] = np.inf
    return bool(np.any(reduced <= tol))


def _lexicographic(cost):
    """Exact optimum that is lexicographically smallest among all optima.

    Solves in rational arithmetic, so tight edges (zero reduced cost under
    the optimal duals) are identified exactly.  Only tight edges appear in an
    optimal assignment, so for each row we try tight free columns smaller
    than the current partner, each checked by re-solving the rest.  Near-ties
    (1e-129 vs 0) are not ties.
    """
    n, m = cost.shape
    exact = np.array([[Fraction(float(x)) for x in row] for row in cost], dtype=object)
    match, u, v = _shortest_augmenting(exact)
    opt = _exact_total(cost, enumerate(match))
    match = match.copy()
    fixed = []
    for i in range(n):
        taken = set(fixed)
        for j in range(match[i]):
            if j in taken or exact[i, j] - u[i] - v[j] != 0:
                continue
            rest_rows = np.arange(i + 1, n)
            rest_cols = np.array([c for c in range(m) if c not in taken and c != j], dtype=np.int64)
            if len(rest_rows):
                sub, _, _ = _shortest_augmenting(exact[np.ix_(rest_rows, rest_cols)])
                tail_match = rest_cols[sub]
            else:
                tail_match = np.zeros(0, dtype=np.int64)
            cols = fixed + [j] + [int(c) for c in tail_match]
            if _exact_total(cost, enumerate(cols)) == opt:
                match[i] = j
                match[i + 1:] = tail_match
                break
        fixed.append(int(match[i]))
    return match


def hungarian(cost) -> MatchResult:
    """Minimum-cost injective assignment of the smaller side into the larger.

    ``cost``: ``(N, M)`` finite matrix, rows are predictions.  Exactly
    ``min(N, M)`` pairs are matched.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InvalidInputError(f"cost must be a 2-D matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise InvalidInputError("cost matrix has non-finite entries")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchResult({}, tuple(range(n)), 0.0, n, m)
    flip = n > m
    work = cost.T if flip else cost
    match, u, v = _shortest_augmenting(work)
    if _near_tie(work, match, u, v):
        match = _lexicographic(work)
    if flip:
        assignment = {int(match[c]): c for c in range(m)}
    else:
        assignment = {r: int(match[r]) for r in range(n)}
    total = float(_exact_total(cost, assignment.items()))
    unmatched = tuple(r for r in range(n) if r not in assignment)
    return MatchResult(assignment, unmatched, total, n, m)


def brute_force_assignment(cost):
    """Exhaustive minimum over injective maps (small matrices only).

    Returns ``(total_cost, assignment dict)`` with the same lexicographic
    tie-break as ``hungarian``.
    """
    from itertools import permutations

    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    flip = n > m
    work = cost.T if flip else cost
    perms = list(permutations(range(work.shape[1]), work.shape[0]))
    if not perms or work.shape[0] == 0:
        return 0.0, {}
    rows = np.arange(work.shape[0])
    approx = np.array([work[rows, list(p)].sum() for p in perms])
    # float sums only shortlist; the exact rational sum decides
    tol = 64 * np.finfo(float).eps * max(1.0, float(np.abs(work).max())) * (work.shape[0] + 1)
    best, best_perm = np.inf, None
    for k in np.flatnonzero(approx <= approx.min() + tol):
        perm = perms[k]
        total = _exact_total(work, enumerate(perm))
        if total < best:
            best, best_perm = total, perm
    if best_perm is None:
        return 0.0, {}
    if flip:
        return float(best), {best_perm[c]: c for c in range(m)}
    return float(best), {r: best_perm[r] for r in range(n)}


def _check_predictions(geo, probs):
    geo = np.asarray(geo, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if geo.ndim != 2 or geo.shape[1] != 4:
        raise InvalidInputError(f"prediction geometry must be (N, 4), got {geo.shape}")
    if probs.ndim != 2 or probs.shape[0] != geo.shape[0]:
        raise InvalidInputError(f"class probabilities must be (N, L+1), got {probs.shape}")
    return geo, probs


def _check_truth(geo, labels, n_classes):
    geo = np.asarray(geo, dtype=np.float64).reshape(-1, 4)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(geo):
        raise InvalidInputError("one label per ground-truth sphere required")
    if len(labels) and (labels.min() < 1 or labels.max() >= n_classes):
        raise InvalidInputError(f"ground-truth labels must lie in 1..{n_classes - 1}")
    return geo, labels


def giou_matrix(pred_phys, true_phys):
    """Pairwise sphere GIoU between ``(N, 4)`` and ``(M, 4)`` physical geometries."""
    pred_phys = np.asarray(pred_phys, float)
    true_phys = np.asarray(true_phys, float)
    res = geometry.giou_batch(pred_phys[:, None, :3], pred_phys[:, None, 3], true_phys[None, :, :3],
                              true_phys[None, :, 3], with_grad=False)
    return res["giou"]


def matching_cost(pred_geo, pred_probs, true_geo, true_labels, weights=LossWeights(), scaler=GeometryScaler(),
                  use_class=True):
    """``(N, M)`` matching cost.

    Geometry arguments are normalized ``(x, y, z, r)``; the l1 term is taken
    there and GIoU on the physical spheres.  The class term is the negated
    probability of the true label (``use_class=False`` drops it).
    """
    pred_geo, pred_probs = _check_predictions(pred_geo, pred_probs)
    true_geo, true_labels = _check_truth(true_geo, true_labels, pred_probs.shape[1])
    l1 = np.abs(pred_geo[:, None, :] - true_geo[None, :, :]).sum(axis=-1)
    g = giou_matrix(scaler.denormalize(pred_geo), scaler.denormalize(true_geo))
    cost = weights.l1 * l1 + weights.giou * (1.0 - g)
    if use_class:
        cost = cost - weights.cls * pred_probs[:, true_labels]
    return cost


def match(pred_geo, pred_probs, true_geo, true_labels, weights=LossWeights(), scaler=GeometryScaler()):
    return hungarian(matching_cost(pred_geo, pred_probs, true_geo, true_labels, weights, scaler))


def _targets_per_query(match_result: MatchResult, n_queries):
    """Index of the matched ground truth per query, -1 when unmatched."""
    target = np.full(n_queries, -1, dtype=np.int64)
    for r, c in match_result.assignment.items():
        target[r] = c
    return target


def set_loss(pred_geo, pred_probs, true_geo, true_labels, match_result: MatchResult | None = None,
             weights=LossWeights(), scaler=GeometryScaler()) -> LossBreakdown:
    """Matched set loss (numpy reference of the training objective).

    Per-query terms are accumulated in query order, which does not depend on
    the order of the ground-truth sequence; every component is divided by
    the ground-truth count (at least 1).
    """
    pred_geo, pred_probs = _check_predictions(pred_geo, pred_probs)
    true_geo, true_labels = _check_truth(true_geo, true_labels, pred_probs.shape[1])
    if match_result is None:
        match_result = match(pred_geo, pred_probs, true_geo, true_labels, weights, scaler)
    target = _targets_per_query(match_result, len(pred_geo))
    denom = max(len(true_geo), 1)
    l1 = giou_l = nll = 0.0
    tiny = np.finfo(float).tiny
    for q in range(len(pred_geo)):
        t = target[q]
        if t < 0:
            nll += weights.no_object * -np.log(max(pred_probs[q, NO_OBJECT], tiny))
            continue
        l1 += float(np.abs(pred_geo[q] - true_geo[t]).sum())
        g = giou_matrix(scaler.denormalize(pred_geo[q:q + 1]), scaler.denormalize(true_geo[t:t + 1]))[0, 0]
        giou_l += 1.0 - float(g)
        nll += -np.log(max(pred_probs[q, true_labels[t]], tiny))
    l1, giou_l, nll = l1 / denom, giou_l / denom, nll / denom
    total = weights.l1 * l1 + weights.giou * giou_l + weights.cls * nll
    return LossBreakdown(l1, giou_l, float(nll), float(total), weights)


# torch side ---------------------------------------------------------------

def torch_sphere_giou(ca, ra, cb, rb):
    """Differentiable sphere GIoU; branches selected with masks so that no
    inactive branch leaks NaN gradients."""
    diff = ca - cb
    sq = (diff * diff).sum(-1)
    d = torch.sqrt(torch.clamp(sq, min=geometry.BRANCH_TOL**2))
    four_thirds_pi = 4.0 * np.pi / 3.0
    va = four_thirds_pi * ra**3
    vb = four_thirds_pi * rb**3
    rsum = ra + rb
    rdiff = ra - rb
    disjoint = d >= rsum - geometry.BRANCH_TOL
    contained = d <= torch.abs(rdiff) + geometry.BRANCH_TOL
    lens_mask = ~(disjoint | contained)
    d_safe = torch.where(lens_mask, d, torch.ones_like(d))
    gap = torch.where(lens_mask, rsum - d, torch.zeros_like(d))
    lens = np.pi * gap**2 * (d_safe**2 + 2 * d_safe * rsum - 3 * rdiff**2) / (12 * d_safe)
    # radii of the smaller/larger sphere through |ra - rb| so equal radii get a zero subgradient
    r_small = (rsum - torch.abs(rdiff)) / 2
    r_large = (rsum + torch.abs(rdiff)) / 2
    small = four_thirds_pi * r_small**3
    inter = torch.where(disjoint, torch.zeros_like(d), torch.where(contained, small, lens))
    union = va + vb - inter
    enc_r = torch.where(contained, r_large, (d + rsum) / 2)
    enc = four_thirds_pi * enc_r**3
    return inter / union - (enc - union) / enc


def torch_set_loss(pred_geo, pred_logits, true_geo, true_labels, match_result: MatchResult,
                   weights=LossWeights(), scaler=GeometryScaler()):
    """Differentiable set loss for one sample.

    ``pred_geo``: ``(N, 4)`` normalized geometry, ``pred_logits``: ``(N,
    L+1)``, ``true_geo``: ``(M, 4)`` normalized tensor, ``true_labels``:
    ``(M,)`` long tensor.  Returns ``(total, (l1, giou, nll))`` tensors.
    """
    n = pred_geo.shape[0]
    dtype = pred_geo.dtype
    target = torch.as_tensor(_targets_per_query(match_result, n))
    matched = target >= 0
    denom = max(int(true_geo.shape[0]), 1)
    log_p = torch.log_softmax(pred_logits, dim=-1)

    safe_t = torch.where(matched, target, torch.zeros_like(target))
    if true_geo.shape[0]:
        tgt_geo = true_geo[safe_t]
        tgt_label = true_labels[safe_t]
    else:
        tgt_geo = torch.zeros_like(pred_geo)
        tgt_label = torch.zeros(n, dtype=torch.long)
    cls_target = torch.where(matched, tgt_label, torch.full_like(tgt_label, NO_OBJECT))
    cls_weight = torch.where(matched, torch.ones(n, dtype=dtype), torch.full((n,), weights.no_object, dtype=dtype))
    nll_q = -log_p.gather(1, cls_target[:, None])[:, 0] * cls_weight

    mask = matched.to(dtype)
    l1_q = (pred_geo - tgt_geo).abs().sum(-1) * mask
    pp = scaler.denormalize(pred_geo)
    tp = scaler.denormalize(tgt_geo)
    if true_geo.shape[0]:
        g = torch_sphere_giou(pp[:, :3], pp[:, 3], tp[:, :3], tp[:, 3])
        giou_q = (1.0 - g) * mask
    else:
        giou_q = torch.zeros(n, dtype=dtype)
    l1 = l1_q.sum() / denom
    gl = giou_q.sum() / denom
    nll = nll_q.sum() / denom
    total = weights.l1 * l1 + weights.giou * gl + weights.cls * nll
    return total, (l1, gl, nll)
