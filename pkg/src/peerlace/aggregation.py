"""Gradient aggregation rules: plain averaging plus Byzantine-robust variants.

Every rule takes a sequence of equal-length gradient vectors and returns one
vector. ``meamed`` and ``zeno`` take a bound ``b`` on the number of inputs
that may be adversarial; ties in their selection step go to the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractViolation, DenseVector, LabeledBatch, ModelParams, as_vector, forward_loss, sgd_step

RULES = ("average", "marmed", "geomed", "meamed", "zeno")

_WEISZFELD_EPS = 1e-12


def _stack(grads: Sequence) -> np.ndarray:
    if len(grads) == 0:
        raise ContractViolation("cannot aggregate an empty set of gradients")
    try:
        stacked = np.stack([np.asarray(g, dtype=np.float64) for g in grads])
    except ValueError as exc:
        raise ContractViolation(f"gradient lengths differ: {exc}") from None
    if stacked.ndim != 2 or stacked.shape[1] == 0:
        raise ContractViolation(f"gradients must be non-empty 1-D vectors, got shape {stacked.shape[1:]}")
    return stacked


def _check_bound(n: int, b: int) -> None:
    if not 0 <= b < n:
        raise ContractViolation(f"byzantine bound b={b} must satisfy 0 <= b < n={n}")


def _row_sum(stacked: np.ndarray) -> np.ndarray:
    # strictly sequential in row order; np.sum may switch to pairwise summation
    total = stacked[0].copy()
    for row in stacked[1:]:
        total += row
    return total


def average(grads: Sequence) -> DenseVector:
    stacked = _stack(grads)
    return as_vector(_row_sum(stacked) / stacked.shape[0], allow_nonfinite=True)


def marmed(grads: Sequence) -> DenseVector:
    """Coordinate-wise median; an even count averages the two middle order statistics."""
    stacked = np.sort(_stack(grads), axis=0)
    n = stacked.shape[0]
    mid = n // 2
    if n % 2:
        return as_vector(stacked[mid], allow_nonfinite=True)
    return as_vector((stacked[mid - 1] + stacked[mid]) / 2.0, allow_nonfinite=True)


def meamed(grads: Sequence, b: int) -> DenseVector:
    """Mean around the median.

    For every coordinate, keep the ``n - b`` values nearest the coordinate-wise
    median and average them.
    """
    stacked = _stack(grads)
    n, dim = stacked.shape
    _check_bound(n, b)
    if b == 0:
        return average(stacked)
    median = marmed(stacked)
    distance = np.abs(stacked - median)
    # stable sort on distance keeps lower indices first among ties
    order = np.argsort(distance, axis=0, kind="stable")
    keep = np.zeros_like(stacked, dtype=bool)
    np.put_along_axis(keep, order[: n - b], True, axis=0)
    total = _row_sum(np.where(keep, stacked, 0.0))
    return as_vector(total / (n - b), allow_nonfinite=True)


def geomed_objective(point, grads: Sequence) -> float:
    stacked = _stack(grads)
    return float(np.sum(np.linalg.norm(stacked - np.asarray(point), axis=1)))


def _is_vertex_minimizer(stacked: np.ndarray, i: int) -> bool:
    # x_i minimizes sum ||x - g_j|| iff the pull of the other points has norm <= multiplicity of x_i
    diffs = stacked - stacked[i]
    dists = np.linalg.norm(diffs, axis=1)
    same = dists < _WEISZFELD_EPS
    others = ~same
    if not np.any(others):
        return True
    pull = np.sum(diffs[others] / dists[others, None], axis=0)
    return float(np.linalg.norm(pull)) <= float(np.sum(same))


def geomed(grads: Sequence, tolerance: float = 1e-8, max_iter: int = 200) -> DenseVector:
    """Geometric median by Weiszfeld iteration started from the mean.

    Stops once successive iterates are closer than ``tolerance`` (L2) or after
    ``max_iter`` steps. Because the iteration crawls when the minimizer sits on
    an input point, each input point is also tested with the first-order
    optimality condition and returned if it qualifies.
    """
    stacked = _stack(grads)
    if not np.all(np.isfinite(stacked)):
        raise ContractViolation("geomed input contains NaN or Inf")
    if tolerance <= 0 or max_iter < 1:
        raise ContractViolation("tolerance must be positive and max_iter >= 1")
    n = stacked.shape[0]
    if n == 1:
        return as_vector(stacked[0])
    if n == 2:
        return as_vector((stacked[0] + stacked[1]) / 2.0)

    for i in range(n):
        if _is_vertex_minimizer(stacked, i):
            return as_vector(stacked[i])

    point = np.mean(stacked, axis=0)
    for _ in range(max_iter):
        dists = np.maximum(np.linalg.norm(stacked - point, axis=1), _WEISZFELD_EPS)
        weights = 1.0 / dists
        nxt = weights @ stacked / weights.sum()
        step = np.linalg.norm(nxt - point)
        point = nxt
        if step < tolerance:
            break
    return as_vector(_newton_polish(stacked, point, tolerance, max_iter))


def _newton_polish(points: np.ndarray, start: np.ndarray, tolerance: float, max_iter: int) -> np.ndarray:
    """Refine a Weiszfeld estimate with damped Newton steps.

    Weiszfeld converges only linearly, and very slowly when the minimizer is
    close to (but not on) an input point. The objective is smooth away from
    the inputs, so Newton steps inside the inputs' affine span finish the job.
    Each step must lower the objective; otherwise the current point is kept.
    """
    center = points.mean(axis=0)
    basis, _ = np.linalg.qr((points - center).T)
    local = (points - center) @ basis
    y = (start - center) @ basis

    def objective(v: np.ndarray) -> float:
        return float(np.sum(np.linalg.norm(local - v, axis=1)))

    scale = max(float(np.max(np.abs(local))), 1.0)
    best = objective(y)
    for _ in range(max_iter):
        diff = y - local
        dists = np.linalg.norm(diff, axis=1)
        if dists.min() <= 1e-12 * scale:
            break
        units = diff / dists[:, None]
        grad = units.sum(axis=0)
        hess = np.eye(y.size) * float(np.sum(1.0 / dists)) - (units / dists[:, None]).T @ units
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        t = 1.0
        while t > 1e-12 and objective(y - t * step) >= best:
            t /= 2
        trial = y - t * step
        value = objective(trial)
        if value >= best:
            break
        y, best = trial, value
        if t * np.linalg.norm(step) < tolerance * 1e-3:
            break
    return center + basis @ y


@dataclass(frozen=True)
class ZenoConfig:
    validation_batch: LabeledBatch
    learning_rate: float
    rho: float = 1e-4

    def __post_init__(self):
        if self.rho < 0:
            raise ContractViolation("rho must be non-negative")
        if not self.learning_rate > 0:
            raise ContractViolation("zeno probe step must be positive")


def zeno_scores(grads: Sequence, params: ModelParams, cfg: ZenoConfig) -> np.ndarray:
    """Estimated loss decrease of each candidate step, minus a squared-norm penalty."""
    stacked = _stack(grads)
    base = forward_loss(params, cfg.validation_batch)
    scores = np.empty(stacked.shape[0])
    for i, g in enumerate(stacked):
        probe = sgd_step(params, g, cfg.learning_rate)
        scores[i] = base - forward_loss(probe, cfg.validation_batch) - cfg.rho * float(g @ g)
    return scores


def zeno(grads: Sequence, params: ModelParams, cfg: ZenoConfig, b: int) -> DenseVector:
    stacked = _stack(grads)
    n = stacked.shape[0]
    _check_bound(n, b)
    if b == 0:
        return average(stacked)
    scores = zeno_scores(stacked, params, cfg)
    # highest score first, lower index first among ties
    ranked = sorted(range(n), key=lambda i: (-scores[i], i))
    kept = sorted(ranked[: n - b])
    return average(stacked[kept])


@dataclass(frozen=True)
class AggregationRule:
    kind: str = "average"
    byzantine_bound: int = 1
    geomed_tolerance: float = 1e-8
    geomed_max_iter: int = 200
    zeno: ZenoConfig | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in RULES:
            raise ContractViolation(f"unknown aggregation rule {self.kind!r}; choose from {RULES}")
        if self.byzantine_bound < 0:
            raise ContractViolation("byzantine_bound must be non-negative")

    def apply(self, grads: Sequence, params: ModelParams | None = None) -> DenseVector:
        if self.kind == "average":
            return average(grads)
        if self.kind == "marmed":
            return marmed(grads)
        if self.kind == "geomed":
            return geomed(grads, self.geomed_tolerance, self.geomed_max_iter)
        # survivors of a failure can number <= b; exclude at most n - 1
        b = min(self.byzantine_bound, len(grads) - 1)
        if self.kind == "meamed":
            return meamed(grads, b)
        if self.zeno is None or params is None:
            raise ContractViolation("zeno needs a ZenoConfig and the current model parameters")
        return zeno(grads, params, self.zeno, b)
