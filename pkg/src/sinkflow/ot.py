"""Entropic optimal transport between empirical point clouds.

The ground cost is the squared Euclidean distance. Potentials are computed
in the log domain, so small ``epsilon`` relative to the cost scale does not
underflow. The regularized value follows the convention

    OT_eps(a, b) = <P, C> + eps * KL(P | a x b)

which differs from ``<P, C> - eps * H(P)`` only by constants that cancel in
the debiased divergence.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from sinkflow import kernels
from sinkflow.errors import (
    ApproximateResultWarning,
    CapabilityError,
    NumericError,
    SchemaError,
    ValidationError,
)

SQEUCLIDEAN = "sqeuclidean"
ORACLE_MAX_POINTS = 6


@dataclass(frozen=True)
class SampleBatch:
    """Weighted point cloud; ``points`` is ``(n, d)`` and ``weights`` sums to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise SchemaError(f"points must be a non-empty (n, d) matrix, got shape {pts.shape}")
        if w.shape != (pts.shape[0],):
            raise SchemaError(f"weights shape {w.shape} does not match {pts.shape[0]} points")
        if not np.all(np.isfinite(pts)):
            raise NumericError("points contain non-finite values")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> SampleBatch:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n) if n else np.zeros(0))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    metric_tag: str = SQEUCLIDEAN


@dataclass(frozen=True)
class TransportPlan:
    """Entropic coupling plus the potentials it was rebuilt from.

    ``coupling[i, j] = a_i * b_j * exp((dual_u[i] + dual_v[j] - C[i, j]) / epsilon)``.
    """

    coupling: np.ndarray
    dual_u: np.ndarray
    dual_v: np.ndarray
    iterations_used: int
    converged: bool
    marginal_error: float
    epsilon: float


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iterations: int = 500
    marginal_tolerance: float = 1e-6
    debias: bool = True
    check_every: int = 10

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon!r}")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if not self.marginal_tolerance > 0:
            raise ValidationError("marginal_tolerance must be > 0")
        if self.check_every < 1:
            raise ValidationError("check_every must be >= 1")

    def scaled(self, factor: float) -> SinkhornConfig:
        """Same config with epsilon multiplied by ``factor``."""
        return SinkhornConfig(
            self.epsilon * factor, self.max_iterations, self.marginal_tolerance,
            self.debias, self.check_every,
        )


def cost_matrix(a: SampleBatch, b: SampleBatch) -> CostMatrix:
    if a.dim != b.dim:
        raise SchemaError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return CostMatrix(kernels.sqeuclidean(a.points, b.points))


def _log_weights(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


def sinkhorn_plan(a: SampleBatch, b: SampleBatch, cfg: SinkhornConfig,
                  cost: CostMatrix | None = None) -> TransportPlan:
    """Solve the entropic transport problem between ``a`` and ``b``.

    Hitting ``max_iterations`` is reported through ``converged=False``, never
    raised.
    """
    C = cost_matrix(a, b).entries if cost is None else np.ascontiguousarray(cost.entries, dtype=np.float64)
    if C.shape != (a.n, b.n):
        raise SchemaError(f"cost shape {C.shape} does not match batches ({a.n}, {b.n})")
    if not np.all(np.isfinite(C)):
        raise NumericError("cost matrix contains non-finite entries")
    loga = _log_weights(a.weights)
    logb = _log_weights(b.weights)
    eps = cfg.epsilon
    f, g, iters, err = kernels.sinkhorn_log(
        C, loga, logb, eps, cfg.max_iterations, cfg.marginal_tolerance, cfg.check_every
    )
    P = np.exp(loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - C) / eps)
    return TransportPlan(P, f, g, int(iters), bool(err <= cfg.marginal_tolerance), float(err), eps)


def ot_cost(plan: TransportPlan, cost: CostMatrix, cfg: SinkhornConfig | None = None) -> float:
    """Transport term ``sum_ij P_ij C_ij`` (entropy excluded)."""
    if plan.coupling.shape != cost.entries.shape:
        raise SchemaError(f"plan shape {plan.coupling.shape} != cost shape {cost.entries.shape}")
    return float(np.sum(plan.coupling * cost.entries))


def plan_entropy(plan: TransportPlan) -> float:
    """``-sum P log P`` with ``0 log 0 = 0``."""
    P = plan.coupling
    nz = P > 0
    return float(-np.sum(P[nz] * np.log(P[nz])))


def _dual_value(plan: TransportPlan, a: SampleBatch, b: SampleBatch) -> float:
    # Weighted dot products skip zero-mass points so their potentials never matter.
    return float(np.dot(a.weights, plan.dual_u) + np.dot(b.weights, plan.dual_v))


def entropic_ot(a: SampleBatch, b: SampleBatch, cfg: SinkhornConfig) -> tuple[float, TransportPlan]:
    """Regularized transport value ``<P, C> + eps KL(P | a x b)`` and its plan."""
    plan = sinkhorn_plan(a, b, cfg)
    return _dual_value(plan, a, b), plan


def _batch_key(batch: SampleBatch):
    return (batch.points.shape, batch.points.tobytes(), batch.weights.tobytes())


@dataclass(frozen=True)
class DivergenceResult:
    value: float
    gradient: np.ndarray
    converged: bool


def _cross_term(a, b, cfg):
    # Solve in a canonical argument order so S(a, b) and S(b, a) are bit-identical.
    if _batch_key(b) < _batch_key(a):
        value, plan = entropic_ot(b, a, cfg)
        return value, plan.coupling.T, plan.converged
    value, plan = entropic_ot(a, b, cfg)
    return value, plan.coupling, plan.converged


def divergence_and_gradient(a: SampleBatch, b: SampleBatch, cfg: SinkhornConfig) -> DivergenceResult:
    """Debiased divergence and its gradient with respect to ``b.points``.

    The gradient holds the plans fixed (envelope rule):
    ``d OT / d y_j = sum_i P_ij * 2 (y_j - x_i)``.
    """
    if a.dim != b.dim:
        raise SchemaError(f"dimension mismatch: {a.dim} vs {b.dim}")
    x, y = a.points, b.points
    cross, P, ok = _cross_term(a, b, cfg)
    grad = 2.0 * (P.sum(axis=0)[:, None] * y - P.T @ x)
    value = cross
    if cfg.debias:
        self_a, plan_a = entropic_ot(a, a, cfg)
        self_b, plan_b = entropic_ot(b, b, cfg)
        Q = 0.5 * (plan_b.coupling + plan_b.coupling.T)
        # half of the b-self term, whose y dependence enters through both arguments
        grad -= 2.0 * (Q.sum(axis=0)[:, None] * y - Q.T @ y)
        value = cross - 0.5 * (self_a + self_b)
        ok = ok and plan_a.converged and plan_b.converged
    return DivergenceResult(float(value), grad, ok)


def sinkhorn_divergence(a: SampleBatch, b: SampleBatch, cfg: SinkhornConfig) -> float:
    """``OT(a, b) - (OT(a, a) + OT(b, b)) / 2``, or just ``OT(a, b)`` when not debiased."""
    if a.dim != b.dim:
        raise SchemaError(f"dimension mismatch: {a.dim} vs {b.dim}")
    cross, _, _ = _cross_term(a, b, cfg)
    if not cfg.debias:
        return float(cross)
    self_a, _ = entropic_ot(a, a, cfg)
    self_b, _ = entropic_ot(b, b, cfg)
    return float(cross - 0.5 * (self_a + self_b))


def divergence_gradient(a: SampleBatch, b: SampleBatch, cfg: SinkhornConfig) -> np.ndarray:
    """Gradient of :func:`sinkhorn_divergence` with respect to ``b.points``.

    Emits :class:`ApproximateResultWarning` when any underlying solve did not
    converge.
    """
    res = divergence_and_gradient(a, b, cfg)
    if not res.converged:
        warnings.warn("Sinkhorn solve did not converge; gradient is approximate",
                      ApproximateResultWarning, stacklevel=2)
    return res.gradient


def exact_ot_oracle(a: SampleBatch, b: SampleBatch) -> float:
    """Unregularized OT cost by exhaustive search, for at most six points a side.

    Equal sizes enumerate permutations. Unequal sizes scale the uniform
    marginals to integers (``m`` units per source, ``n`` per target) and
    search every integral vertex of the transportation polytope.
    """
    n, m = a.n, b.n
    if n > ORACLE_MAX_POINTS or m > ORACLE_MAX_POINTS:
        raise CapabilityError(f"exact oracle supports at most {ORACLE_MAX_POINTS} points per side")
    if not (np.allclose(a.weights, 1.0 / n) and np.allclose(b.weights, 1.0 / m)):
        raise CapabilityError("exact oracle requires uniform weights")
    C = cost_matrix(a, b).entries
    if n == m:
        best = min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        return float(best / n)

    def splits(units, caps):
        if len(caps) == 1:
            if units <= caps[0]:
                yield (units,)
            return
        for k in range(min(units, caps[0]) + 1):
            for rest in splits(units - k, caps[1:]):
                yield (k,) + rest

    @lru_cache(maxsize=None)
    def solve(i, remaining):
        if i == n:
            return 0.0
        best = np.inf
        for flow in splits(m, remaining):
            here = sum(f * C[i, j] for j, f in enumerate(flow))
            rest = tuple(r - f for r, f in zip(remaining, flow))
            best = min(best, here + solve(i + 1, rest))
        return best

    return float(solve(0, (n,) * m) / (n * m))
