"""Self-contained numerical checks of the OT core.

Each check draws seeded random batches, measures the worst deviation from a
reference (exact oracle, algebraic identity or central finite differences)
and reports it next to its tolerance. Used by ``sinkflow oracle`` and the
acceptance tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from sinkflow.netgen import GeneratorModel, _forward, _inputs, backward
from sinkflow.ot import (
    SampleBatch,
    SinkhornConfig,
    cost_matrix,
    divergence_and_gradient,
    exact_ot_oracle,
    ot_cost,
    sinkhorn_divergence,
    sinkhorn_plan,
)

# Tight solves for the identity and gradient checks.
TIGHT = SinkhornConfig(epsilon=1.0, max_iterations=20000, marginal_tolerance=1e-12)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    cases: int

    def to_dict(self):
        return asdict(self)


def _uniform(rng, n, d):
    return SampleBatch.uniform(rng.standard_normal((n, d)))


def oracle_agreement(cases=200, max_points=5, max_dim=4, seed=0, rel_tol=0.05,
                     eps_factor=0.01, max_iterations=10000) -> PropertyResult:
    """Sinkhorn transport term at ``eps = eps_factor * mean cost`` vs the exact OT cost."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, max_points + 1))
        d = int(rng.integers(1, max_dim + 1))
        a, b = _uniform(rng, n, d), _uniform(rng, n, d)
        C = cost_matrix(a, b)
        mean = float(C.entries.mean())
        exact = exact_ot_oracle(a, b)
        if mean == 0.0:
            continue
        cfg = SinkhornConfig(epsilon=eps_factor * mean, max_iterations=max_iterations,
                             marginal_tolerance=1e-9)
        approx = ot_cost(sinkhorn_plan(a, b, cfg, C), C)
        worst = max(worst, abs(approx - exact) / max(abs(exact), 1e-12))
    return PropertyResult("oracle_agreement", worst <= rel_tol, worst, rel_tol, cases)


def _pairs(rng, cases, max_points, max_dim):
    for _ in range(cases):
        d = int(rng.integers(1, max_dim + 1))
        yield (_uniform(rng, int(rng.integers(1, max_points + 1)), d),
               _uniform(rng, int(rng.integers(1, max_points + 1)), d))


def divergence_identities(cases=1000, max_points=6, max_dim=4, seed=0,
                          cfg: SinkhornConfig = TIGHT) -> list[PropertyResult]:
    """Symmetry, self-zero and nonnegativity of the debiased divergence."""
    rng = np.random.default_rng(seed)
    sym = zero = 0.0
    lowest = np.inf
    for a, b in _pairs(rng, cases, max_points, max_dim):
        s_ab = sinkhorn_divergence(a, b, cfg)
        s_ba = sinkhorn_divergence(b, a, cfg)
        sym = max(sym, abs(s_ab - s_ba))
        zero = max(zero, abs(sinkhorn_divergence(a, a, cfg)))
        lowest = min(lowest, s_ab, s_ba)
    return [
        PropertyResult("symmetry", sym <= 1e-9, sym, 1e-9, cases),
        PropertyResult("self_zero", zero <= 1e-6, zero, 1e-6, cases),
        # worst is the most negative value seen; passes when >= -tolerance
        PropertyResult("nonnegativity", lowest >= -1e-6, float(lowest), -1e-6, cases),
    ]


def _rel(g, ref):
    return float(np.linalg.norm(g - ref) / max(np.linalg.norm(ref), 1e-12))


def divergence_gradient_check(cases=20, max_points=5, max_dim=3, seed=0, h=1e-5,
                              cfg: SinkhornConfig = TIGHT) -> PropertyResult:
    """Envelope gradient w.r.t. the second batch vs central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for a, b in _pairs(rng, cases, max_points, max_dim):
        g = divergence_and_gradient(a, b, cfg).gradient
        fd = np.zeros_like(b.points)
        for idx in np.ndindex(*b.points.shape):
            y = b.points.copy()
            y[idx] += h
            up = sinkhorn_divergence(a, SampleBatch.uniform(y), cfg)
            y[idx] -= 2 * h
            down = sinkhorn_divergence(a, SampleBatch.uniform(y), cfg)
            fd[idx] = (up - down) / (2 * h)
        worst = max(worst, _rel(g, fd))
    return PropertyResult("divergence_gradient", worst <= 1e-3, worst, 1e-3, cases)


def parameter_gradient_check(cases=20, seed=0, h=1e-6, probes=12,
                             cfg: SinkhornConfig = TIGHT) -> PropertyResult:
    """Loss gradient w.r.t. generator parameters (backprop) vs central differences.

    Each case uses a small random generator and checks ``probes`` randomly
    chosen parameter entries.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(cases):
        d_z, d_c, d_out = 3, int(rng.integers(0, 3)), int(rng.integers(1, 4))
        model = GeneratorModel.init(d_z, d_c, d_out, (6, 5), seed=case)
        n = int(rng.integers(2, 6))
        z = rng.standard_normal((n, d_z))
        c = np.eye(d_c)[rng.integers(0, d_c, n)] if d_c else None
        real = _uniform(rng, n, d_out)

        def loss(m):
            out = _forward(m, _inputs(m, z, c))[-1]
            return sinkhorn_divergence(real, SampleBatch.uniform(out), cfg)

        out = _forward(model, _inputs(model, z, c))[-1]
        upstream = divergence_and_gradient(real, SampleBatch.uniform(out), cfg).gradient
        analytic = backward(model, z, c, upstream).parameters()
        params = model.parameters()
        got, ref = [], []
        for _ in range(probes):
            k = int(rng.integers(len(params)))
            idx = tuple(int(rng.integers(s)) for s in params[k].shape)
            bumped = []
            for sign in (1, -1):
                p = [q.copy() for q in params]
                p[k][idx] += sign * h
                bumped.append(loss(model.with_parameters(p)))
            got.append(analytic[k][idx])
            ref.append((bumped[0] - bumped[1]) / (2 * h))
        worst = max(worst, _rel(np.array(got), np.array(ref)))
    return PropertyResult("parameter_gradient", worst <= 1e-3, worst, 1e-3, cases)


def run_suite(seed=0, oracle_cases=200, identity_cases=1000, gradient_cases=20) -> list[PropertyResult]:
    return [
        oracle_agreement(oracle_cases, seed=seed),
        *divergence_identities(identity_cases, seed=seed),
        divergence_gradient_check(gradient_cases, seed=seed),
        parameter_gradient_check(gradient_cases, seed=seed),
    ]
