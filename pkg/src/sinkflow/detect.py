"""One-class anomaly scoring against a generator trained on benign flows.

A row's score is the smallest divergence found between the row and a single
generated point, searched by gradient descent over the latent vector from
several seeded starts. For two single-point measures the debiased Sinkhorn
divergence is exactly the squared distance (both self terms vanish), so the
inner loop works on ``||x - G(z, c)||^2`` directly; ``tests/test_detect.py``
checks this against :func:`sinkflow.ot.sinkhorn_divergence`.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from sinkflow.errors import SchemaError, ValidationError
from sinkflow.netgen import GeneratorModel, _forward, _inputs, latent_gradient

BENIGN = "benign"
ANOMALY = "anomaly"


@dataclass(frozen=True)
class ScoreConfig:
    latent_restarts: int = 4
    latent_steps: int = 100
    latent_lr: float = 0.05
    score_batch: int = 256
    percentile: float = 95.0
    seed: int = 0
    # Flow-type index used for every row; None takes each row's own flow type.
    condition: int | None = None
    calibration_rows: int | None = None

    def __post_init__(self):
        if self.latent_restarts < 1 or self.latent_steps < 1 or self.score_batch < 1:
            raise ValidationError("latent_restarts, latent_steps and score_batch must be >= 1")
        if not 0 < self.percentile < 100:
            raise ValidationError("percentile must lie strictly between 0 and 100")
        if not self.latent_lr > 0:
            raise ValidationError("latent_lr must be > 0")
        if self.calibration_rows is not None and self.calibration_rows < 500:
            raise ValidationError("calibration subsample must keep at least 500 rows")


def initial_latents(cfg: ScoreConfig, row_id: int, latent_dim: int) -> np.ndarray:
    """Restart points for one row, from a stream keyed by ``(seed, row_id)``."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(row_id)]))
    return rng.standard_normal((cfg.latent_restarts, latent_dim))


def _latent_search(model, X, C, Z0, cfg):
    """Minimum ``||x - G(z, c)||^2`` over plain gradient-descent trajectories.

    ``X``/``C``/``Z0`` are already expanded to one row per (sample, restart).
    """
    z = Z0.copy()
    best = np.full(len(z), np.inf)
    for step in range(cfg.latent_steps + 1):
        acts = _forward(model, _inputs(model, z, C))
        diff = acts[-1] - X
        loss = np.einsum("ij,ij->i", diff, diff)
        np.minimum(best, loss, out=best)
        if step == cfg.latent_steps:
            break
        z = z - cfg.latent_lr * latent_gradient(model, acts, 2.0 * diff)
    return best


def _conditions(model, n, codes, cfg):
    if model.cond_dim == 0:
        return None
    if cfg.condition is not None:
        codes = np.full(n, cfg.condition)
    elif codes is None:
        raise SchemaError("conditional model needs per-row flow types or ScoreConfig.condition")
    if np.any((codes < 0) | (codes >= model.cond_dim)):
        raise SchemaError("flow-type code outside the model's condition range")
    return np.eye(model.cond_dim)[codes]


def score_matrix(model: GeneratorModel, X, cfg: ScoreConfig, codes=None, row_ids=None,
                 z_init=None) -> np.ndarray:
    """Anomaly score for every row of ``X`` (preprocessed features).

    ``z_init`` optionally supplies per-row restart points of shape
    ``(n, restarts, latent_dim)``, replacing the seeded draws.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n == 0:
        return np.zeros(0)
    if X.shape[1] != model.out_dim:
        raise SchemaError(f"row width {X.shape[1]} != generator output width {model.out_dim}")
    row_ids = np.arange(n) if row_ids is None else np.asarray(row_ids)
    C = _conditions(model, n, codes, cfg)
    scores = np.empty(n)
    for lo in range(0, n, cfg.score_batch):
        hi = min(lo + cfg.score_batch, n)
        if z_init is None:
            Z0 = np.concatenate([initial_latents(cfg, r, model.latent_dim) for r in row_ids[lo:hi]])
        else:
            Z0 = np.asarray(z_init[lo:hi], dtype=np.float64).reshape(-1, model.latent_dim)
        r = Z0.shape[0] // (hi - lo)
        Xr = np.repeat(X[lo:hi], r, axis=0)
        Cr = None if C is None else np.repeat(C[lo:hi], r, axis=0)
        best = _latent_search(model, Xr, Cr, Z0, cfg)
        scores[lo:hi] = best.reshape(hi - lo, r).min(axis=1)
    return scores


def score(model: GeneratorModel, x, c=None, cfg: ScoreConfig | None = None, *, row_id: int = 0,
          z_init=None) -> float:
    """Score one preprocessed row ``x`` under condition index/one-hot ``c``."""
    cfg = cfg or ScoreConfig()
    codes = None
    if c is not None:
        c = getattr(c, "one_hot", c)
        codes = np.array([int(np.argmax(c))]) if np.ndim(c) else np.array([int(c)])
    zi = None if z_init is None else np.asarray(z_init, dtype=np.float64)[None]
    return float(score_matrix(model, np.atleast_2d(x), cfg, codes, np.array([row_id]), zi)[0])


def score_table(model, t, cfg: ScoreConfig, row_ids=None) -> np.ndarray:
    return score_matrix(model, t.feature_matrix(), cfg, t.condition_codes(), row_ids)


def nearest_rank_percentile(values, percentile: float) -> float:
    """Smallest value with at least ``percentile`` % of ``values`` at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValidationError("percentile of an empty sample")
    if not 0 < percentile < 100:
        raise ValidationError("percentile must lie strictly between 0 and 100")
    rank = math.ceil(percentile / 100.0 * v.size - 1e-9)
    return float(v[max(rank, 1) - 1])


@dataclass
class Calibration:
    threshold: float
    scores: np.ndarray
    rows: np.ndarray
    percentile: float


def calibrate(model, benign_train, cfg: ScoreConfig | None = None) -> Calibration:
    """Threshold at the configured nearest-rank percentile of benign scores."""
    cfg = cfg or ScoreConfig()
    n = len(benign_train)
    if n == 0:
        raise ValidationError("calibration needs at least one benign row")
    rows = np.arange(n)
    if cfg.calibration_rows is not None and n > cfg.calibration_rows:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x63616C]))
        rows = np.sort(rng.choice(n, cfg.calibration_rows, replace=False))
    sub = benign_train.take(rows)
    scores = score_table(model, sub, cfg, row_ids=rows)
    return Calibration(nearest_rank_percentile(scores, cfg.percentile), scores, rows, cfg.percentile)


@dataclass
class DetectionReport:
    scores: np.ndarray
    threshold: float
    predicted: np.ndarray
    calibration_provenance: dict = field(default_factory=dict)
    timing: float = 0.0
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.predicted = np.asarray(self.predicted, dtype=bool)
        if self.row_ids is None:
            self.row_ids = np.arange(len(self.scores))

    @property
    def labels(self) -> list[str]:
        return [ANOMALY if p else BENIGN for p in self.predicted]

    def to_dict(self) -> dict:
        # timing is deliberately left out so identical runs give identical files
        return {
            "threshold": self.threshold,
            "scores": self.scores.tolist(),
            "labels": self.labels,
            "row_ids": [int(r) for r in self.row_ids],
            "provenance": self.calibration_provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row_id", "score", "predicted"])
        for r, s, lab in zip(self.row_ids, self.scores, self.labels):
            w.writerow([int(r), repr(float(s)), lab])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d) -> DetectionReport:
        return cls(np.array(d["scores"], dtype=np.float64), float(d["threshold"]),
                   np.array([lab == ANOMALY for lab in d["labels"]], dtype=bool),
                   d.get("provenance", {}), 0.0, np.array(d["row_ids"], dtype=np.int64))


def classify(model, t, threshold: float, cfg: ScoreConfig | None = None,
             provenance: dict | None = None) -> DetectionReport:
    """Score every row of ``t``; a row is an anomaly iff its score exceeds ``threshold``."""
    cfg = cfg or ScoreConfig()
    t0 = time.perf_counter()
    if len(t) == 0:
        scores = np.zeros(0)
    else:
        scores = score_table(model, t, cfg)
    return DetectionReport(scores, float(threshold), scores > threshold,
                           dict(provenance or {}), time.perf_counter() - t0)
