"""Minority-class augmentation in a mode-specific encoding.

Each continuous column gets a 1-D Gaussian mixture (EM, components chosen by
BIC). A value ``x`` is encoded as the index ``k`` of its most responsible
component plus ``alpha = (x - mean_k) / (4 * sd_k)``; one-hot blocks pass
through. A Sinkhorn-trained generator (see :mod:`sinkflow.netgen`) is fitted
per target class in that encoded space and its samples are decoded back.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from sinkflow.errors import SchemaError, ValidationError
from sinkflow.evalkit import ks_test
from sinkflow.netgen import TrainConfig, generate_points, log_frequency_probabilities, train_matrix
from sinkflow.ot import SinkhornConfig
from sinkflow.tabprep import CONTINUOUS, ONEHOT, FlowTable

log = logging.getLogger(__name__)

SD_FLOOR = 1e-6
_LOG_2PI = math.log(2 * math.pi)


@dataclass
class ColumnModes:
    means: np.ndarray
    sds: np.ndarray
    weights: np.ndarray

    @property
    def k(self) -> int:
        return len(self.means)

    def log_resp(self, x) -> np.ndarray:
        """Unnormalized log responsibilities, shape ``(len(x), k)``."""
        x = np.asarray(x, dtype=np.float64)[:, None]
        z = (x - self.means) / self.sds
        return np.log(self.weights) - np.log(self.sds) - 0.5 * (_LOG_2PI + z * z)


def _logsumexp(a, axis):
    mx = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(mx, axis) + np.log(np.sum(np.exp(a - mx), axis=axis))


def _em(x, k, rng, max_iter=300, tol=1e-9):
    n = len(x)
    # k-means++ style seeding
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        centers.append(x[rng.integers(n)] if total == 0 else x[rng.choice(n, p=d2 / total)])
    spread = max(np.std(x), SD_FLOOR)
    modes = ColumnModes(np.array(centers, dtype=np.float64), np.full(k, spread), np.full(k, 1.0 / k))
    prev = -np.inf
    ll = prev
    for _ in range(max_iter):
        lr = modes.log_resp(x)
        norm = _logsumexp(lr, axis=1)
        ll = float(norm.sum())
        resp = np.exp(lr - norm[:, None])
        nk = resp.sum(axis=0) + 1e-12
        means = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - means) ** 2).sum(axis=0) / nk
        modes = ColumnModes(means, np.maximum(np.sqrt(var), SD_FLOOR), nk / nk.sum())
        if abs(ll - prev) <= tol * max(1.0, abs(ll)):
            break
        prev = ll
    ll = float(_logsumexp(modes.log_resp(x), axis=1).sum())
    return modes, ll


def bic(log_likelihood: float, k: int, n: int) -> float:
    return -2.0 * log_likelihood + (3 * k - 1) * math.log(n)


def fit_column(x, k_max: int = 5, seed: int = 0, n_init: int = 3) -> ColumnModes:
    """Gaussian mixture for one column with the BIC-best component count."""
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise ValidationError("cannot fit modes to an empty column")
    distinct = len(np.unique(x))
    if distinct == 1:
        return ColumnModes(np.array([x[0]]), np.array([SD_FLOOR]), np.array([1.0]))
    rng = np.random.default_rng(seed)
    best, best_bic = None, np.inf
    for k in range(1, min(k_max, distinct) + 1):
        fits = [_em(x, k, rng) for _ in range(1 if k == 1 else n_init)]
        modes, ll = max(fits, key=lambda f: f[1])
        score = bic(ll, k, x.size)
        if score < best_bic:
            best, best_bic = modes, score
    order = np.argsort(best.means)
    return ColumnModes(best.means[order], best.sds[order], best.weights[order])


@dataclass
class ModeModel:
    columns: dict[str, ColumnModes]

    def width(self) -> int:
        return sum(1 + m.k for m in self.columns.values())


def fit_modes(t: FlowTable, k_max: int = 5, seed: int = 0) -> ModeModel:
    cols = t.columns_of(CONTINUOUS)
    if not cols:
        raise ValidationError("no continuous columns to model")
    return ModeModel({c: fit_column(t.frame[c].to_numpy(dtype=np.float64), k_max, seed + i)
                      for i, c in enumerate(cols)})


@dataclass
class EncodedRows:
    """``alpha`` and ``mode`` are ``(n, n_continuous)``; ``clipped`` counts alpha clip events."""

    alpha: np.ndarray
    mode: np.ndarray
    clipped: int = 0


def encode(values, modes: ModeModel) -> EncodedRows:
    """Encode continuous values (``(n, n_continuous)``, columns in ``modes`` order)."""
    X = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if X.shape[1] != len(modes.columns):
        raise SchemaError(f"expected {len(modes.columns)} continuous columns, got {X.shape[1]}")
    alpha = np.empty_like(X)
    mode = np.empty(X.shape, dtype=np.int64)
    for j, m in enumerate(modes.columns.values()):
        k = np.argmax(m.log_resp(X[:, j]), axis=1)
        mode[:, j] = k
        alpha[:, j] = (X[:, j] - m.means[k]) / (4.0 * m.sds[k])
    clipped = int(np.sum(np.abs(alpha) > 1.0))
    return EncodedRows(np.clip(alpha, -1.0, 1.0), mode, clipped)


def decode(enc: EncodedRows, modes: ModeModel) -> np.ndarray:
    alpha = np.clip(np.asarray(enc.alpha, dtype=np.float64), -1.0, 1.0)
    if alpha.shape[1] != len(modes.columns):
        raise SchemaError(f"expected {len(modes.columns)} encoded columns, got {alpha.shape[1]}")
    out = np.empty_like(alpha)
    for j, m in enumerate(modes.columns.values()):
        k = enc.mode[:, j]
        out[:, j] = alpha[:, j] * 4.0 * m.sds[k] + m.means[k]
    return out


class TableEncoder:
    """Flat generator-space layout: ``[alpha, beta one-hot]`` per continuous column, then one-hot blocks."""

    def __init__(self, t: FlowTable, modes: ModeModel):
        self.modes = modes
        self.continuous = list(modes.columns)
        self.blocks = {g: cols for g, cols in t.groups.items()}
        self.schema = list(t.columns)

    def encode_table(self, t: FlowTable) -> tuple[np.ndarray, int]:
        enc = encode(t.frame[self.continuous].to_numpy(dtype=np.float64), self.modes)
        parts = []
        for j, m in enumerate(self.modes.columns.values()):
            parts.append(enc.alpha[:, j : j + 1])
            parts.append(np.eye(m.k)[enc.mode[:, j]])
        for cols in self.blocks.values():
            parts.append(t.frame[cols].to_numpy(dtype=np.float64))
        return np.hstack(parts), enc.clipped

    def decode_matrix(self, M) -> dict[str, np.ndarray]:
        M = np.asarray(M, dtype=np.float64)
        n = M.shape[0]
        alpha = np.empty((n, len(self.continuous)))
        mode = np.empty((n, len(self.continuous)), dtype=np.int64)
        off = 0
        for j, m in enumerate(self.modes.columns.values()):
            alpha[:, j] = M[:, off]
            mode[:, j] = np.argmax(M[:, off + 1 : off + 1 + m.k], axis=1)
            off += 1 + m.k
        values = decode(EncodedRows(alpha, mode), self.modes)
        out = {c: values[:, j] for j, c in enumerate(self.continuous)}
        for cols in self.blocks.values():
            block = M[:, off : off + len(cols)]
            hot = np.eye(len(cols))[np.argmax(block, axis=1)]
            out.update({c: hot[:, i] for i, c in enumerate(cols)})
            off += len(cols)
        return out


def sample_conditions(t: FlowTable, n: int, seed: int = 0, column: str | None = None) -> np.ndarray:
    """Draw ``n`` class values with probability proportional to ``log(1 + count)``.

    ``column`` defaults to the label column.
    """
    col = t.label if column is None else column
    values, counts = np.unique(t.frame[col].astype(str).to_numpy(), return_counts=True)
    if values.size == 0:
        raise ValidationError("no classes to sample from")
    probs = log_frequency_probabilities(counts)
    rng = np.random.default_rng(seed)
    return values[rng.choice(values.size, size=n, p=probs)]


def _augment_defaults() -> TrainConfig:
    # Capped Sinkhorn solves: the one-hot mode indicators make encoded-space
    # costs large relative to epsilon, and full convergence buys no fidelity.
    return TrainConfig(latent_dim=32, batch_size=64, learning_rate=1e-3, epochs=10,
                       condition_sampling="log_frequency",
                       sinkhorn=SinkhornConfig(epsilon=0.05, max_iterations=100))


@dataclass
class AugmentConfig:
    target_counts: dict[str, int] = field(default_factory=dict)
    log_frequency: bool = True
    seed: int = 0
    k_max: int = 5
    train: TrainConfig = field(default_factory=_augment_defaults)
    # epochs are raised until each class generator sees at least this many updates
    min_updates: int = 400

    def __post_init__(self):
        bad = {k: v for k, v in self.target_counts.items() if v < 0}
        if bad:
            raise ValidationError(f"target counts must be nonnegative: {bad}")


@dataclass
class ClassSynthesis:
    label: str
    rows: int
    batch_size: int
    epochs: int
    final_loss: float
    clipped: int


def balance_targets(t: FlowTable) -> dict[str, int]:
    """Counts that lift every class to the size of the largest one."""
    values, counts = np.unique(t.labels, return_counts=True)
    top = counts.max() if counts.size else 0
    return {str(v): int(top - c) for v, c in zip(values, counts) if top > c}


def synthesize_class(t: FlowTable, label: str, count: int, cfg: AugmentConfig,
                     class_index: int) -> tuple[pd.DataFrame, ClassSynthesis]:
    """Train one class generator and decode ``count`` synthetic rows for ``label``."""
    real = t.take(t.labels == label)
    if len(real) < 2:
        raise ValidationError(f"class {label!r} has {len(real)} rows; need at least 2 to synthesize")
    seed_seq = np.random.SeedSequence([cfg.seed, class_index])
    class_seed = int(seed_seq.generate_state(1)[0])
    modes = fit_modes(real, cfg.k_max, class_seed % (2**31))
    encoder = TableEncoder(real, modes)
    M, clipped = encoder.encode_table(real)
    codes = real.condition_codes()
    n_groups = len(real.condition_columns()) if codes is not None else 0
    tc = replace(cfg.train, seed=class_seed % (2**31),
                 condition_sampling="log_frequency" if cfg.log_frequency else "stratified")
    batch = tc.batch_size
    if len(real) < 2 * batch:
        batch = max(2, len(real) // 2)
        log.warning("class %r: batch size reduced from %d to %d (%d rows)", label, tc.batch_size, batch, len(real))
    per_epoch = max(1, len(real) // batch)
    epochs = max(tc.epochs, math.ceil(cfg.min_updates / per_epoch))
    tc = replace(tc, batch_size=batch, epochs=epochs)
    model, trace = train_matrix(M, codes, n_groups, tc)

    rng = np.random.default_rng(seed_seq.spawn(1)[0])
    z = rng.standard_normal((count, tc.latent_dim))
    cond = None
    if n_groups:
        # generated flow types follow the class's empirical mix
        freq = np.bincount(codes, minlength=n_groups) / len(codes)
        cond = np.eye(n_groups)[rng.choice(n_groups, size=count, p=freq)]
    values = encoder.decode_matrix(generate_points(model, z, cond))
    values[t.label] = np.full(count, label, dtype=object)
    frame = pd.DataFrame({c: values[c] for c in t.columns})
    return frame, ClassSynthesis(label, count, batch, epochs, trace.per_epoch_loss[-1], clipped)


def augment(t: FlowTable, cfg: AugmentConfig) -> FlowTable:
    """Append synthetic rows per ``cfg.target_counts``; schema is unchanged.

    The result's ``provenance['synthetic']`` marks generated rows and
    ``provenance['synthesis']`` records per-class training details.
    """
    kinds = set(t.kinds.values())
    if not kinds <= {CONTINUOUS, ONEHOT, "label"}:
        raise SchemaError("augment expects a preprocessed table (continuous and one-hot columns)")
    labels = sorted(set(t.labels))
    unknown = [c for c, n in cfg.target_counts.items() if n > 0 and c not in labels]
    if unknown:
        raise ValidationError(f"target classes not present in table: {unknown}")
    frames = [t.frame]
    details = []
    for label in labels:
        n = cfg.target_counts.get(label, 0)
        if n <= 0:
            continue
        frame, info = synthesize_class(t, label, n, cfg, labels.index(label))
        frames.append(frame)
        details.append(info)
    mask = np.zeros(sum(len(f) for f in frames), dtype=bool)
    mask[len(t):] = True
    frame = pd.concat(frames, ignore_index=True) if len(frames) > 1 else t.frame.copy()
    return t.replace_frame(frame, synthetic=mask, synthesis=details)


def fidelity(real: FlowTable, synthetic: FlowTable, label: str | None = None) -> dict:
    """Per-feature KS of real vs synthetic rows (optionally one class only)."""
    if label is not None:
        real = real.take(real.labels == label)
        synthetic = synthetic.take(synthetic.labels == label)
    cols = real.columns_of(CONTINUOUS, ONEHOT)
    return {c: ks_test(real.frame[c].to_numpy(dtype=np.float64),
                       synthetic.frame[c].to_numpy(dtype=np.float64)) for c in cols}
