"""Conditional MLP generator trained by minimizing debiased Sinkhorn divergence.

The generator maps ``[z, c]`` (latent noise concatenated with a one-hot
flow-type condition) through ReLU hidden layers to a linear output in the
preprocessed feature space. Forward/backward passes and Adam are written
out in numpy; the upstream gradient of each mini-batch loss comes from
:func:`sinkflow.ot.divergence_and_gradient`.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sinkflow.errors import ModelFormatError, NumericError, SchemaError, ValidationError
from sinkflow.ot import SampleBatch, SinkhornConfig, divergence_and_gradient

log = logging.getLogger(__name__)

MODEL_MAGIC = b"SFGEN\x00\x00\x01"
MODEL_VERSION = 1
DEFAULT_HIDDEN = (128, 256, 256)


@dataclass
class GeneratorModel:
    """Dense ReLU network; ``weights[k]`` has shape ``(layer_dims[k], layer_dims[k+1])``."""

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    latent_dim: int
    cond_dim: int = 0
    seed: int = 0
    version: int = MODEL_VERSION

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        self.layer_dims = dims
        if dims[0] != self.latent_dim + self.cond_dim:
            raise SchemaError(f"input width {dims[0]} != latent {self.latent_dim} + condition {self.cond_dim}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise SchemaError("one weight matrix and bias per layer transition required")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[k], dims[k + 1]) or b.shape != (dims[k + 1],):
                raise SchemaError(f"layer {k} parameter shapes {W.shape}, {b.shape} do not chain")

    @classmethod
    def init(cls, latent_dim: int, cond_dim: int, out_dim: int,
             hidden=DEFAULT_HIDDEN, seed: int = 0) -> GeneratorModel:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization, seeded."""
        dims = (latent_dim + cond_dim, *hidden, out_dim)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E6574]))
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, fan_out))
        return cls(dims, weights, biases, latent_dim, cond_dim, seed)

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def with_parameters(self, params) -> GeneratorModel:
        params = list(params)
        return replace(self, weights=params[0::2], biases=params[1::2])

    def copy(self) -> GeneratorModel:
        return self.with_parameters([p.copy() for p in self.parameters()])


@dataclass(frozen=True)
class ConditionVector:
    one_hot: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.one_hot, dtype=np.float64)
        if v.ndim != 1 or v.size < 1 or np.sum(v == 1.0) != 1 or np.sum(v != 0.0) != 1:
            raise ValidationError("condition must be a one-hot vector")
        object.__setattr__(self, "one_hot", v)

    @classmethod
    def of(cls, index: int, n: int) -> ConditionVector:
        v = np.zeros(n)
        v[index] = 1.0
        return cls(v)


def _inputs(model: GeneratorModel, z, c) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != model.latent_dim:
        raise SchemaError(f"latent width {z.shape[1]} != model latent_dim {model.latent_dim}")
    if model.cond_dim == 0:
        if c is not None and np.size(c.one_hot if isinstance(c, ConditionVector) else c):
            raise SchemaError("model is unconditioned but a condition was given")
        return z
    if c is None:
        raise SchemaError("model needs a condition vector")
    cm = c.one_hot if isinstance(c, ConditionVector) else np.asarray(c, dtype=np.float64)
    cm = np.broadcast_to(cm, (z.shape[0], cm.shape[-1])) if cm.ndim == 1 else cm
    if cm.shape != (z.shape[0], model.cond_dim):
        raise SchemaError(f"condition shape {cm.shape} != ({z.shape[0]}, {model.cond_dim})")
    return np.hstack([z, cm])


def _forward(model: GeneratorModel, x):
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def generate_points(model: GeneratorModel, z, c=None) -> np.ndarray:
    return _forward(model, _inputs(model, z, c))[-1]


def generate(model: GeneratorModel, z, c=None) -> SampleBatch:
    """Forward pass; rows of the result are uniformly weighted samples."""
    return SampleBatch.uniform(generate_points(model, z, c))


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    latent: np.ndarray

    def parameters(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def _backward(model, acts, upstream) -> Gradients:
    last = len(model.weights) - 1
    gW, gb = [None] * (last + 1), [None] * (last + 1)
    delta = upstream
    for k in range(last, -1, -1):
        gW[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        delta = delta @ model.weights[k].T
        if k > 0:
            delta = delta * (acts[k] > 0)
    return Gradients(gW, gb, delta[:, : model.latent_dim])


def latent_gradient(model, acts, upstream) -> np.ndarray:
    """``dL/dz`` only; skips the weight gradients :func:`_backward` would form."""
    delta = upstream
    for k in range(len(model.weights) - 1, 0, -1):
        delta = (delta @ model.weights[k].T) * (acts[k] > 0)
    return delta @ model.weights[0][: model.latent_dim].T


def backward(model: GeneratorModel, z, c, upstream) -> Gradients:
    """Parameter (and latent) gradients given ``dL/d output`` of shape ``(B, d_out)``."""
    x = _inputs(model, z, c)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (x.shape[0], model.out_dim):
        raise SchemaError(f"upstream shape {upstream.shape} != ({x.shape[0]}, {model.out_dim})")
    return _backward(model, _forward(model, x), upstream)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, model: GeneratorModel) -> AdamState:
        params = model.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 100
    batch_size: int = 64
    learning_rate: float = 2e-4
    epochs: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    hidden_dims: tuple[int, ...] = DEFAULT_HIDDEN
    # "stratified": every full batch of every flow type once per epoch.
    # "log_frequency": batch flow types drawn with probability ~ log(1 + count).
    condition_sampling: str = "stratified"

    def __post_init__(self):
        for name in ("latent_dim", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not self.learning_rate > 0 or not self.adam_eps > 0:
            raise ValidationError("learning_rate and adam_eps must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if self.condition_sampling not in ("stratified", "log_frequency"):
            raise ValidationError(f"unknown condition_sampling {self.condition_sampling!r}")


def adam_step(model: GeneratorModel, grads: Gradients, state: AdamState,
              cfg: TrainConfig) -> tuple[GeneratorModel, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    gs = grads.parameters()
    names = [f"{kind}[{k}]" for k in range(len(model.weights)) for kind in ("weights", "biases")]
    for name, g in zip(names, gs):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_m = [b1 * m + (1 - b1) * g for m, g in zip(state.m, gs)]
    new_v = [b2 * v + (1 - b2) * g * g for v, g in zip(state.v, gs)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    params = [p - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
              for p, m, v in zip(model.parameters(), new_m, new_v)]
    return model.with_parameters(params), AdamState(new_m, new_v, t)


@dataclass
class TrainTrace:
    per_epoch_loss: list[float] = field(default_factory=list)
    per_batch_loss: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    unconverged_batches: int = 0
    batch_size: int = 0


def log_frequency_probabilities(counts) -> np.ndarray:
    """Class probabilities proportional to ``log(1 + count)``."""
    w = np.log1p(np.asarray(counts, dtype=np.float64))
    if w.size == 0 or not np.any(w > 0):
        raise ValidationError("need at least one class with a positive count")
    return w / w.sum()


def _epoch_batches(codes, n_groups, batch_size, rng, sampling):
    """Row-index batches for one epoch; every batch holds a single flow type."""
    groups = [np.flatnonzero(codes == g) for g in range(n_groups)]
    if sampling == "log_frequency":
        counts = [len(g) for g in groups]
        probs = log_frequency_probabilities(counts)
        n_batches = max(1, sum(counts) // batch_size)
        out = []
        for g in rng.choice(n_groups, size=n_batches, p=probs):
            members = groups[g]
            out.append(rng.choice(members, size=batch_size, replace=len(members) < batch_size))
        return out
    out = []
    for members in groups:
        perm = rng.permutation(members)
        # trailing partial batch is dropped
        out.extend(perm[i : i + batch_size] for i in range(0, len(perm) - batch_size + 1, batch_size))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def _check_training_table(benign):
    X = benign.feature_matrix()
    if X.shape[0] == 0:
        raise ValidationError("training table is empty")
    if not np.all(np.isfinite(X)):
        raise ValidationError("training features contain non-finite values")
    if X.min() < -1e-9 or X.max() > 1 + 1e-9:
        raise ValidationError("training features must be min-max normalized to [0, 1]")
    return X


def train(benign, cfg: TrainConfig, *, conditional: bool = True):
    """Fit a generator to ``benign`` (a preprocessed FlowTable).

    Returns ``(model, trace)``. Each mini-batch holds a single flow type whose
    one-hot code is the batch condition; ``conditional=False`` (or a table
    without a flow-type block) trains the unconditioned generator.
    """
    X = _check_training_table(benign)
    codes = benign.condition_codes() if conditional else None
    n_groups = len(benign.condition_columns()) if codes is not None else 0
    return train_matrix(X, codes, n_groups, cfg)


def train_matrix(X, codes, n_groups: int, cfg: TrainConfig):
    """Training loop on a raw design matrix; ``codes`` is None when unconditioned."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("training matrix is empty")
    if codes is None or n_groups == 0:
        codes, n_groups = np.zeros(len(X), dtype=np.int64), 0
    batch_size = cfg.batch_size
    largest = max(np.bincount(codes, minlength=max(n_groups, 1)))
    if cfg.condition_sampling == "stratified" and largest < batch_size:
        batch_size = max(2, int(largest))
        log.warning("batch size reduced from %d to %d: no flow type has enough rows",
                    cfg.batch_size, batch_size)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x747261]))
    model = GeneratorModel.init(cfg.latent_dim, n_groups, X.shape[1], cfg.hidden_dims, cfg.seed)
    state = AdamState.zeros_like(model)
    trace = TrainTrace(batch_size=batch_size)
    eye = np.eye(n_groups)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _epoch_batches(codes, max(n_groups, 1), batch_size, rng, cfg.condition_sampling):
            real = SampleBatch.uniform(X[idx])
            z = rng.standard_normal((len(idx), cfg.latent_dim))
            cond = eye[codes[idx[0]]] if n_groups else None
            acts = _forward(model, _inputs(model, z, cond))
            res = divergence_and_gradient(real, SampleBatch.uniform(acts[-1]), cfg.sinkhorn)
            if not res.converged:
                trace.unconverged_batches += 1
            model, state = adam_step(model, _backward(model, acts, res.gradient), state, cfg)
            losses.append(res.value)
        trace.per_batch_loss.extend(losses)
        trace.per_epoch_loss.append(float(np.mean(losses)))
        log.info("epoch %d/%d mean sinkhorn loss %.6f", epoch + 1, cfg.epochs, trace.per_epoch_loss[-1])
    trace.wall_time_s = time.perf_counter() - t0
    return model, trace


_HEADER = struct.Struct("<8sII")


def model_to_bytes(model: GeneratorModel) -> bytes:
    """Header (magic, version, layer dims, d_z, d_c, seed) then little-endian float64 blocks."""
    dims = model.layer_dims
    parts = [
        _HEADER.pack(MODEL_MAGIC, model.version, len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
        struct.pack("<IIq", model.latent_dim, model.cond_dim, model.seed),
    ]
    for p in model.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> GeneratorModel:
    if len(data) < _HEADER.size:
        raise ModelFormatError("truncated model file")
    magic, version, n_dims = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError("not a sinkflow generator file")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"model version {version} unsupported (expected {MODEL_VERSION})")
    off = _HEADER.size
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    d_z, d_c, seed = struct.unpack_from("<IIq", data, off)
    off += struct.calcsize("<IIq")
    params = []
    for shape in [s for a, b in zip(dims[:-1], dims[1:]) for s in ((a, b), (b,))]:
        count = int(np.prod(shape))
        if off + 8 * count > len(data):
            raise ModelFormatError("truncated parameter block")
        params.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape))
        off += 8 * count
    if off != len(data):
        raise ModelFormatError("trailing bytes after parameter blocks")
    return GeneratorModel(dims, params[0::2], params[1::2], d_z, d_c, seed, version)


def save_model(model: GeneratorModel, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> GeneratorModel:
    return model_from_bytes(Path(path).read_bytes())
