"""Flow-table ingestion and preprocessing.

Pipeline: schema-checked CSV ingestion, random-forest feature ranking,
Pearson-correlation pruning, min-max scaling of continuous features, one-hot
expansion of categoricals, and seeded (optionally stratified) splitting.
A fitted :class:`PreprocessPlan` serializes to JSON so scoring reproduces the
training-time transform exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from sinkflow.errors import IngestionError, ModelFormatError, SchemaError, ValidationError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
ONEHOT = "onehot"
LABEL = "label"

PLAN_FORMAT = "sinkflow-preprocess-plan"
PLAN_VERSION = 1


@dataclass
class FlowTable:
    """Mixed-type flow records plus per-column kinds.

    ``groups`` maps an encoded categorical feature to its one-hot column
    names; ``flow_type`` names the categorical feature used as the generator
    condition.
    """

    frame: pd.DataFrame
    kinds: dict[str, str]
    label: str = "label"
    flow_type: str | None = None
    groups: dict[str, list[str]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        cols = list(self.frame.columns)
        if len(set(cols)) != len(cols):
            raise SchemaError("duplicate column names")
        if set(cols) != set(self.kinds):
            raise SchemaError("kinds must cover exactly the frame's columns")
        labels = [c for c, k in self.kinds.items() if k == LABEL]
        if labels != [self.label]:
            raise SchemaError(f"expected exactly one label column {self.label!r}, found {labels}")

    def __len__(self):
        return len(self.frame)

    @property
    def columns(self) -> list[str]:
        return list(self.frame.columns)

    def columns_of(self, *kinds) -> list[str]:
        return [c for c in self.frame.columns if self.kinds[c] in kinds]

    @property
    def feature_columns(self) -> list[str]:
        return [c for c in self.frame.columns if self.kinds[c] != LABEL]

    def feature_matrix(self) -> np.ndarray:
        """Numeric design matrix of continuous and one-hot columns."""
        raw = self.columns_of(CATEGORICAL)
        if raw:
            raise SchemaError(f"categorical columns {raw} must be one-hot encoded first")
        return self.frame[self.columns_of(CONTINUOUS, ONEHOT)].to_numpy(dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return self.frame[self.label].astype(str).to_numpy()

    def condition_columns(self) -> list[str]:
        if self.flow_type is None:
            return []
        return list(self.groups.get(self.flow_type, []))

    def condition_codes(self) -> np.ndarray | None:
        """Integer flow-type code per row, or ``None`` when unconditioned."""
        cols = self.condition_columns()
        if not cols:
            return None
        block = self.frame[cols].to_numpy(dtype=np.float64)
        return np.argmax(block, axis=1)

    def take(self, index) -> FlowTable:
        """Rows at ``index`` (positions or boolean mask), schema unchanged."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return FlowTable(self.frame.iloc[index].reset_index(drop=True), dict(self.kinds),
                         self.label, self.flow_type, dict(self.groups), dict(self.provenance))

    def replace_frame(self, frame: pd.DataFrame, **provenance) -> FlowTable:
        prov = dict(self.provenance)
        prov.update(provenance)
        return FlowTable(frame.reset_index(drop=True), dict(self.kinds), self.label,
                         self.flow_type, dict(self.groups), prov)

    def to_csv(self, path, extra: dict[str, np.ndarray] | None = None):
        frame = self.frame
        if extra:
            frame = frame.assign(**extra)
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


@dataclass
class SchemaHints:
    label: str = "label"
    flow_type: str | None = "auto"
    kinds: dict[str, str] = field(default_factory=dict)
    drop: tuple[str, ...] = (r"^unnamed",)
    categorical_threshold: int = 20
    max_categories: int = 64


def _canon(name):
    return name.strip().lower()


def _find(columns, wanted):
    for c in columns:
        if _canon(c) == _canon(wanted):
            return c
    return None


def ingest_csv(path, hints: SchemaHints | None = None) -> FlowTable:
    """Read a header-first UTF-8 CSV into a typed :class:`FlowTable`.

    Numeric columns with fewer than ``categorical_threshold`` distinct values
    become categorical. Text columns with more than ``max_categories``
    distinct values are treated as identifiers and dropped. Unparseable and
    non-finite numeric cells become missing and are counted in
    ``provenance``.
    """
    hints = hints or SchemaHints()
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or all(not h.strip() for h in header):
            raise IngestionError(f"{path}: missing header row", row=1)
        names = [h.strip() for h in header]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise IngestionError(f"{path}: duplicate column names {dupes}", row=1)
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(names):
                raise IngestionError(
                    f"{path}: expected {len(names)} fields, found {len(row)}", row=reader.line_num)
            rows.append(row)
    label = _find(names, hints.label)
    if label is None:
        raise IngestionError(f"{path}: no label column named {hints.label!r}", row=1)

    raw = pd.DataFrame(rows, columns=names, dtype=object) if rows else pd.DataFrame(
        {n: pd.Series([], dtype=object) for n in names})
    dropped, failures, nonfinite = {}, {}, {}
    data, kinds = {}, {}
    forced = {(_find(names, k) or k): v for k, v in hints.kinds.items()}
    for name in names:
        col = raw[name].astype(str).str.strip()
        if name == label:
            data[name], kinds[name] = col, LABEL
            continue
        if name not in forced and any(re.search(p, name, re.IGNORECASE) for p in hints.drop):
            dropped[name] = "index column"
            continue
        present = col != ""
        num = pd.to_numeric(col.where(present), errors="coerce")
        parsed = num.notna() | col.str.lower().isin(["nan", "inf", "-inf", "infinity", "-infinity"])
        n_present = int(present.sum())
        is_numeric = n_present == 0 or parsed[present].mean() >= 0.5
        if is_numeric:
            bad = int((present & ~parsed).sum())
            if bad:
                failures[name] = bad
            inf = int(np.isinf(num.to_numpy(dtype=np.float64)).sum())
            if inf:
                nonfinite[name] = inf
            num = num.replace([np.inf, -np.inf], np.nan).astype(np.float64)
            kind = forced.get(name)
            if kind is None:
                kind = CATEGORICAL if num.nunique() < hints.categorical_threshold else CONTINUOUS
            data[name], kinds[name] = num, kind
            continue
        values = col.where(present)
        if name not in forced and values.nunique() > hints.max_categories:
            dropped[name] = "identifier-like text column"
            continue
        data[name], kinds[name] = values, CATEGORICAL

    flow_type = hints.flow_type
    if flow_type == "auto":
        flow_type = _find(list(data), "protocol")
    elif flow_type is not None:
        found = _find(list(data), flow_type)
        if found is None:
            raise IngestionError(f"{path}: flow-type column {flow_type!r} not found", row=1)
        flow_type = found
    if flow_type is not None:
        kinds[flow_type] = CATEGORICAL
    frame = pd.DataFrame(data)
    return FlowTable(frame, kinds, label, flow_type, {}, {
        "source": str(path),
        "rows": len(frame),
        "parse_failures": failures,
        "nonfinite": nonfinite,
        "dropped_columns": dropped,
    })


def _complete_rows(t: FlowTable, cols) -> np.ndarray:
    if not cols:
        return np.ones(len(t), dtype=bool)
    return t.frame[cols].notna().all(axis=1).to_numpy()


def _codes(series: pd.Series) -> np.ndarray:
    if series.dtype == object:
        codes, _ = pd.factorize(series, sort=True)
        return codes.astype(np.float64)
    return series.to_numpy(dtype=np.float64)


def rank_features(t: FlowTable, n_trees: int = 50, seed: int = 0, max_depth: int = 8,
                  max_rows: int | None = 20000) -> dict[str, float]:
    """Mean decrease in Gini impurity per feature from a seeded random forest."""
    from sklearn.ensemble import RandomForestClassifier

    feats = t.columns_of(CONTINUOUS, CATEGORICAL, ONEHOT)
    if not feats:
        raise ValidationError("no features to rank")
    sub = t.take(_complete_rows(t, feats))
    y = sub.labels
    if len(np.unique(y)) < 2:
        raise ValidationError("feature ranking needs at least two label classes")
    if max_rows is not None and len(sub) > max_rows:
        idx = np.sort(np.random.default_rng(seed).choice(len(sub), max_rows, replace=False))
        sub, y = sub.take(idx), y[idx]
    X = np.column_stack([_codes(sub.frame[c]) for c in feats])
    forest = RandomForestClassifier(n_estimators=n_trees, max_depth=max_depth, max_features="sqrt",
                                    bootstrap=True, random_state=seed, n_jobs=1)
    forest.fit(X, y)
    return {c: float(s) for c, s in zip(feats, forest.feature_importances_)}


@dataclass
class PruneResult:
    kept: list[str]
    dropped: list[tuple[str, str, float]]
    zero_variance: list[str]


def prune_correlated(t: FlowTable, scores: dict[str, float], rho_max: float = 0.95) -> PruneResult:
    """Greedy redundancy removal over continuous features.

    Features are visited by decreasing importance; one is dropped when its
    absolute Pearson correlation with an already-kept feature exceeds
    ``rho_max``. Constant columns are dropped for zero variance.
    """
    feats = t.columns_of(CONTINUOUS)
    missing = [c for c in feats if c not in scores]
    if missing:
        raise SchemaError(f"importance scores missing for {missing}")
    X = t.frame[feats].to_numpy(dtype=np.float64)
    X = X[np.all(np.isfinite(X), axis=1)] if len(X) else X
    order = sorted(range(len(feats)), key=lambda i: (-scores[feats[i]], i))
    kept, dropped, zero_var = [], [], []
    sd = X.std(axis=0) if len(X) else np.zeros(len(feats))
    Z = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0) if len(X) else X
    for i in order:
        if sd[i] == 0:
            zero_var.append(feats[i])
            continue
        worst, partner = 0.0, None
        for j in kept:
            rho = abs(float(np.mean(Z[:, i] * Z[:, j])))
            if rho > worst:
                worst, partner = rho, j
        if partner is not None and worst > rho_max:
            dropped.append((feats[i], feats[partner], worst))
        else:
            kept.append(i)
    kept_names = [feats[i] for i in sorted(kept)]
    return PruneResult(kept_names, dropped, zero_var)


@dataclass
class PreprocessOptions:
    rho_max: float = 0.95
    n_trees: int = 50
    max_depth: int = 8
    seed: int = 0
    rank: bool = True
    prune: bool = True
    top_k: int | None = None
    unseen_policy: str = "error"
    rank_max_rows: int | None = 20000


def _fmt_value(v):
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


@dataclass
class PreprocessPlan:
    label: str
    flow_type: str | None
    continuous: list[str]
    categorical: list[str]
    importance_scores: dict[str, float]
    dropped_correlated: list[tuple[str, str, float]]
    zero_variance: list[str]
    minmax_bounds: dict[str, tuple[float, float]]
    onehot_maps: dict[str, list]
    unseen_policy: str = "error"
    version: int = PLAN_VERSION

    @property
    def kept_features(self) -> list[str]:
        return self.continuous + self.categorical

    def onehot_columns(self, feature) -> list[str]:
        return [f"{feature}={_fmt_value(v)}" for v in self.onehot_maps[feature]]

    def output_kinds(self) -> dict[str, str]:
        kinds = {c: CONTINUOUS for c in self.continuous}
        for feat in self.categorical:
            kinds.update({c: ONEHOT for c in self.onehot_columns(feat)})
        kinds[self.label] = LABEL
        return kinds

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = PLAN_FORMAT
        d["dropped_correlated"] = [list(x) for x in self.dropped_correlated]
        d["minmax_bounds"] = {k: list(v) for k, v in self.minmax_bounds.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, text: str) -> PreprocessPlan:
        d = json.loads(text)
        if d.get("format") != PLAN_FORMAT:
            raise ModelFormatError("not a sinkflow preprocess plan")
        if d.get("version") != PLAN_VERSION:
            raise ModelFormatError(f"plan version {d.get('version')} unsupported (expected {PLAN_VERSION})")
        d.pop("format")
        d["dropped_correlated"] = [tuple(x) for x in d["dropped_correlated"]]
        d["minmax_bounds"] = {k: tuple(v) for k, v in d["minmax_bounds"].items()}
        return cls(**d)

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> PreprocessPlan:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def fit_transform(t: FlowTable, opts: PreprocessOptions | None = None) -> tuple[FlowTable, PreprocessPlan]:
    """Fit ranking, pruning, scaling and one-hot maps on ``t`` and apply them."""
    opts = opts or PreprocessOptions()
    if len(t) == 0:
        raise ValidationError("cannot fit preprocessing on an empty table")
    cont = t.columns_of(CONTINUOUS)
    cats = t.columns_of(CATEGORICAL)
    complete = t.take(_complete_rows(t, cont + cats))
    if len(complete) == 0:
        raise ValidationError("every row has a missing feature value")
    if opts.rank:
        scores = rank_features(complete, opts.n_trees, opts.seed, opts.max_depth, opts.rank_max_rows)
    else:
        scores = {c: 1.0 for c in cont + cats}
    if opts.prune:
        pruned = prune_correlated(complete, scores, opts.rho_max)
    else:
        pruned = PruneResult(list(cont), [], [])
    kept = pruned.kept
    if opts.top_k is not None:
        best = sorted(kept, key=lambda c: (-scores[c], cont.index(c)))[: opts.top_k]
        kept = [c for c in cont if c in best]
    fit_rows = t.take(_complete_rows(t, kept + cats))
    bounds = {}
    for c in kept:
        col = fit_rows.frame[c].to_numpy(dtype=np.float64)
        bounds[c] = (float(col.min()), float(col.max()))
    maps = {c: sorted(fit_rows.frame[c].dropna().unique().tolist(), key=lambda v: (str(type(v)), v))
            for c in cats}
    # kept constant columns (pruning skipped) map to 0 and are flagged here too
    zero_range = pruned.zero_variance + [c for c in kept if bounds[c][0] == bounds[c][1]]
    plan = PreprocessPlan(
        label=t.label, flow_type=t.flow_type, continuous=kept, categorical=cats,
        importance_scores=scores, dropped_correlated=pruned.dropped,
        zero_variance=zero_range, minmax_bounds=bounds, onehot_maps=maps,
        unseen_policy=opts.unseen_policy,
    )
    return transform(t, plan), plan


def transform(t: FlowTable, plan: PreprocessPlan, unseen_policy: str | None = None) -> FlowTable:
    """Apply a fitted plan using only the plan's statistics.

    Values outside the training range are reported (``provenance
    ['out_of_range']``), not clamped. A table the plan already produced is
    returned unchanged.
    """
    if t.provenance.get("plan") == plan.fingerprint():
        return t
    policy = unseen_policy or plan.unseen_policy
    if policy not in ("error", "zeros"):
        raise ValidationError(f"unknown unseen-category policy {policy!r}")
    need = plan.kept_features
    absent = [c for c in need if c not in t.kinds]
    if absent:
        raise SchemaError(f"table lacks plan features {absent}")
    keep = _complete_rows(t, need)
    src = t.frame[keep].reset_index(drop=True)
    out = {}
    out_of_range = {}
    for c in plan.continuous:
        lo, hi = plan.minmax_bounds[c]
        x = src[c].to_numpy(dtype=np.float64)
        scaled = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
        n_out = int(np.sum((scaled < 0) | (scaled > 1)))
        if n_out:
            out_of_range[c] = n_out
        out[c] = scaled
    for c in plan.categorical:
        values = plan.onehot_maps[c]
        index = {v: i for i, v in enumerate(values)}
        col = src[c].tolist()
        codes = np.array([index.get(v, -1) for v in col], dtype=np.int64)
        if np.any(codes < 0):
            unseen = sorted({str(v) for v, k in zip(col, codes) if k < 0})
            if policy == "error":
                raise ValidationError(f"column {c!r} has values unseen at fit time: {unseen}")
        block = np.zeros((len(col), len(values)))
        ok = codes >= 0
        block[np.flatnonzero(ok), codes[ok]] = 1.0
        for name, j in zip(plan.onehot_columns(c), range(len(values))):
            out[name] = block[:, j]
    out[plan.label] = src[plan.label].astype(str).to_numpy()
    frame = pd.DataFrame(out)
    groups = {c: plan.onehot_columns(c) for c in plan.categorical}
    prov = dict(t.provenance)
    prov.update(plan=plan.fingerprint(), rows_dropped_missing=int((~keep).sum()),
                out_of_range=out_of_range)
    flow_type = plan.flow_type if plan.flow_type in plan.categorical else None
    return FlowTable(frame, plan.output_kinds(), plan.label, flow_type, groups, prov)


def read_transformed(path, plan: PreprocessPlan) -> FlowTable:
    """Load a CSV written from a transformed table, restoring kinds from the plan.

    A ``synthetic`` provenance column, if present, is returned in
    ``provenance['synthetic']`` rather than as a feature.
    """
    kinds = plan.output_kinds()
    try:
        frame = pd.read_csv(path, dtype={plan.label: str}, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ValidationError(f"{path}: empty CSV (no header)") from None
    synthetic = None
    if "synthetic" in frame.columns and "synthetic" not in kinds:
        synthetic = frame.pop("synthetic").to_numpy(dtype=np.int64).astype(bool)
    if list(frame.columns) != list(kinds):
        raise SchemaError(f"{path}: columns do not match the plan's output schema")
    for c, k in kinds.items():
        if k != LABEL:
            frame[c] = frame[c].astype(np.float64)
    groups = {c: plan.onehot_columns(c) for c in plan.categorical}
    flow_type = plan.flow_type if plan.flow_type in plan.categorical else None
    prov = {"source": str(path), "rows": len(frame), "plan": plan.fingerprint()}
    if synthetic is not None:
        prov["synthetic"] = synthetic
    return FlowTable(frame, kinds, plan.label, flow_type, groups, prov)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    stratify_by_label: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValidationError("train_fraction must lie strictly between 0 and 1")


def split(t: FlowTable, spec: SplitSpec) -> tuple[FlowTable, FlowTable]:
    """Seeded partition into train/test, rows kept in original order."""
    if len(t) == 0:
        raise ValidationError("cannot split an empty table")
    rng = np.random.default_rng(spec.seed)
    train_idx = []
    if spec.stratify_by_label:
        labels = t.labels
        for cls in sorted(set(labels)):
            members = np.flatnonzero(labels == cls)
            if len(members) < 2:
                raise ValidationError(f"class {cls!r} has fewer than 2 rows; cannot stratify")
            k = int(round(spec.train_fraction * len(members)))
            k = min(max(k, 1), len(members) - 1)
            train_idx.append(rng.permutation(members)[:k])
    else:
        k = int(round(spec.train_fraction * len(t)))
        train_idx.append(rng.permutation(len(t))[:k])
    mask = np.zeros(len(t), dtype=bool)
    mask[np.concatenate(train_idx)] = True
    return t.take(mask), t.take(~mask)


# Per-class Gaussian parameters (mean, sd) of the synthetic flow generator.
# Benign is a two-mode mixture (TCP web sessions, UDP lookups); attacks
# emulate UDP floods and SYN floods: high packet rates, short inter-arrival
# times and almost no backward traffic.
SYNTH_FEATURES = (
    "flow_duration", "fwd_packets", "bwd_packets", "packets_per_s", "bytes_per_s",
    "mean_packet_len", "iat_mean", "iat_std", "down_up_ratio",
)
SYNTH_PROFILES = {
    #                  protocol, share, params in SYNTH_FEATURES order
    "benign_web": (6, 0.6, [(120, 30), (12, 3), (10, 3), (180, 40), (90, 20),
                            (500, 80), (6.0, 1.5), (4.0, 1.0), (0.8, 0.15)]),
    "benign_dns": (17, 0.4, [(20, 6), (2, 0.5), (2, 0.5), (200, 50), (30, 8),
                             (120, 20), (5.0, 1.2), (2.0, 0.6), (1.0, 0.1)]),
    "UDP-Flood": (17, 0.5, [(5, 2), (60, 10), (0.5, 0.3), (1600, 200), (700, 80),
                            (1100, 100), (0.6, 0.2), (0.2, 0.1), (0.01, 0.01)]),
    "SYN-Flood": (6, 0.5, [(3, 1), (25, 5), (0.3, 0.2), (1300, 150), (90, 15),
                           (60, 5), (0.8, 0.2), (0.3, 0.1), (0.01, 0.01)]),
}
BENIGN = "BENIGN"


def synth_flows(n_benign: int, n_attack: int, seed: int = 0) -> FlowTable:
    """Desk-scale stand-in for a labeled DDoS flow capture (see ``SYNTH_PROFILES``)."""
    if n_benign < 0 or n_attack < 0:
        raise ValidationError("row counts must be nonnegative")
    rng = np.random.default_rng(seed)
    parts = []

    def draw(profiles, n, label_of):
        if n == 0:
            return
        shares = np.array([SYNTH_PROFILES[p][1] for p in profiles])
        which = rng.choice(len(profiles), size=n, p=shares / shares.sum())
        for k, name in enumerate(profiles):
            m = int(np.sum(which == k))
            if m == 0:
                continue
            proto, _, params = SYNTH_PROFILES[name]
            cols = {f: np.maximum(rng.normal(mu, sd, m), 0.0) for f, (mu, sd) in zip(SYNTH_FEATURES, params)}
            cols["protocol"] = np.full(m, float(proto))
            cols["label"] = np.full(m, label_of(name), dtype=object)
            parts.append((np.flatnonzero(which == k), pd.DataFrame(cols)))

    draw(["benign_web", "benign_dns"], n_benign, lambda name: BENIGN)
    offset = len(parts)
    draw(["UDP-Flood", "SYN-Flood"], n_attack, lambda name: name)
    columns = ["protocol", *SYNTH_FEATURES, "label"]
    frames = []
    # restore draw order within benign and attack blocks
    for block in (parts[:offset], parts[offset:]):
        if block:
            idx = np.concatenate([i for i, _ in block])
            frame = pd.concat([f for _, f in block], ignore_index=True)
            frames.append(frame.iloc[np.argsort(idx, kind="stable")])
    frame = (pd.concat(frames, ignore_index=True) if frames
             else pd.DataFrame({c: pd.Series([], dtype=object if c == "label" else float) for c in columns}))
    frame = frame[columns].reset_index(drop=True)
    kinds = {c: CONTINUOUS for c in SYNTH_FEATURES}
    kinds.update(protocol=CATEGORICAL, label=LABEL)
    kinds = {c: kinds[c] for c in columns}
    return FlowTable(frame, kinds, "label", "protocol", {},
                     {"source": f"synth_flows(seed={seed})", "rows": len(frame)})
