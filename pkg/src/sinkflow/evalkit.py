"""Evaluation: confusion metrics, ROC/AUC, two-sample KS and curve export.

Anomaly is the positive class everywhere.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import kolmogorov

from sinkflow.errors import SchemaError, ValidationError

METRIC_KEYS = ("precision", "recall", "f1", "accuracy", "auc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsBundle:
    precision: float
    recall: float
    f1: float
    accuracy: float
    auc: float | None = None
    roc_points: list[tuple[float, float, float]] = field(default_factory=list)
    # metric name -> False when it was a 0/0 and reported as 0
    defined: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in METRIC_KEYS}
        out["defined"] = dict(self.defined)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _as_bool(x, name):
    arr = np.asarray(x)
    if arr.dtype != bool:
        uniq = np.unique(arr)
        if not np.all(np.isin(uniq, [0, 1])):
            raise ValidationError(f"{name} must be binary (0/1 or bool)")
        arr = arr.astype(bool)
    return arr


def confusion(predicted, truth) -> ConfusionCounts:
    p = _as_bool(predicted, "predicted")
    t = _as_bool(truth, "truth")
    if p.shape != t.shape:
        raise SchemaError(f"length mismatch: {p.shape} vs {t.shape}")
    return ConfusionCounts(int(np.sum(p & t)), int(np.sum(p & ~t)),
                           int(np.sum(~p & ~t)), int(np.sum(~p & t)))


def _ratio(num, den):
    return (num / den, True) if den else (0.0, False)


def metrics(c: ConfusionCounts) -> MetricsBundle:
    """Precision, recall, F1 and accuracy; any 0/0 becomes 0 with ``defined`` False."""
    if c.total <= 0:
        raise ValidationError("metrics need at least one counted sample")
    precision, p_ok = _ratio(c.tp, c.tp + c.fp)
    recall, r_ok = _ratio(c.tp, c.tp + c.fn)
    f1, f_ok = _ratio(2 * precision * recall, precision + recall)
    accuracy = (c.tp + c.tn) / c.total
    return MetricsBundle(precision, recall, f1, accuracy,
                         defined={"precision": p_ok, "recall": r_ok, "f1": f_ok and p_ok and r_ok,
                                  "accuracy": True})


def roc_auc(scores, truth) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points ``(fpr, tpr, threshold)`` and trapezoidal AUC.

    Thresholds sweep every distinct score from high to low; tied scores move
    together as one diagonal step, so all-equal scores give AUC 0.5.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_bool(truth, "truth")
    if s.shape != y.shape:
        raise SchemaError(f"length mismatch: {s.shape} vs {y.shape}")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = [(float(a), float(b), float(t)) for a, b, t in zip(fpr, tpr, thresholds)]
    return points, auc


def mann_whitney_auc(scores, truth) -> float:
    """AUC as the normalized Mann-Whitney U statistic (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_bool(truth, "truth")
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("U statistic needs both classes")
    greater = np.sum(pos[:, None] > neg[None, :])
    ties = np.sum(pos[:, None] == neg[None, :])
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float


def ks_statistic(a, b) -> float:
    """``sup |F_a - F_b|`` by one sweep over the merged sorted samples."""
    x = np.sort(np.asarray(a, dtype=np.float64))
    y = np.sort(np.asarray(b, dtype=np.float64))
    if x.size == 0 or y.size == 0:
        raise ValidationError("KS test needs two nonempty samples")
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / x.size
    fy = np.searchsorted(y, grid, side="right") / y.size
    return float(np.max(np.abs(fx - fy)))


def ks_test(real, synth) -> KsResult:
    """Two-sample KS statistic with the asymptotic Kolmogorov p-value."""
    d = ks_statistic(real, synth)
    n, m = np.size(real), np.size(synth)
    en = n * m / (n + m)
    return KsResult(d, float(min(1.0, max(0.0, kolmogorov(np.sqrt(en) * d)))))


def ks_report(real: dict[str, np.ndarray], synth: dict[str, np.ndarray]) -> dict[str, KsResult]:
    """Per-feature KS results for the columns both mappings share."""
    return {name: ks_test(real[name], synth[name]) for name in real if name in synth}


def _fmt(x) -> str:
    return f"{x:.6g}"


def _write_csv(path: Path, header, rows):
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def histogram_rows(scores, bins: int = 20):
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        return []
    counts, edges = np.histogram(s, bins=bins)
    return [(_fmt(edges[i]), int(c)) for i, c in enumerate(counts)]


def write_loss_curve(path, per_epoch_loss) -> Path:
    """``epoch, mean_loss`` rows; losses keep full round-trip precision."""
    path = Path(path)
    _write_csv(path, ["epoch", "mean_loss"],
               [(i + 1, repr(float(v))) for i, v in enumerate(per_epoch_loss)])
    return path


def write_roc(path, scores, truth=None) -> Path:
    """``fpr, tpr, threshold`` rows; header only unless ``truth`` has both classes."""
    path = Path(path)
    rows = []
    scores = np.asarray(scores, dtype=np.float64)
    if truth is not None and scores.size:
        y = _as_bool(truth, "truth")
        if y.any() and not y.all():
            points, _ = roc_auc(scores, y)
            rows = [(_fmt(f), _fmt(t), _fmt(th)) for f, t, th in points]
    _write_csv(path, ["fpr", "tpr", "threshold"], rows)
    return path


def write_histogram(path, scores) -> Path:
    path = Path(path)
    _write_csv(path, ["bin", "count"], histogram_rows(scores))
    return path


def export_curves(trace, report, out_dir, truth=None) -> dict[str, Path]:
    """Write ``loss_curve.csv``, ``roc.csv`` and ``scores_hist.csv`` into ``out_dir``.

    Loss values are written with full round-trip precision; ROC and histogram
    values use six significant digits. Missing inputs give header-only files.
    Returns the written paths.
    """
    out = Path(out_dir)
    if not out.is_dir():
        raise OSError(f"output directory {out} does not exist")
    scores = np.zeros(0) if report is None else report.scores
    return {
        "loss_curve": write_loss_curve(out / "loss_curve.csv", [] if trace is None else trace.per_epoch_loss),
        "roc": write_roc(out / "roc.csv", scores, truth),
        "scores_hist": write_histogram(out / "scores_hist.csv", scores),
    }


def read_loss_curve(path) -> list[float]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["mean_loss"]) for r in rows]
