"""Command-line pipeline: preprocess, augment, train, score, oracle, report.

Every subcommand reads one YAML (or JSON) run config::

    seed: 0
    input: flows.csv            # or: synthetic: {n_benign: 2000, n_attack: 700}
    out: runs/demo
    benign_label: BENIGN
    schema: {label: label, flow_type: auto}
    preprocess: {rho_max: 0.95, n_trees: 50, unseen_policy: error}
    split: {train_fraction: 0.7}
    augment: {target_counts: {SYN-Flood: 500}}   # or target_counts: balance
    train: {latent_dim: 100, batch_size: 64, learning_rate: 2.0e-4, epochs: 10, epsilon: 0.05}
    score: {percentile: 95, latent_restarts: 4, latent_steps: 100}

Artifacts live in the output directory (``--out`` beats ``$SINKFLOW_OUT``
beats ``out:``). Training uses mini-batches of a single flow type and drops
the last partial batch of each type. Exit codes: 0 ok, 1 failed property,
2 usage or config error, 3 I/O error; errors are also printed to stderr as
one JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from sinkflow import kernels, validate
from sinkflow.augment import AugmentConfig, augment, balance_targets, fidelity
from sinkflow.detect import Calibration, DetectionReport, ScoreConfig, calibrate, classify
from sinkflow.errors import ConfigError, NumericError, SinkflowError
from sinkflow.evalkit import (
    confusion,
    export_curves,
    metrics,
    roc_auc,
    write_loss_curve,
    write_roc,
)
from sinkflow.netgen import TrainConfig, TrainTrace, model_from_bytes, model_to_bytes, train
from sinkflow.ot import SinkhornConfig
from sinkflow.tabprep import (
    BENIGN,
    PreprocessOptions,
    PreprocessPlan,
    SchemaHints,
    SplitSpec,
    fit_transform,
    ingest_csv,
    read_transformed,
    split,
    synth_flows,
    transform,
)

log = logging.getLogger("sinkflow")

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
OUT_ENV = "SINKFLOW_OUT"

PLAN_FILE = "plan.json"
TRAIN_CSV = "train.csv"
TEST_CSV = "test.csv"
AUGMENTED_CSV = "train_augmented.csv"
KS_REPORT = "ks_report.json"
MODEL_FILE = "model.sfg"
TRACE_FILE = "trace.json"
LOSS_CSV = "loss_curve.csv"
DETECTION_JSON = "detection.json"
DETECTION_CSV = "detection.csv"
METRICS_JSON = "metrics.json"
ROC_CSV = "roc.csv"

_TOP_KEYS = {"seed", "input", "synthetic", "out", "benign_label", "schema", "preprocess",
             "split", "augment", "train", "score", "oracle"}
_SINKHORN_KEYS = {"epsilon": "epsilon", "max_iterations": "max_iterations",
                  "marginal_tolerance": "marginal_tolerance"}


# -- config ------------------------------------------------------------------

def _section(raw, name, allowed):
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    unknown = sorted(set(sec) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    return dict(sec)


def _build(cls, name, **kwargs):
    try:
        return cls(**kwargs)
    except (SinkflowError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _field_names(cls, exclude=()):
    return {f.name for f in dataclasses.fields(cls)} - set(exclude)


def _train_config(sec, name, base: TrainConfig, seed):
    sink = {_SINKHORN_KEYS[k]: sec.pop(k) for k in list(sec) if k in _SINKHORN_KEYS}
    sinkhorn = _build(SinkhornConfig, name, **{**dataclasses.asdict(base.sinkhorn), **sink})
    if "hidden_dims" in sec:
        sec["hidden_dims"] = tuple(int(h) for h in sec["hidden_dims"])
    fields = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    fields.update(sec, sinkhorn=sinkhorn, seed=seed)
    return _build(TrainConfig, name, **fields)


_TRAIN_KEYS = _field_names(TrainConfig, ("seed", "sinkhorn")) | set(_SINKHORN_KEYS)


@dataclasses.dataclass
class RunConfig:
    seed: int
    base_dir: Path
    out: Path | None
    input: Path | None
    synthetic: dict | None
    benign_label: str
    hints: SchemaHints
    preprocess: PreprocessOptions
    split: SplitSpec
    augment: AugmentConfig
    balance: bool
    train: TrainConfig
    conditional: bool
    use_augmented: bool
    score: ScoreConfig
    threshold: float | None
    oracle: dict


def load_config(path, seed=None, out=None) -> RunConfig:
    """Parse and validate a run config; ``seed``/``out`` are command-line overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist or is not a regular file")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML/JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    seed = raw.get("seed") if seed is None else seed
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("an explicit nonnegative integer seed is required")
    base = path.resolve().parent

    out_dir = out or os.environ.get(OUT_ENV) or None
    if out_dir is not None:
        out_dir = Path(out_dir)
    elif raw.get("out") is not None:
        out_dir = base / str(raw["out"])

    if raw.get("input") is not None and raw.get("synthetic") is not None:
        raise ConfigError("give either 'input' or 'synthetic', not both")
    input_path = base / str(raw["input"]) if raw.get("input") is not None else None
    synthetic = _section(raw, "synthetic", {"n_benign", "n_attack"}) if "synthetic" in raw else None

    hints = _build(SchemaHints, "schema", **_section(raw, "schema", _field_names(SchemaHints)))
    if isinstance(hints.drop, list):
        hints = dataclasses.replace(hints, drop=tuple(hints.drop))
    prep = _section(raw, "preprocess", _field_names(PreprocessOptions, ("seed",)))
    prep = _build(PreprocessOptions, "preprocess", seed=seed, **prep)
    spl = _build(SplitSpec, "split",
                 seed=seed, **_section(raw, "split", _field_names(SplitSpec, ("seed",))))

    tr = _section(raw, "train", _TRAIN_KEYS | {"use_augmented", "conditional"})
    use_augmented = bool(tr.pop("use_augmented", False))
    conditional = bool(tr.pop("conditional", True))
    train_cfg = _train_config(tr, "train", TrainConfig(), seed)

    aug = _section(raw, "augment", {"target_counts", "log_frequency", "k_max", "min_updates", "train"})
    targets = aug.pop("target_counts", {}) or {}
    balance = targets == "balance"
    if balance:
        targets = {}
    if not isinstance(targets, dict):
        raise ConfigError("augment.target_counts must be a mapping or 'balance'")
    aug_train = _section(aug, "train", _TRAIN_KEYS)
    aug.pop("train", None)
    base_aug = AugmentConfig()
    aug_cfg = _build(AugmentConfig, "augment", seed=seed,
                     target_counts={str(k): int(v) for k, v in targets.items()},
                     train=_train_config(aug_train, "augment.train", base_aug.train, seed), **aug)

    sc = _section(raw, "score", _field_names(ScoreConfig, ("seed",)) | {"threshold"})
    threshold = sc.pop("threshold", None)
    score_cfg = _build(ScoreConfig, "score", seed=seed, **sc)
    oracle = _section(raw, "oracle", {"oracle_cases", "identity_cases", "gradient_cases"})

    return RunConfig(seed, base, out_dir, input_path, synthetic, str(raw.get("benign_label", BENIGN)),
                     hints, prep, spl, aug_cfg, balance, train_cfg, conditional, use_augmented,
                     score_cfg, None if threshold is None else float(threshold), oracle)


# -- io helpers ----------------------------------------------------------------

def _atomic_write(path: Path, data):
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp.write_bytes(data)
    tmp.replace(path)


def _csv_text(table, extra=None) -> str:
    buf = io.StringIO()
    table.to_csv(buf, extra)
    return buf.getvalue()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _out_dir(cfg: RunConfig, create=True) -> Path:
    if cfg.out is None:
        raise ConfigError(f"no output directory: pass --out, set ${OUT_ENV} or put 'out' in the config")
    if create:
        cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


def _require(out: Path, *names):
    missing = [n for n in names if not (out / n).is_file()]
    if missing:
        raise ConfigError(f"missing artifacts in {out}: {missing} (run the earlier stages first)")


def _load_plan(out: Path) -> PreprocessPlan:
    return PreprocessPlan.load(out / PLAN_FILE)


def _emit(obj):
    sys.stdout.write(_dump(obj))


# -- subcommands ---------------------------------------------------------------

def cmd_preprocess(cfg: RunConfig) -> int:
    if cfg.input is None and cfg.synthetic is None:
        raise ConfigError("preprocess needs 'input' (CSV path) or 'synthetic'")
    if cfg.input is not None and not cfg.input.is_file():
        raise ConfigError(f"input file {cfg.input} does not exist")
    out = _out_dir(cfg)
    if cfg.input is not None:
        raw = ingest_csv(cfg.input, cfg.hints)
    else:
        syn = cfg.synthetic
        raw = synth_flows(int(syn.get("n_benign", 2000)), int(syn.get("n_attack", 700)), cfg.seed)
    train_raw, test_raw = split(raw, cfg.split)
    train_t, plan = fit_transform(train_raw, cfg.preprocess)
    test_t = transform(test_raw, plan)
    _atomic_write(out / PLAN_FILE, plan.to_json())
    _atomic_write(out / TRAIN_CSV, _csv_text(train_t))
    _atomic_write(out / TEST_CSV, _csv_text(test_t))
    _emit({
        "plan": plan.fingerprint(),
        "kept_continuous": plan.continuous,
        "categorical": plan.categorical,
        "dropped_correlated": [{"feature": f, "kept_partner": p, "rho": r}
                               for f, p, r in plan.dropped_correlated],
        "zero_variance": plan.zero_variance,
        "dropped_columns": raw.provenance.get("dropped_columns", []),
        "parse_failures": raw.provenance.get("parse_failures", {}),
        "rows": {"train": len(train_t), "test": len(test_t),
                 "dropped_missing": train_t.provenance["rows_dropped_missing"]
                 + test_t.provenance["rows_dropped_missing"]},
        "test_out_of_range": test_t.provenance["out_of_range"],
    })
    return EXIT_OK


def _ks_summary(real, synthetic, labels) -> dict:
    classes = {}
    for label in labels:
        res = fidelity(real, synthetic, label)
        stats = [r.statistic for r in res.values()]
        classes[label] = {
            "median_ks": float(np.median(stats)) if stats else None,
            "features": {f: {"statistic": r.statistic, "p_value": r.p_value} for f, r in res.items()},
        }
    return {"classes": classes}


def cmd_augment(cfg: RunConfig) -> int:
    out = _out_dir(cfg, create=False)
    _require(out, PLAN_FILE, TRAIN_CSV)
    plan = _load_plan(out)
    table = read_transformed(out / TRAIN_CSV, plan)
    targets = balance_targets(table) if cfg.balance else dict(cfg.augment.target_counts)
    if not any(n > 0 for n in targets.values()):
        # nothing to synthesize: pass the training file through untouched
        _atomic_write(out / AUGMENTED_CSV, (out / TRAIN_CSV).read_bytes())
        _atomic_write(out / KS_REPORT, _dump({"classes": {}}))
        _emit({"synthesized": {}, "ks": {}})
        return EXIT_OK
    aug = augment(table, dataclasses.replace(cfg.augment, target_counts=targets))
    mask = aug.provenance["synthetic"]
    report = _ks_summary(table, aug.take(mask), sorted(k for k, n in targets.items() if n > 0))
    for info in aug.provenance["synthesis"]:
        report["classes"][info.label]["training"] = {
            "batch_size": info.batch_size, "epochs": info.epochs,
            "final_loss": info.final_loss, "clipped": info.clipped,
        }
    _atomic_write(out / AUGMENTED_CSV, _csv_text(aug, {"synthetic": mask.astype(np.int64)}))
    _atomic_write(out / KS_REPORT, _dump(report))
    _emit({"synthesized": {k: n for k, n in targets.items() if n > 0},
           "ks": {k: v["median_ks"] for k, v in report["classes"].items()}})
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg, create=False)
    source = AUGMENTED_CSV if cfg.use_augmented else TRAIN_CSV
    _require(out, PLAN_FILE, source)
    plan = _load_plan(out)
    table = read_transformed(out / source, plan)
    benign = table.take(table.labels == cfg.benign_label)
    if len(benign) == 0:
        raise ConfigError(f"no rows labelled {cfg.benign_label!r} in {source}")
    model, trace = train(benign, cfg.train, conditional=cfg.conditional)
    log.warning("training wall time %.2f s on %d benign rows", trace.wall_time_s, len(benign))
    trace_doc = {
        "plan": plan.fingerprint(),
        "model_version": model.version,
        "source": source,
        "rows": len(benign),
        "batch_size": trace.batch_size,
        "per_epoch_loss": trace.per_epoch_loss,
        "per_batch_loss": trace.per_batch_loss,
        "unconverged_batches": trace.unconverged_batches,
    }
    _atomic_write(out / MODEL_FILE, model_to_bytes(model))
    _atomic_write(out / TRACE_FILE, _dump(trace_doc))
    write_loss_curve(out / LOSS_CSV, trace.per_epoch_loss)
    first, last = trace.per_epoch_loss[0], trace.per_epoch_loss[-1]
    _emit({"epochs": len(trace.per_epoch_loss), "first_epoch_loss": first, "final_epoch_loss": last,
           "ratio": last / first if first else None, "unconverged_batches": trace.unconverged_batches})
    return EXIT_OK


def _load_trace(out: Path) -> dict | None:
    path = out / TRACE_FILE
    return json.loads(path.read_text(encoding="utf-8")) if path.is_file() else None


def cmd_score(cfg: RunConfig, threshold=None) -> int:
    out = _out_dir(cfg, create=False)
    _require(out, PLAN_FILE, MODEL_FILE, TEST_CSV, TRAIN_CSV)
    plan = _load_plan(out)
    model = model_from_bytes((out / MODEL_FILE).read_bytes())
    trace = _load_trace(out)
    if trace is not None and trace.get("plan") != plan.fingerprint():
        raise ConfigError(f"model was trained with plan {trace.get('plan')} but {PLAN_FILE} is "
                          f"plan {plan.fingerprint()} (version {plan.version})")
    test = read_transformed(out / TEST_CSV, plan)
    if len(plan.output_kinds()) - 1 != model.out_dim:
        raise ConfigError(f"model output width {model.out_dim} does not match plan "
                          f"{plan.fingerprint()} feature width {len(plan.output_kinds()) - 1}")
    threshold = cfg.threshold if threshold is None else threshold
    if threshold is not None:
        provenance = {"source": "override", "plan": plan.fingerprint()}
    else:
        train_t = read_transformed(out / TRAIN_CSV, plan)
        benign = train_t.take(train_t.labels == cfg.benign_label)
        cal: Calibration = calibrate(model, benign, cfg.score)
        threshold = cal.threshold
        provenance = {"source": "calibrated", "percentile": cal.percentile,
                      "rows": int(len(cal.rows)), "seed": cfg.score.seed, "plan": plan.fingerprint()}
    report = classify(model, test, threshold, cfg.score, provenance)
    truth = test.labels != cfg.benign_label
    _atomic_write(out / DETECTION_JSON, report.to_json())
    _atomic_write(out / DETECTION_CSV, report.to_csv())
    write_roc(out / ROC_CSV, report.scores, truth)
    if len(test) == 0:
        log.warning("test set is empty: wrote an empty report and no metrics")
        _emit({"rows": 0, "threshold": threshold})
        return EXIT_OK
    bundle = metrics(confusion(report.predicted, truth))
    if truth.any() and not truth.all():
        _, bundle.auc = roc_auc(report.scores, truth)
    _atomic_write(out / METRICS_JSON, bundle.to_json())
    _emit({"rows": len(test), "threshold": threshold, **{k: v for k, v in bundle.to_dict().items()
                                                         if k != "defined"}})
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    out = _out_dir(cfg, create=False)
    if not out.is_dir():
        raise ConfigError(f"output directory {out} does not exist")
    doc = _load_trace(out)
    trace = None if doc is None else TrainTrace(per_epoch_loss=doc["per_epoch_loss"])
    report, truth = None, None
    if (out / DETECTION_JSON).is_file():
        report = DetectionReport.from_dict(json.loads((out / DETECTION_JSON).read_text(encoding="utf-8")))
        if (out / PLAN_FILE).is_file() and (out / TEST_CSV).is_file():
            test = read_transformed(out / TEST_CSV, _load_plan(out))
            if len(test) == len(report.scores):
                truth = test.labels != cfg.benign_label
    if trace is None or report is None:
        log.warning("missing %s: curve files will be header-only; run train and score first",
                    TRACE_FILE if trace is None else DETECTION_JSON)
    paths = export_curves(trace, report, out, truth)
    _emit({name: p.name for name, p in paths.items()})
    return EXIT_OK


def cmd_oracle(cfg: RunConfig) -> int:
    results = validate.run_suite(seed=cfg.seed, **cfg.oracle)
    passed = all(r.passed for r in results)
    _emit({"seed": cfg.seed, "backend": kernels.BACKEND, "passed": passed,
           "properties": [r.to_dict() for r in results]})
    return EXIT_OK if passed else EXIT_PROPERTY


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinkflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("preprocess", "ingest, split, rank, prune, scale and one-hot encode"),
        ("augment", "synthesize minority-class rows into train_augmented.csv"),
        ("train", "fit the generator on benign training rows"),
        ("score", "calibrate a threshold and classify the test rows"),
        ("oracle", "run the OT validation suite"),
        ("report", "write loss, ROC and score-histogram CSVs"),
    ]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="YAML or JSON run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help=f"output directory (beats ${OUT_ENV} and the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "score":
            p.add_argument("--threshold", type=float, help="use this threshold instead of calibrating")
    return parser


COMMANDS = {
    "preprocess": cmd_preprocess,
    "augment": cmd_augment,
    "train": cmd_train,
    "score": cmd_score,
    "oracle": cmd_oracle,
    "report": cmd_report,
}


def _fail(code, exc) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "score":
            return cmd_score(cfg, args.threshold)
        return COMMANDS[args.command](cfg)
    except NumericError as exc:
        return _fail(EXIT_PROPERTY, exc)
    except (SinkflowError, pd.errors.ParserError) as exc:
        return _fail(EXIT_USAGE, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)


if __name__ == "__main__":
    sys.exit(main())
