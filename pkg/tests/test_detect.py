import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sinkflow.detect import (
    ANOMALY,
    BENIGN,
    DetectionReport,
    ScoreConfig,
    calibrate,
    classify,
    initial_latents,
    nearest_rank_percentile,
    score,
    score_matrix,
    score_table,
)
from sinkflow.errors import SchemaError, ValidationError
from sinkflow.netgen import ConditionVector, GeneratorModel, TrainConfig, generate_points, train
from sinkflow.ot import SampleBatch, SinkhornConfig, sinkhorn_divergence
from sinkflow.tabprep import BENIGN as BENIGN_LABEL
from sinkflow.tabprep import PreprocessOptions, fit_transform, synth_flows, transform

QUICK = ScoreConfig(latent_restarts=2, latent_steps=40)


@pytest.fixture(scope="module")
def toy():
    raw = synth_flows(1200, 400, seed=10)
    table, plan = fit_transform(raw, PreprocessOptions(n_trees=10))
    benign = table.take(table.labels == BENIGN_LABEL)
    model, _ = train(benign, TrainConfig(seed=0))
    return model, benign, table.take(table.labels != BENIGN_LABEL), plan


@pytest.fixture(scope="module")
def small_model():
    return GeneratorModel.init(4, 2, 3, (8, 8), seed=1)


def test_score_config_validation():
    for bad in (dict(latent_restarts=0), dict(latent_steps=0), dict(percentile=100),
                dict(percentile=0), dict(latent_lr=0), dict(calibration_rows=100)):
        with pytest.raises(ValidationError):
            ScoreConfig(**bad)


def test_singleton_divergence_is_squared_distance(rng):
    for _ in range(10):
        x, y = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        s = sinkhorn_divergence(SampleBatch.uniform(x), SampleBatch.uniform(y), SinkhornConfig())
        assert s == pytest.approx(float(np.sum((x - y) ** 2)), rel=1e-12, abs=1e-15)


def test_achievable_zero(small_model, rng):
    z0 = rng.standard_normal(4)
    c = ConditionVector.of(1, 2)
    x = generate_points(small_model, z0[None], c)[0]
    z_init = np.vstack([rng.standard_normal(4), z0])
    assert score(small_model, x, c, QUICK, z_init=z_init) <= 1e-6


def test_scores_are_nonnegative_and_deterministic(small_model, rng):
    X = rng.random((30, 3))
    codes = rng.integers(0, 2, 30)
    a = score_matrix(small_model, X, QUICK, codes)
    b = score_matrix(small_model, X, QUICK, codes)
    assert np.all(a >= -1e-6)
    assert a.tobytes() == b.tobytes()
    # per-row streams: scoring a subset by row id gives the same values
    sub = score_matrix(small_model, X[[3, 17]], QUICK, codes[[3, 17]], row_ids=np.array([3, 17]))
    np.testing.assert_array_equal(sub, a[[3, 17]])


def test_batching_does_not_change_scores(small_model, rng):
    X = rng.random((25, 3))
    codes = rng.integers(0, 2, 25)
    a = score_matrix(small_model, X, QUICK, codes)
    b = score_matrix(small_model, X, ScoreConfig(latent_restarts=2, latent_steps=40, score_batch=7), codes)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_restart_prefix_and_monotonicity(small_model, rng):
    one = ScoreConfig(latent_restarts=1, latent_steps=30, seed=4)
    four = ScoreConfig(latent_restarts=4, latent_steps=30, seed=4)
    np.testing.assert_array_equal(initial_latents(four, 9, 4)[:1], initial_latents(one, 9, 4))
    X = rng.random((20, 3))
    codes = np.zeros(20, dtype=int)
    assert np.all(score_matrix(small_model, X, four, codes) <= score_matrix(small_model, X, one, codes))


def test_condition_errors(small_model, rng):
    X = rng.random((3, 3))
    with pytest.raises(SchemaError):
        score_matrix(small_model, X, QUICK)
    with pytest.raises(SchemaError):
        score_matrix(small_model, X, QUICK, np.array([0, 1, 2]))
    with pytest.raises(SchemaError):
        score_matrix(small_model, rng.random((3, 4)), QUICK, np.zeros(3, dtype=int))
    fixed = score_matrix(small_model, X, ScoreConfig(latent_restarts=2, latent_steps=40, condition=1))
    np.testing.assert_array_equal(fixed, score_matrix(small_model, X, QUICK, np.ones(3, dtype=int)))


# -- percentile ---------------------------------------------------------------

def test_nearest_rank_examples():
    assert nearest_rank_percentile(np.arange(1, 101), 95) == 95
    assert nearest_rank_percentile([3.0] * 10, 95) == 3.0
    assert nearest_rank_percentile([5.0], 50) == 5.0
    assert nearest_rank_percentile([1, 2, 3, 4], 50) == 2
    with pytest.raises(ValidationError):
        nearest_rank_percentile([], 95)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50),
       st.floats(0.5, 99.5), st.floats(0.5, 99.5))
def test_threshold_monotone_in_percentile(values, p, q):
    lo, hi = sorted((p, q))
    assert nearest_rank_percentile(values, lo) <= nearest_rank_percentile(values, hi)
    t = nearest_rank_percentile(values, hi)
    assert np.mean(np.array(values) <= t) >= hi / 100 - 1e-12


# -- calibrate / classify on the toy model --------------------------------------------

def test_calibration_set_flags_about_five_percent(toy):
    model, benign, _, _ = toy
    cal = calibrate(model, benign.take(np.arange(600)), ScoreConfig())
    assert cal.threshold == nearest_rank_percentile(cal.scores, 95)
    report = classify(model, benign.take(np.arange(600)), cal.threshold, ScoreConfig())
    np.testing.assert_array_equal(report.scores, cal.scores)
    assert 0.03 <= report.predicted.mean() <= 0.07


def test_attacks_and_outliers_exceed_threshold(toy):
    model, benign, attacks, _ = toy
    cal = calibrate(model, benign.take(np.arange(600)), ScoreConfig())
    report = classify(model, attacks.take(np.arange(200)), cal.threshold)
    assert report.predicted.mean() >= 0.9
    far = benign.take([0])
    cols = far.columns_of("continuous")
    far = far.replace_frame(far.frame.assign(**{c: 10.0 for c in cols}))
    assert score_table(model, far, ScoreConfig())[0] > cal.threshold


def test_calibration_subsample(toy):
    model, benign, _, _ = toy
    cfg = ScoreConfig(latent_restarts=1, latent_steps=10, calibration_rows=500, seed=3)
    cal = calibrate(model, benign, cfg)
    assert len(cal.rows) == 500 and len(set(cal.rows)) == 500
    again = calibrate(model, benign, cfg)
    np.testing.assert_array_equal(cal.rows, again.rows)
    with pytest.raises(ValidationError):
        calibrate(model, benign.take(np.zeros(len(benign), dtype=bool)))


def test_empty_table_gives_empty_report(toy):
    model, benign, _, _ = toy
    report = classify(model, benign.take(np.zeros(len(benign), dtype=bool)), 1.0)
    assert report.scores.size == 0 and report.predicted.size == 0


def test_equal_scores_are_benign_under_strict_rule():
    report = DetectionReport(np.full(5, 0.3), 0.3, np.full(5, 0.3) > 0.3)
    assert report.labels == [BENIGN] * 5


# -- report serialization ---------------------------------------------------------------

def test_report_json_and_csv():
    report = DetectionReport(np.array([0.1, 2.5, 1 / 3]), 1.0, np.array([False, True, False]),
                             {"source": "override"}, timing=4.2)
    d = json.loads(report.to_json())
    assert "timing" not in d
    assert d["labels"] == [BENIGN, ANOMALY, BENIGN]
    back = DetectionReport.from_dict(d)
    np.testing.assert_array_equal(back.scores, report.scores)
    assert back.threshold == 1.0 and back.calibration_provenance == {"source": "override"}
    lines = report.to_csv().splitlines()
    assert lines[0] == "row_id,score,predicted"
    assert lines[3] == f"2,{1 / 3!r},benign"
    assert float(lines[3].split(",")[1]) == 1 / 3
