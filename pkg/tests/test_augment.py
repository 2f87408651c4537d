import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sinkflow.augment import (
    SD_FLOOR,
    AugmentConfig,
    ColumnModes,
    EncodedRows,
    ModeModel,
    TableEncoder,
    _em,
    augment,
    balance_targets,
    bic,
    decode,
    encode,
    fidelity,
    fit_column,
    fit_modes,
    sample_conditions,
)
from sinkflow.errors import SchemaError, ValidationError
from sinkflow.netgen import TrainConfig, log_frequency_probabilities
from sinkflow.ot import SinkhornConfig
from sinkflow.tabprep import CONTINUOUS, PreprocessOptions, fit_transform, synth_flows

from test_tabprep import make_table

FAST = TrainConfig(latent_dim=8, hidden_dims=(32, 32), batch_size=16, learning_rate=1e-3, epochs=2,
                   sinkhorn=SinkhornConfig(max_iterations=50), condition_sampling="log_frequency")


@pytest.fixture(scope="module")
def prepared():
    out, _ = fit_transform(synth_flows(300, 120, seed=4), PreprocessOptions(rank=False, prune=False))
    return out


# -- mixtures ---------------------------------------------------------------

def test_single_gaussian_prefers_one_mode():
    x = np.random.default_rng(0).normal(3.0, 2.0, 1000)
    modes = fit_column(x, k_max=5, seed=0)
    assert modes.k == 1
    one, ll1 = _em(x, 1, np.random.default_rng(1))
    two, ll2 = _em(x, 2, np.random.default_rng(1))
    assert bic(ll1, 1, 1000) < bic(ll2, 2, 1000)


def test_bimodal_column_recovers_centers():
    rng = np.random.default_rng(1)
    x = np.r_[rng.normal(-4.0, 1.0, 600), rng.normal(5.0, 1.0, 400)]
    modes = fit_column(x, k_max=5, seed=2)
    assert modes.k == 2
    assert abs(modes.means[0] + 4.0) <= 0.1 and abs(modes.means[1] - 5.0) <= 0.1
    np.testing.assert_allclose(modes.weights, [0.6, 0.4], atol=0.03)
    assert modes.weights.sum() == pytest.approx(1.0)


def test_constant_column_has_floored_mode():
    modes = fit_column(np.full(50, 7.0))
    assert modes.k == 1 and modes.sds[0] == SD_FLOOR and modes.means[0] == 7.0


def test_few_distinct_values_limit_components():
    modes = fit_column(np.array([0.0, 0.0, 1.0, 1.0, 1.0]), k_max=5)
    assert 1 <= modes.k <= 2
    assert np.all(modes.sds > 0)


def test_fit_is_seeded():
    x = np.random.default_rng(3).normal(size=300) ** 3
    a, b = fit_column(x, seed=5), fit_column(x, seed=5)
    np.testing.assert_array_equal(a.means, b.means)
    with pytest.raises(ValidationError):
        fit_column(np.array([np.nan]))


# -- encoding ---------------------------------------------------------------

TWO = ModeModel({"a": ColumnModes(np.array([0.0, 10.0]), np.array([1.0, 2.0]), np.array([0.5, 0.5]))})


def test_mode_mean_encodes_to_zero_alpha():
    enc = encode(np.array([[10.0]]), TWO)
    assert enc.alpha[0, 0] == 0.0 and enc.mode[0, 0] == 1


def test_four_sigma_encodes_to_alpha_one():
    enc = encode(np.array([[0.0 + 4 * 1.0]]), ModeModel({"a": ColumnModes(
        np.array([0.0]), np.array([1.0]), np.array([1.0]))}))
    assert enc.alpha[0, 0] == 1.0 and enc.clipped == 0


def test_clipping_is_counted():
    single = ModeModel({"a": ColumnModes(np.array([0.0]), np.array([1.0]), np.array([1.0]))})
    enc = encode(np.array([[9.0], [-9.0], [1.0]]), single)
    assert enc.clipped == 2
    assert enc.alpha[:, 0].tolist() == [1.0, -1.0, 0.25]


@given(st.lists(st.floats(-3, 14, allow_nan=False), min_size=1, max_size=30))
def test_round_trip_on_unclipped_values(values):
    x = np.array(values)[:, None]
    enc = encode(x, TWO)
    ok = np.abs((x[:, 0] - TWO.columns["a"].means[enc.mode[:, 0]]) / (4 * TWO.columns["a"].sds[enc.mode[:, 0]])) <= 1
    np.testing.assert_allclose(decode(enc, TWO)[ok], x[ok], atol=1e-9)


def test_encode_schema_mismatch():
    with pytest.raises(SchemaError):
        encode(np.zeros((2, 3)), TWO)
    with pytest.raises(SchemaError):
        decode(EncodedRows(np.zeros((2, 3)), np.zeros((2, 3), dtype=int)), TWO)


def test_table_encoder_round_trip(prepared):
    modes = fit_modes(prepared, seed=0)
    enc = TableEncoder(prepared, modes)
    M, clipped = enc.encode_table(prepared)
    assert M.shape == (len(prepared), modes.width() + sum(len(c) for c in prepared.groups.values()))
    back = enc.decode_matrix(M)
    for c in prepared.columns_of(CONTINUOUS):
        col = prepared.frame[c].to_numpy()
        if clipped == 0:
            np.testing.assert_allclose(back[c], col, atol=1e-9)
    for cols in prepared.groups.values():
        for c in cols:
            np.testing.assert_array_equal(back[c], prepared.frame[c].to_numpy())


# -- conditional sampling ---------------------------------------------------------------

def test_sample_conditions_log_frequency():
    t = make_table({"a": np.zeros(108), "label": ["A"] * 9 + ["B"] * 99})
    draws = sample_conditions(t, 30000, seed=0)
    ratio = np.mean(draws == "A") / np.mean(draws == "B")
    assert ratio == pytest.approx(0.5, rel=0.05)
    assert (sample_conditions(t, 50, seed=3) == sample_conditions(t, 50, seed=3)).all()


def test_sample_conditions_edge_cases():
    e = np.e - 1
    np.testing.assert_allclose(log_frequency_probabilities([e, e]), [0.5, 0.5])
    one = make_table({"a": np.zeros(4), "label": ["Z"] * 4})
    assert set(sample_conditions(one, 20)) == {"Z"}
    with pytest.raises(ValidationError):
        sample_conditions(one.take(np.zeros(4, dtype=bool)), 5)


def test_log_frequency_boosts_minorities():
    p = log_frequency_probabilities([10, 1000])
    assert p[0] > 10 / 1010


# -- augmentation ---------------------------------------------------------------

def test_zero_targets_return_input(prepared):
    out = augment(prepared, AugmentConfig(target_counts={"SYN-Flood": 0}, train=FAST))
    assert out.frame.equals(prepared.frame)
    assert not out.provenance["synthetic"].any()


def test_augment_counts_schema_and_support(prepared, caplog):
    targets = {"SYN-Flood": 80, "UDP-Flood": 40}
    with caplog.at_level(logging.WARNING):
        out = augment(prepared, AugmentConfig(target_counts=targets, seed=1, train=FAST, min_updates=30))
    assert len(out) == len(prepared) + 120
    assert out.columns == prepared.columns and out.kinds == prepared.kinds
    syn = out.take(out.provenance["synthetic"])
    assert (syn.labels == "SYN-Flood").sum() == 80 and (syn.labels == "UDP-Flood").sum() == 40
    # one-hot blocks stay one-hot
    for cols in out.groups.values():
        assert np.all(syn.frame[cols].sum(axis=1) == 1)
    outside = total = 0
    for label in targets:
        real = prepared.frame[prepared.labels == label]
        fake = syn.frame[syn.labels == label]
        for c in prepared.columns_of(CONTINUOUS):
            lo, hi = real[c].min(), real[c].max()
            margin = 0.1 * (hi - lo)
            outside += int(((fake[c] < lo - margin) | (fake[c] > hi + margin)).sum())
            total += len(fake)
    assert outside / total <= 0.05
    info = {s.label: s for s in out.provenance["synthesis"]}
    assert info["SYN-Flood"].rows == 80 and info["SYN-Flood"].epochs >= FAST.epochs


def test_small_class_reduces_batch_with_warning(caplog):
    t, _ = fit_transform(synth_flows(100, 20, seed=2), PreprocessOptions(rank=False, prune=False))
    cfg = AugmentConfig(target_counts={"UDP-Flood": 10},
                        train=TrainConfig(**{**FAST.__dict__, "batch_size": 64}), min_updates=5)
    with caplog.at_level(logging.WARNING):
        out = augment(t, cfg)
    assert "batch size reduced" in caplog.text
    assert out.provenance["synthesis"][0].batch_size < 64


def test_augment_is_seeded(prepared):
    cfg = AugmentConfig(target_counts={"UDP-Flood": 20}, seed=7, train=FAST, min_updates=10)
    a, b = augment(prepared, cfg), augment(prepared, cfg)
    assert a.frame.equals(b.frame)


def test_augment_errors(prepared):
    with pytest.raises(ValidationError):
        AugmentConfig(target_counts={"x": -1})
    with pytest.raises(ValidationError):
        augment(prepared, AugmentConfig(target_counts={"nope": 5}, train=FAST))
    raw = synth_flows(20, 5)
    with pytest.raises(SchemaError):
        augment(raw, AugmentConfig(target_counts={"UDP-Flood": 5}, train=FAST))


def test_balance_targets(prepared):
    targets = balance_targets(prepared)
    counts = {c: int((prepared.labels == c).sum()) for c in set(prepared.labels)}
    top = max(counts.values())
    assert all(counts[c] + n == top for c, n in targets.items())
    assert max(counts, key=counts.get) not in targets


def test_fidelity_identical_tables_is_zero(prepared):
    res = fidelity(prepared, prepared, "UDP-Flood")
    assert res and all(r.statistic == 0.0 for r in res.values())
