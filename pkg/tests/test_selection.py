import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedbss import nn
from fedbss.data import Dataset
from fedbss.errors import ConfigError, ScheduleError
from fedbss.selection import (SampleScoreTable, epoch_training_set, schedule_alpha, score_records, score_samples,
                              split_point, strategy_variant, uncertainty)
from oracles import py_softmax


def table(n_unbiased, n_biased):
    n = n_unbiased + n_biased
    return SampleScoreTable(np.arange(n), np.linspace(0.1, 2.0, n), np.full(n, 0.5), n_unbiased - 1)


# -- uncertainty / split ------------------------------------------------------------

def test_uncertainty_examples():
    assert uncertainty(np.full(4, 0.25)) == pytest.approx(1.0)
    assert uncertainty(np.array([0.7, 0.2, 0.1])) == pytest.approx(0.4, abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(0, 1)).filter(lambda a: a.sum() > 1e-6))
def test_uncertainty_bounds(raw):
    p = raw / raw.sum()
    u = float(uncertainty(p))
    assert 0.0 <= u <= 1.0
    if np.allclose(p, p[0]):
        assert u == pytest.approx(1.0)


def test_uncertainty_vanishes_towards_one_hot():
    vals = [float(uncertainty(np.array([1 - eps, eps / 2, eps / 2]))) for eps in (0.5, 0.1, 1e-3, 1e-6)]
    assert vals == sorted(vals, reverse=True) and vals[-1] < 1e-5


def test_split_point_examples():
    assert split_point(np.array([0.2, 0.9, 0.4])) == 1
    assert split_point(np.array([0.3])) == 0
    assert split_point(np.full(5, 0.7)) == 0
    t = SampleScoreTable(np.arange(3), np.array([0.1, 0.2, 0.3]), np.array([0.2, 0.9, 0.4]), 1)
    assert list(t.unbiased) == [0, 1] and list(t.biased) == [2]
    single = SampleScoreTable(np.arange(1), np.array([0.1]), np.array([0.3]), 0)
    assert single.biased.size == 0


# -- scoring --------------------------------------------------------------------------

def fixed_softmax_model():
    model = nn.softmax_regression((2,), 3)
    params = model.params.copy()
    params["0.W"][...] = [[1.0, -0.5, 0.2], [0.3, 0.8, -1.1]]
    params["0.b"][...] = [0.05, -0.1, 0.0]
    return model.with_params(params)


def test_score_zero_model_uniform():
    model = nn.softmax_regression((3,), 4)
    zero = model.with_params(model.params.zeros_like())
    ds = Dataset(np.random.default_rng(0).normal(size=(5, 3)), [0, 1, 2, 3, 0], 4)
    t = score_samples(zero, ds)
    np.testing.assert_allclose(t.losses, math.log(4), rtol=1e-7)
    np.testing.assert_allclose(t.uncertainties, 1.0)
    assert list(t.indices) == [0, 1, 2, 3, 4] and t.split_pos == 0


def test_score_table_matches_independent_script():
    model = fixed_softmax_model()
    x = [[0.5, 1.0], [-1.0, 0.2], [2.0, -0.3], [0.0, 0.0], [1.2, 1.7]]
    y = [1, 2, 0, 1, 2]
    w = model.params["0.W"].astype(float).tolist()
    b = model.params["0.b"].astype(float).tolist()
    rows = []
    for i, (xi, yi) in enumerate(zip(x, y)):
        z = [sum(xi[k] * w[k][j] for k in range(2)) + b[j] for j in range(3)]
        p = py_softmax(z)
        rows.append((i, -math.log(p[yi]), 1 - (max(p) - min(p))))
    rows.sort(key=lambda r: r[1])
    split = max(range(5), key=lambda k: (rows[k][2], -k))

    t = score_samples(model, Dataset(x, y, 3))
    assert list(t.indices) == [r[0] for r in rows]
    np.testing.assert_allclose(t.losses, [r[1] for r in rows], rtol=1e-6)
    np.testing.assert_allclose(t.uncertainties, [r[2] for r in rows], rtol=1e-6)
    assert t.split_pos == split


def test_scoring_is_read_only_and_stable_on_ties(blobs):
    model = nn.mlp((4,), 3, hidden=8, seed=1)
    before = model.params.flat.tobytes()
    score_samples(model, blobs)
    assert model.params.flat.tobytes() == before
    dup = Dataset(np.zeros((6, 4)), [0, 1, 0, 1, 0, 1], 3)
    t = score_samples(model, dup)
    # zero inputs and zero biases: every loss is ln 3, so input order must survive
    np.testing.assert_allclose(t.losses, math.log(3), rtol=1e-6)
    assert list(t.indices) == [0, 1, 2, 3, 4, 5]
    t = score_samples(model, blobs)
    assert np.all(np.diff(t.losses) >= 0)


def test_score_samples_custom_indices_and_records():
    model = fixed_softmax_model()
    ds = Dataset([[0.5, 1.0], [-1.0, 0.2], [2.0, -0.3]], [1, 2, 0], 3)
    t = score_samples(model, ds)
    recs = list(score_records(t, 7, 3, np.array([100, 200, 300])))
    assert [r["index"] for r in recs] == [100 * (i + 1) for i in t.indices]
    assert all(r["round"] == 7 and r["client"] == 3 for r in recs)
    assert [r["biased"] for r in recs] == [p > t.split_pos for p in range(3)]
    assert set(recs[0]) == {"round", "client", "index", "loss", "uncertainty", "biased"}


# -- schedule ---------------------------------------------------------------------------

def test_schedule_endpoints_and_midpoint():
    assert abs(schedule_alpha(0, 10) - 0.0) <= 1e-9
    assert abs(schedule_alpha(10, 10) - 1.0) <= 1e-9
    assert abs(schedule_alpha(5, 10) - 0.5) <= 1e-9


def test_schedule_monotone():
    vals = [schedule_alpha(e, 17) for e in range(18)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("e,total", [(-1, 5), (6, 5), (0, 0)])
def test_schedule_out_of_range(e, total):
    with pytest.raises(ScheduleError):
        schedule_alpha(e, total)


def test_epoch_set_midpoint_example():
    s = epoch_training_set(table(4, 4), 6, 11)
    assert s.alpha == pytest.approx(0.5) and list(s.indices) == [0, 1, 2, 3, 4, 5]


def test_epoch_set_first_and_last():
    t = table(3, 5)
    assert list(epoch_training_set(t, 1, 7).indices) == [0, 1, 2]
    assert sorted(epoch_training_set(t, 7, 7).indices) == list(range(8))
    assert sorted(epoch_training_set(t, 1, 1).indices) == list(range(8))


def test_epoch_set_stores_schedule_alpha():
    s = epoch_training_set(table(2, 9), 3, 5)
    assert s.alpha == pytest.approx((1 - math.cos(math.pi * 2 / 4)) / 2, abs=1e-12)
    assert s.epoch == 3 and s.epoch_total == 5


def test_epoch_set_out_of_range():
    with pytest.raises(ScheduleError):
        epoch_training_set(table(2, 2), 0, 3)
    with pytest.raises(ScheduleError):
        epoch_training_set(table(2, 2), 4, 3)


@st.composite
def score_tables(draw):
    n = draw(st.integers(1, 60))
    losses = np.sort(np.array(draw(st.lists(st.floats(0, 10), min_size=n, max_size=n))))
    unc = np.array(draw(st.lists(st.floats(0, 1), min_size=n, max_size=n)))
    ids = np.array(draw(st.permutations(list(range(n)))))
    return SampleScoreTable(ids, losses, unc, split_point(unc))


@settings(max_examples=50, deadline=None)
@given(score_tables(), st.integers(1, 15), st.sampled_from(["linear", "cosine"]))
def test_epoch_sets_nested_and_covering(t, e_total, variant):
    sets = [set(strategy_variant(t, e, e_total, variant).indices.tolist()) for e in range(1, e_total + 1)]
    for a, b in zip(sets, sets[1:]):
        assert a <= b
    assert sets[-1] == set(t.indices.tolist())
    assert all(set(t.unbiased.tolist()) <= s for s in sets)


# -- variants ---------------------------------------------------------------------------

def test_filter_variant():
    t = table(3, 6)
    for e in range(1, 6):
        assert list(strategy_variant(t, e, 5, "filter").indices) == [0, 1, 2]


def test_linear_matches_cosine_at_midpoint():
    t = table(4, 10)
    assert len(strategy_variant(t, 6, 11, "linear").indices) == len(strategy_variant(t, 6, 11, "cosine").indices)


def test_linear_vs_cosine_early_epoch():
    t = table(1, 100)
    lin = len(strategy_variant(t, 2, 11, "linear").indices) - 1
    cos = len(strategy_variant(t, 2, 11, "cosine").indices) - 1
    assert lin == math.floor(0.1 * 100) == 10
    assert cos == math.floor((1 - math.cos(math.pi / 10)) / 2 * 100) == 2
    for e in range(1, 7):
        assert len(strategy_variant(t, e, 11, "cosine").indices) <= len(strategy_variant(t, e, 11, "linear").indices)


def test_unknown_variant():
    with pytest.raises(ConfigError):
        strategy_variant(table(1, 1), 1, 2, "quadratic")
