import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vsdn.datasets import (DEFAULT_OU, OUParams, TimeSeries, denormalize, fit_norm_stats, holdout_frames,
                           load_sporadic_csv, normalize, save_sporadic_csv, segment_by_length,
                           simulate_double_ou, split_dataset, sporadify)
from vsdn.errors import ConfigError, IngestionError


def dense(n=20, d=2, uid=0, seed=0):
    r = np.random.default_rng(seed)
    return TimeSeries(np.arange(n) * 0.1, r.normal(size=(n, d)), np.ones((n, d), bool), uid)


def test_timeseries_invariants():
    s = TimeSeries([0.0, 1.0], [[np.nan, 2.0], [1.0, 7.0]], [[0, 1], [1, 0]])
    np.testing.assert_array_equal(s.values, [[0.0, 2.0], [1.0, 0.0]])
    with pytest.raises(IngestionError):
        TimeSeries([0.0, 0.0], np.zeros((2, 1)), np.ones((2, 1)))
    with pytest.raises(IngestionError):
        TimeSeries([0.0, 1.0], np.zeros((2, 2)), [[1, 0], [0, 0]])


def test_ou_deterministic_limit():
    p = OUParams([1.0, 0.5], [1.0, -1.0], [1e-12, 1e-12])
    s = simulate_double_ou(p, 1, horizon=2.0, sim_dt=0.001, x0=[3.0, 0.0], lattice=0.5)[0]
    exact = p.mu + (np.array([3.0, 0.0]) - p.mu) * np.exp(-np.outer(s.times, p.theta))
    np.testing.assert_allclose(s.values, exact, atol=5e-3)


def test_ou_stationary_moments():
    n = 100_000
    p = OUParams([1.0, 0.5], [1.0, -1.0], [0.4, 0.3])
    series = simulate_double_ou(p, n, horizon=0.5, sim_dt=0.01, seed=3, lattice=0.5)
    x = np.array([s.values[-1] for s in series])
    se = np.sqrt(p.stationary_var / n)
    assert np.all(np.abs(x.mean(axis=0) - p.mu) < 4 * se)
    assert np.all(np.abs(x.var(axis=0) / p.stationary_var - 1) < 0.05)


def test_ou_bit_reproducible_and_errors():
    a = simulate_double_ou(DEFAULT_OU, 3, horizon=1.0, seed=5)
    b = simulate_double_ou(DEFAULT_OU, 3, horizon=1.0, seed=5)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    with pytest.raises(ConfigError):
        simulate_double_ou(OUParams([200.0], [0.0], [1.0]), 1, sim_dt=0.01)
    with pytest.raises(ConfigError):
        OUParams([-1.0], [0.0], [1.0])


def test_sporadify_examples():
    s = dense(1000, 3)
    same = sporadify(s, 0.0, 0.0, seed=1)
    assert np.array_equal(same.values, s.values) and np.array_equal(same.times, s.times)
    half = sporadify(s, 0.5, 0.0, seed=1)
    assert abs(half.n - 500) <= 4 * math.sqrt(250)
    again = sporadify(s, 0.5, 0.3, seed=1)
    assert np.array_equal(again.mask, sporadify(s, 0.5, 0.3, seed=1).mask)
    with pytest.raises(ConfigError):
        sporadify(s, 1.0, 0.0)


@given(st.floats(0.0, 0.9), st.floats(0.0, 0.95), st.integers(0, 10_000), st.integers(2, 30))
def test_sporadify_never_empties(p_time, p_dim, seed, n):
    out = sporadify(dense(n, 2, uid=seed % 7), p_time, p_dim, seed=seed)
    assert out.n >= 2
    assert out.mask.any(axis=1).all()
    assert np.all(out.values[~out.mask] == 0)


def test_csv_roundtrip_and_sorting(tmp_path):
    series = [sporadify(s, 0.3, 0.3, seed=2) for s in simulate_double_ou(DEFAULT_OU, 3, horizon=2.0, seed=1)]
    path = tmp_path / "d.csv"
    save_sporadic_csv(series, path)
    back = load_sporadic_csv(path)
    for a, b in zip(series, back):
        assert a.uid == b.uid
        assert np.array_equal(a.times, b.times) and np.array_equal(a.values, b.values)
        assert np.array_equal(a.mask, b.mask)
    unsorted = tmp_path / "u.csv"
    unsorted.write_text("series_id,time,value_1,mask_1\n4,0.5,2.0,1\n4,0.1,1.0,1\n")
    one = load_sporadic_csv(unsorted)[0]
    assert one.n == 2 and list(one.times) == [0.1, 0.5] and list(one.values[:, 0]) == [1.0, 2.0]


@pytest.mark.parametrize("body, match", [
    ("1,0.0,1.0,,1,1\n", "empty value"),
    ("1,0.0,1.0,2.0,0,0\n", "no observed"),
    ("1,0.0,1.0,2.0,1,1\n1,0.0,1.5,2.5,1,1\n", "duplicate time"),
    ("1,0.0,1.0,2.0,1\n", "columns"),
])
def test_csv_errors(tmp_path, body, match):
    p = tmp_path / "bad.csv"
    p.write_text("series_id,time,value_1,value_2,mask_1,mask_2\n" + body)
    with pytest.raises(IngestionError, match=match):
        load_sporadic_csv(p)


def test_csv_error_carries_line_number(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("series_id,time,value_1,mask_1\n1,0.0,1.0,1\n1,0.0,1.5,1\n")
    with pytest.raises(IngestionError, match=":3:"):
        load_sporadic_csv(p)
    with pytest.raises(IngestionError):
        load_sporadic_csv(tmp_path / "missing.csv")
    (tmp_path / "h.csv").write_text("id,t,x\n")
    with pytest.raises(IngestionError, match="header"):
        load_sporadic_csv(tmp_path / "h.csv")


def test_normalize_contract():
    train = [sporadify(dense(50, 2, uid=i, seed=i), 0.2, 0.3, seed=i) for i in range(5)]
    shifted = [TimeSeries(s.times, s.values + [5.0, -3.0], s.mask, s.uid) for s in train]
    normed, stats = normalize(shifted)
    vals = np.concatenate([s.values for s in normed])
    mask = np.concatenate([s.mask for s in normed])
    np.testing.assert_allclose((vals * mask).sum(0) / mask.sum(0), 0.0, atol=1e-12)
    for a, b in zip(shifted, normed):
        np.testing.assert_allclose(denormalize(b).values, a.values, atol=1e-12)
    test = [dense(10, 2, uid=99, seed=9)]
    normed_test, same = normalize(test, stats_from=shifted)
    np.testing.assert_array_equal(same.mean, stats.mean)
    np.testing.assert_allclose(normed_test[0].values, (test[0].values - stats.mean) / stats.std)


def test_masked_stats_ignore_hidden_cells():
    s = TimeSeries([0.0, 1.0, 2.0], [[1.0, 5.0], [3.0, 0.0], [2.0, 1.0]], [[1, 1], [1, 0], [1, 1]])
    st1 = fit_norm_stats([s])
    s2 = TimeSeries(s.times, [[1.0, 5.0], [3.0, 1e6], [2.0, 1.0]], s.mask)
    st2 = fit_norm_stats([s2])
    np.testing.assert_array_equal(st1.mean, st2.mean)
    assert st1.mean[1] == 3.0


def test_normalize_errors():
    const = TimeSeries([0.0, 1.0], [[1.0, 1.0], [1.0, 2.0]], np.ones((2, 2)))
    with pytest.raises(ConfigError, match="dimension 1"):
        normalize([const])
    missing = TimeSeries([0.0, 1.0], [[1.0, 0.0], [2.0, 0.0]], [[1, 0], [1, 0]])
    with pytest.raises(ConfigError, match="dimension 2"):
        normalize([missing])


def test_split_holdout_segment():
    series = [dense(5, uid=i) for i in range(100)]
    tr, va, te = split_dataset(series, seed=4)
    assert (len(tr), len(va), len(te)) == (70, 15, 15)
    ids = {s.uid for s in tr} | {s.uid for s in va} | {s.uid for s in te}
    assert len(ids) == 100
    obs, held = holdout_frames(dense(20), 0.5, seed=1)
    assert obs.n == 10 and held.n == 10
    assert not set(obs.times) & set(held.times)
    pieces = segment_by_length(dense(25), 10)
    assert len(pieces) == 2 and pieces[1].times[0] == 0.0
