import math

import numpy as np
import pytest

from helpers import small_config, small_model, toy_series
from vsdn.config import TrainConfig
from vsdn.errors import ContractViolation
from vsdn.verification import (bound_ordering_sweep, chain_rule_gradients, closed_form_case_a, closed_form_case_b,
                               euler_ou_check, k_sweep_training, kl_mc_oracle, kl_oracle_grid,
                               logw_identity_check, noise_injection_experiment)


def test_kl_oracle_small():
    analytic, mc, se = kl_mc_oracle(2.0, 0.0, 1.0, dt=1e-2, n_paths=4000, seed=1)
    assert analytic == pytest.approx(2.0)
    assert abs(mc - analytic) < 4 * se


def test_kl_oracle_multidimensional_and_identical_drifts():
    analytic, mc, se = kl_mc_oracle([1.0, -1.0], [0.0, 0.0], [1.0, 2.0], dt=1e-2, n_paths=2000, seed=2)
    assert analytic == pytest.approx(0.5 + 0.125)
    assert abs(mc - analytic) < 4 * se
    zero = kl_mc_oracle(0.3, 0.3, 1.0, dt=0.1, n_paths=100)
    assert zero[0] == 0.0 and abs(zero[1]) < 1e-12


def test_kl_oracle_contracts():
    with pytest.raises(ContractViolation):
        kl_mc_oracle(1.0, 0.0, 0.0)
    with pytest.raises(ContractViolation):
        kl_mc_oracle(1.0, 0.0, 1.0, horizon=1.0, dt=0.3)


def test_kl_grid_shape():
    res = kl_oracle_grid(gaps=(1.0,), diffusions=(0.5, 1.0), dt=0.05, n_paths=200)
    assert [(r.gap, r.r_g) for r in res] == [(1.0, 0.5), (1.0, 1.0)]
    assert res[0].analytic == pytest.approx(2.0)


def test_logw_identity_small():
    assert logw_identity_check(500, seed=3) <= 1e-12


def test_euler_ou_small():
    res = euler_ou_check(n_paths=20_000, seed=4)
    assert res.mean_exact == pytest.approx(math.exp(-1))
    assert res.var_exact == pytest.approx((1 - math.exp(-2)) / 2)
    assert res.passed


def test_closed_forms_by_hand():
    eps = np.array([0.5, -1.0, 2.0])
    assert closed_form_case_a(0.04, eps) == pytest.approx((0.12, 0.2 * 1.5))
    xs = [1.0, 1.2, 0.9, 1.1]
    j3, j2 = 1 + 0.5 * 0.2 * 2.0, 1 + 0.5 * 0.2 * -1.0
    phi, theta = closed_form_case_b(0.04, eps, 0.5, xs)
    assert phi == pytest.approx(0.04 * (1 + j3 + j3 * j2))
    assert theta == pytest.approx(0.2 * (2.0 * 0.9 + j3 * -1.0 * 1.2 + j3 * j2 * 0.5 * 1.0))
    general = chain_rule_gradients(xs, eps, 0.04, lambda x: 0.0, lambda x: 0.5, lambda x: 1.0, lambda x: x)
    assert general == pytest.approx((phi, theta))


def test_noise_injection_small():
    rep = noise_injection_experiment(seed=5, n_draws=20, n_redraws=300)
    assert max(rep.max_err.values()) <= 1e-10
    assert rep.var_phi_a == 0.0 and rep.var_phi_b > 0 and rep.var_theta_a > 0
    assert rep.passed and len(rep.rows) == 20


def test_bound_sweep_small():
    m = small_model(seed=6, inference_mode="smoothing")
    data = toy_series(2, horizon=0.5, seed=7)
    sweep = bound_ordering_sweep(m, data, K_list=(1, 4), n_mc=100, seed=1)
    assert [(r.K, r.bound) for r in sweep.rows] == [(1, "vae"), (1, "iwae"), (4, "vae"), (4, "iwae")]
    assert sweep.monotone_within(3) and sweep.k1_matches_vae(4)
    # vae does not depend on K in expectation
    v1, v4 = sweep.rows[0], sweep.rows[2]
    assert abs(v1.mean - v4.mean) < 4 * math.hypot(v1.std_err, v4.std_err)
    again = bound_ordering_sweep(m, data, K_list=(1, 4), n_mc=100, seed=1)
    assert again.table() == sweep.table()


def test_bound_sweep_contracts():
    m = small_model()
    data = toy_series(1)
    for kw in (dict(K_list=(5, 1)), dict(K_list=(0, 1)), dict(n_mc=50)):
        with pytest.raises(ContractViolation):
            bound_ordering_sweep(m, data, **kw)
    with pytest.raises(ContractViolation):
        bound_ordering_sweep(m, [])


def test_k_sweep_small():
    data = toy_series(6, seed=8)
    cfg = TrainConfig(epochs=2, batch_size=3, learning_rate=1e-2, model=small_config())
    curves, history = k_sweep_training(cfg, data[:4], data[4:], K_list=(1, 2), epochs=2)
    groups = sorted({c[3] for c in curves})
    assert groups == ["iwae_K1", "iwae_K2", "vae_K1", "vae_K2"]
    assert len(curves) == 8 and len(history) == 16
    assert all(np.isfinite(c[2]) for c in curves)
