import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vsdn import autodiff as ad
from vsdn.errors import ContractViolation, OracleFailure, TrainingFault, ConfigError


def grad_of(fn, *values):
    with ad.Tape():
        leaves = [ad.param(v, f"p{i}") for i, v in enumerate(values)]
        out = fn(*leaves)
        g = ad.backward(out, leaves)
    return float(out.value), [g[f"p{i}"] for i in range(len(values))]


def fd_of(fn, values, i):
    def f(x):
        vals = list(values)
        vals[i] = x.reshape(values[i].shape)
        return float(fn(*[ad.const(v) for v in vals]).value)
    return ad.finite_diff_oracle(f, values[i].reshape(-1).copy()).reshape(values[i].shape)


def rel_err(a, b):
    # floor: saturated units have true gradients far below finite-difference noise
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-4)


def test_product_rule():
    _, (gx, gy) = grad_of(lambda x, y: x * y, np.array(3.0), np.array(4.0))
    assert gx == 4.0 and gy == 3.0


def test_logsumexp_equal_inputs_gives_half():
    _, (g,) = grad_of(lambda v: ad.logsumexp(v), np.array([0.7, 0.7]))
    np.testing.assert_allclose(g, [0.5, 0.5])


def test_logsumexp_values():
    assert ad.logsumexp(np.array([0.0, 0.0])).value == pytest.approx(np.log(2))
    assert ad.logsumexp(np.array([1000.0, 1000.0])).value == pytest.approx(1000 + np.log(2))
    assert ad.logsumexp(np.array([-3.25])).value == -3.25
    with pytest.raises(ContractViolation):
        ad.logsumexp(np.array([]))


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_logsumexp_shift_invariance(v, c):
    a = ad.logsumexp(v + c).value
    b = ad.logsumexp(v).value + c
    assert abs(a - b) <= 1e-12 * max(1.0, abs(b))


UNARY = {
    "tanh": ad.tanh, "relu": ad.relu, "sigmoid": ad.sigmoid, "exp": ad.exp, "softplus": ad.softplus,
    "square": ad.square, "log": lambda a: ad.log(ad.exp(a) + 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=arrays(np.float64, (3, 2), elements=st.floats(-2, 2)))
def test_unary_ops_match_finite_differences(name, x):
    op = UNARY[name]
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # kink
    fn = lambda a: ad.sum(op(a) * np.arange(1.0, 7.0).reshape(3, 2))
    _, (g,) = grad_of(fn, x)
    assert rel_err(g, fd_of(fn, [x], 0)) < 1e-4


@given(a=arrays(np.float64, (4, 3), elements=st.floats(-2, 2)),
       w=arrays(np.float64, (3, 2), elements=st.floats(-2, 2)),
       b=arrays(np.float64, (2,), elements=st.floats(-2, 2)))
def test_composite_graph_matches_finite_differences(a, w, b):
    def fn(a, w, b):
        h = ad.tanh(ad.matmul(a, w) + b)
        z = ad.sigmoid(h) * ad.softplus(h) - ad.exp(-ad.square(h)) / (2.0 + h * h)
        return ad.mean(z) + ad.logsumexp(ad.sum(ad.relu(h + 1.5) * h, axis=0)) + ad.sum(ad.log(1.5 + ad.tanh(a)))
    vals = [a, w, b]
    _, grads = grad_of(fn, *vals)
    for i, g in enumerate(grads):
        assert rel_err(g, fd_of(fn, vals, i)) < 1e-4


def test_broadcast_gradients_are_summed_back():
    x = np.array([1.0, 2.0, 3.0])
    _, (g,) = grad_of(lambda v: ad.sum(ad.broadcast_to(v, (4, 3)) * 2.0), x)
    np.testing.assert_array_equal(g, [8.0, 8.0, 8.0])
    _, (gb,) = grad_of(lambda v: ad.sum(np.ones((5, 3)) + v), x)
    np.testing.assert_array_equal(gb, [5.0, 5.0, 5.0])


def test_overlapping_slices_accumulate():
    x = np.array([1.0, 2.0, 3.0])
    _, (g,) = grad_of(lambda v: ad.sum(ad.square(v[1:])) + ad.sum(v[0] * v), x)
    # d/dx0: x0*2 + x1 + x2 = 2 + 2 + 3 = 7 ; d/dx1: 2*x1 + x0 = 5 ; d/dx2: 2*x2 + x0 = 7
    np.testing.assert_allclose(g, [7.0, 5.0, 7.0])


def test_advanced_index_with_repeats():
    x = np.array([1.0, 2.0, 3.0])
    _, (g,) = grad_of(lambda v: ad.sum(v[np.array([0, 0, 2])]), x)
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


def test_structural_ops():
    a, b = np.arange(6.0).reshape(2, 3), np.ones((2, 3))
    fn = lambda a, b: ad.sum(ad.concat([a, b], axis=-1) * np.arange(12.0).reshape(2, 6)) + \
        ad.sum(ad.stack([a, b], axis=1)[:, 0] * 3.0) + ad.sum(ad.reshape(a, (3, 2))[0]) + \
        ad.sum(ad.where(a.value > 2, a, b * 5.0)) + ad.sum(ad.clip(a, 1.0, 4.0))
    a = a + 0.01  # keep away from the clip and where kinks
    _, grads = grad_of(fn, a, b)
    for i, g in enumerate(grads):
        assert rel_err(g, fd_of(fn, [a, b], i)) < 1e-4


def test_unused_parameter_gets_zero_and_nonscalar_root_rejected():
    with ad.Tape():
        x, y = ad.param(np.ones(2), "x"), ad.param(np.ones(3), "y")
        g = ad.backward(ad.sum(x * 2.0), [x, y])
        np.testing.assert_array_equal(g["y"], np.zeros(3))
        with pytest.raises(ContractViolation):
            ad.backward(x * 2.0)


def test_no_tape_means_no_graph():
    x = ad.param(np.ones(2), "x")
    y = ad.sum(x * 3.0)
    assert y.tape is None and not y.requires_grad


def test_deterministic_gradients(rng):
    a = rng.normal(size=(5, 4))
    fn = lambda v: ad.logsumexp(ad.sum(ad.tanh(v), axis=1))
    v1, g1 = grad_of(fn, a)
    v2, g2 = grad_of(fn, a)
    assert v1 == v2 and np.array_equal(g1[0], g2[0])


# --- optimiser --------------------------------------------------------------


def _store(**arrays):
    s = ad.ParamStore()
    for k, v in arrays.items():
        s.add(k, np.asarray(v, dtype=float))
    return s


def test_adam_first_step_closed_form():
    s = _store(w=[0.0])
    ad.adam_step(s, {"w": np.array([0.5])}, ad.AdamHyper(learning_rate=1e-4, weight_decay=0.0))
    assert s.params["w"][0] == pytest.approx(-1e-4, rel=1e-6)
    assert s.step_count == 1


def test_adam_zero_grad_no_decay_is_identity():
    s = _store(w=[1.0, -2.0])
    ad.adam_step(s, {"w": np.zeros(2)}, ad.AdamHyper(weight_decay=0.0))
    np.testing.assert_array_equal(s.params["w"], [1.0, -2.0])


def test_adam_matches_reference_over_several_steps(rng):
    hyper = ad.AdamHyper(learning_rate=1e-2, weight_decay=1e-3)
    p = rng.normal(size=3)
    s = _store(w=p.copy())
    m = v = np.zeros(3)
    for t in range(1, 6):
        g = rng.normal(size=3)
        ad.adam_step(s, {"w": g}, hyper)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
        p = p - 1e-2 * mh / (np.sqrt(vh) + 1e-8) - 1e-2 * 1e-3 * p
    np.testing.assert_allclose(s.params["w"], p, rtol=1e-12)
    assert s.step_count == 5


def test_adam_errors():
    s = _store(w=[0.0, 0.0])
    with pytest.raises(ContractViolation):
        ad.adam_step(s, {"w": np.zeros(3)}, ad.AdamHyper())
    with pytest.raises(ContractViolation):
        ad.adam_step(s, {"other": np.zeros(2)}, ad.AdamHyper())
    with pytest.raises(TrainingFault, match="w"):
        ad.adam_step(s, {"w": np.array([np.nan, 0.0])}, ad.AdamHyper())
    with pytest.raises(ConfigError):
        ad.AdamHyper(beta1=1.0)
    with pytest.raises(ConfigError):
        ad.AdamHyper(learning_rate=float("inf"))


def test_adam_determinism(rng):
    g = {"w": rng.normal(size=4)}
    a, b = _store(w=np.ones(4)), _store(w=np.ones(4))
    for s in (a, b):
        ad.adam_step(s, g, ad.AdamHyper())
        ad.adam_step(s, g, ad.AdamHyper())
    assert np.array_equal(a.params["w"], b.params["w"])


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out, norm = ad.clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert ad.global_norm(out) == pytest.approx(1.0)
    same, _ = ad.clip_by_global_norm(g, 10.0)
    np.testing.assert_array_equal(same["a"], [3.0])


def test_param_store_flat_roundtrip(rng):
    s = _store(a=rng.normal(size=(2, 3)), b=rng.normal(size=4))
    back = s.unflatten(s.flat())
    for k in s.names():
        np.testing.assert_array_equal(back[k], s.params[k])
    c = s.copy()
    c.params["a"][0, 0] += 1
    assert c.params["a"][0, 0] != s.params["a"][0, 0]


# --- finite differences --------------------------------------------------------


def test_finite_diff_examples():
    g = ad.finite_diff_oracle(lambda x: float(x[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-6
    np.testing.assert_array_equal(ad.finite_diff_oracle(lambda x: 2.5, np.zeros(3)), np.zeros(3))


def test_finite_diff_reports_coordinate():
    def f(x):
        with np.errstate(invalid="ignore"):
            return float(np.log(x[1]))
    with pytest.raises(OracleFailure) as info:
        ad.finite_diff_oracle(f, np.array([1.0, 1e-6]), h=1e-5)
    assert info.value.coordinate == 1
