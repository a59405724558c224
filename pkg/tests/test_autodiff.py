import math

import numpy as np
import pytest
import scipy.special as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from everf import autodiff as ad
from everf.autodiff import AutodiffError, ParamStore, Tape, check_gradients

finite_floats = st.floats(min_value=-30, max_value=30, allow_nan=False)


def grad_of(build, **leaves):
    """Build a scalar from named leaf values and return its gradients."""
    tape = Tape()
    tensors = {k: tape.leaf(v, k) for k, v in leaves.items()}
    return tape.backward(build(**tensors))


def test_product_rule():
    g = grad_of(lambda x, y: x * y, x=2.0, y=3.0)
    assert g["x"] == 3.0 and g["y"] == 2.0


def test_sigmoid_grad_at_zero():
    g = grad_of(ad.sigmoid, x=0.0)
    assert g["x"] == pytest.approx(0.25, abs=1e-15)


def test_lgamma_grad_matches_finite_difference():
    # d lgamma/dx at 1 should equal the central difference of lgamma itself.
    h = 1e-5
    fd = (ad.lgamma_val(1 + h) - ad.lgamma_val(1 - h)) / (2 * h)
    g = grad_of(ad.lgamma, x=1.0)
    assert g["x"] == pytest.approx(fd, abs=1e-8)
    assert g["x"] == pytest.approx(-0.5772156649, abs=1e-9)


def test_lgamma_values():
    assert ad.lgamma_val(1.0) == pytest.approx(0.0, abs=1e-12)
    assert ad.lgamma_val(2.0) == pytest.approx(0.0, abs=1e-12)
    # 0.5 * ln(pi), reference value evaluated at high precision
    assert ad.lgamma_val(0.5) == pytest.approx(0.5723649429247001, abs=1e-12)


def test_lgamma_accuracy_against_scipy():
    xs = np.linspace(0.1, 30.0, 4000)
    assert np.max(np.abs(ad.lgamma_val(xs) - sp.gammaln(xs))) < 1e-10
    # Large arguments: float64 ulp of lgamma(1e6) is ~2e-9, so the absolute
    # bound switches to a relative one out here.
    xs = np.logspace(0, 6, 500)
    rel = np.abs(ad.lgamma_val(xs) - sp.gammaln(xs)) / np.maximum(np.abs(sp.gammaln(xs)), 1.0)
    assert np.max(rel) < 1e-12


def test_lgamma_rejects_nonpositive():
    with pytest.raises(AutodiffError):
        ad.lgamma_val(0.0)
    with pytest.raises(AutodiffError):
        ad.lgamma_val(-1.5)


def test_digamma_against_scipy():
    xs = np.concatenate([np.linspace(0.05, 10, 500), np.logspace(1, 5, 100)])
    assert np.max(np.abs(ad.digamma_val(xs) - sp.digamma(xs))) < 1e-11


def test_softplus_sigmoid_values():
    assert ad.softplus_val(0.0) == pytest.approx(math.log(2.0), abs=1e-15)
    assert ad.sigmoid_val(0.0) == 0.5
    # Extended-precision reference for softplus(100) via mpmath.
    import mpmath

    ref = float(mpmath.log(1 + mpmath.e ** 100))
    assert abs(ad.softplus_val(100.0) - ref) < 1e-12
    assert np.isfinite(ad.softplus_val(5000.0))
    assert ad.sigmoid_val(800.0) == 1.0
    assert ad.sigmoid_val(-800.0) == pytest.approx(0.0, abs=1e-300)


@given(finite_floats)
@settings(max_examples=100, deadline=None)
def test_softplus_bounds(x):
    y = ad.softplus_val(x)
    assert y >= max(x, 0.0)
    assert 0.0 < ad.sigmoid_val(x) < 1.0


def _central_diff(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


@pytest.mark.parametrize("op,val_fn,domain", [
    (ad.exp, np.exp, (-5, 5)),
    (ad.log, np.log, (0.05, 10)),
    (ad.sqrt, np.sqrt, (0.05, 10)),
    (ad.square, np.square, (-5, 5)),
    (ad.tanh, np.tanh, (-5, 5)),
    (ad.sigmoid, ad.sigmoid_val, (-10, 10)),
    (ad.softplus, ad.softplus_val, (-10, 10)),
    (ad.lgamma, ad.lgamma_val, (0.1, 20)),
])
def test_primitive_derivatives_match_finite_differences(op, val_fn, domain):
    rng = np.random.default_rng(0)
    xs = rng.uniform(*domain, size=100)
    for x in xs:
        g = grad_of(op, x=float(x))["x"]
        fd = _central_diff(val_fn, float(x))
        rel = abs(g - fd) / (abs(g) + abs(fd) + 1e-12)
        assert rel < 1e-6


def test_binary_op_partials():
    rng = np.random.default_rng(1)
    for _ in range(25):
        a, b = rng.uniform(0.5, 3.0, size=2)
        g = grad_of(lambda x, y: x / y, x=a, y=b)
        assert g["x"] == pytest.approx(1 / b, rel=1e-12)
        assert g["y"] == pytest.approx(-a / b ** 2, rel=1e-12)
        g = grad_of(lambda x, y: x - y, x=a, y=b)
        assert g["x"] == 1.0 and g["y"] == -1.0


def test_matmul_gradients():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    tape = Tape()
    ta, tb = tape.leaf(a, "a"), tape.leaf(b, "b")
    out = ad.asum(ta @ tb)
    g = tape.backward(out)
    assert np.allclose(g["a"], np.ones((3, 2)) @ b.T)
    assert np.allclose(g["b"], a.T @ np.ones((3, 2)))


def test_broadcast_bias_gradient():
    tape = Tape()
    x = tape.leaf(np.ones((5, 3)), "x")
    b = tape.leaf(np.zeros(3), "b")
    g = tape.backward(ad.asum(x + b))
    assert np.array_equal(g["b"], np.full(3, 5.0))


def test_exclusive_cumsum_forward_and_grad():
    v = np.array([[1.0, 2.0, 3.0]])
    assert np.array_equal(ad.exclusive_cumsum(v, axis=1), [[0.0, 1.0, 3.0]])
    tape = Tape()
    x = tape.leaf(v, "x")
    weights = np.array([[1.0, 10.0, 100.0]])
    g = tape.backward(ad.asum(ad.exclusive_cumsum(x, axis=1) * weights))
    # d/dx_i sums the adjoints of all later positions
    assert np.array_equal(g["x"], [[110.0, 100.0, 0.0]])


def test_maximum_gradient_gates():
    tape = Tape()
    x = tape.leaf(np.array([0.5, 2.0]), "x")
    g = tape.backward(ad.asum(ad.maximum(x, 1.0)))
    assert np.array_equal(g["x"], [0.0, 1.0])


def test_backward_linearity():
    rng = np.random.default_rng(3)
    v = rng.normal(size=4)

    def gradients(fn):
        tape = Tape()
        x = tape.leaf(v, "x")
        return tape.backward(fn(x))["x"]

    f = lambda x: ad.asum(ad.exp(x))
    g = lambda x: ad.asum(ad.square(x))
    combined = gradients(lambda x: 2.5 * f(x) + 0.5 * g(x))
    assert np.allclose(combined, 2.5 * gradients(f) + 0.5 * gradients(g),
                       rtol=1e-13)


def test_backward_deterministic_and_reusable():
    store = ParamStore()
    store.add("p", np.array([1.0, 2.0]))

    def run():
        store.zero_grads()
        tape = Tape()
        p = tape.param(store, "p")
        tape.backward(ad.asum(ad.exp(p) * p), store)
        return store.grads["p"].copy()

    assert np.array_equal(run(), run())


def test_backward_rejects_nonscalar_root():
    tape = Tape()
    x = tape.leaf(np.ones(3), "x")
    with pytest.raises(AutodiffError):
        tape.backward(ad.exp(x))


def test_backward_reports_nonfinite_adjoint():
    tape = Tape()
    x = tape.leaf(0.0, "x")
    y = ad.sqrt(x)  # derivative is inf at zero
    with pytest.raises(AutodiffError, match="sqrt"):
        tape.backward(y)


def test_param_store_validation():
    store = ParamStore()
    store.add("w", np.ones(3))
    with pytest.raises(AutodiffError):
        store.add("w", np.ones(3))
    with pytest.raises(AutodiffError):
        store.add("bad", np.array([np.nan]))
    assert store.n_params() == 3


def test_check_gradients_quadratic():
    store = ParamStore()
    store.add("p", np.array([1.0, -2.0, 0.5]))

    def fn(s):
        tape = Tape()
        p = tape.param(s, "p")
        loss = ad.asum(ad.square(p))
        val = float(ad.value(loss))
        tape.backward(loss, s)
        return val

    assert check_gradients(fn, store, h=1e-4) < 1e-10


def test_check_gradients_constant_function():
    store = ParamStore()
    store.add("p", np.array([1.0, 2.0]))

    def fn(s):
        tape = Tape()
        p = tape.param(s, "p")
        loss = ad.asum(p * 0.0)
        val = float(ad.value(loss))
        tape.backward(loss, s)
        return val

    assert check_gradients(fn, store) == 0.0
    assert np.array_equal(store.grads["p"], np.zeros(2))


def test_check_gradients_step_validation():
    store = ParamStore()
    store.add("p", np.ones(1))
    with pytest.raises(AutodiffError):
        check_gradients(lambda s: 0.0, store, h=1e-2)
