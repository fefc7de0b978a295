import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from crheat.heat import (
    EscapeError,
    ScaledSystem,
    c1_conditional,
    contact_volume,
    fit_expansion,
    gaveau_c0,
    hormander_form,
    hormander_inf,
    kde_diag,
    kde_richardson,
    phi3_coefficients,
    phi_a,
    power_bookkeeping,
    scaling_identity_check,
    simulate_batch,
    simulate_endpoint,
    simulate_increments,
    taylor_coefficients,
    taylor_endpoint,
)
from crheat.models import ModelSpec
from crheat.poly import mpq
from crheat.wiener import IteratedTable, PathGrid, levy_area, sample_increments, sample_path

H1, S1 = ModelSpec.heisenberg(1), ModelSpec.sphere(1)


def test_gaveau_constant():
    assert gaveau_c0(1) == pytest.approx(1 / 16, abs=1e-10)
    val, err = gaveau_c0(2, return_error=True)
    # closed form for n = 2: int (x / sinh x)^2 dx over R is pi^2 / 3
    assert val == pytest.approx((math.pi ** 2 / 6) / (2 * math.pi) ** 3, abs=1e-12)
    assert err < 1e-10
    with pytest.raises(ValueError):
        gaveau_c0(0)


def test_scaled_system_invariants():
    for eps in (0.3, 0.7):
        s = ScaledSystem.build(S1, eps)
        V0 = s.evaluate(np.zeros(3))
        # horizontal coefficients are the identity at 0 and the vertical one vanishes
        assert np.allclose(V0[1:, :2], np.eye(2)) and np.allclose(V0[:, 2], 0)
        h = 1e-6
        for k in range(3):
            e = np.eye(3)[k] * h
            d = (s.evaluate(e)[1:, 2] - s.evaluate(-e)[1:, 2]) / (2 * h)
            expected = {0: [0, 1], 1: [-1, 0], 2: [0, 0]}[k]
            assert np.allclose(d, expected, atol=1e-8)
    a, b = ScaledSystem.build(S1, 1.0), ScaledSystem.unscaled(S1, 1.0)
    assert np.array_equal(a.values, b.values)


def test_zero_eps_gives_zero_endpoint():
    path = sample_path(0, 0, 64, 1)
    assert not np.any(simulate_endpoint(ScaledSystem.unscaled(S1, 0.0), path))


def test_heisenberg_endpoint_is_brownian_and_area():
    eps = 0.37
    path = sample_path(3, 2, 512, 1)
    U = simulate_endpoint(ScaledSystem.unscaled(H1, eps), path)
    tab = IteratedTable.from_path(path, 2)
    S = levy_area(tab, 1)[1]
    assert np.allclose(U, [eps * path.W[-1, 0], eps * path.W[-1, 1], eps ** 2 * S], atol=1e-12)


def test_stream_and_given_increments_agree():
    s = ScaledSystem.build(S1, 0.3)
    X, esc = simulate_batch(s, 9, 10, 4, 128)
    Y, _ = simulate_increments(s, sample_increments(9, 10, 4, 128, 1))
    assert esc == 0 and np.array_equal(X, Y)
    Xa, _ = simulate_batch(s, 9, 10, 4, 128, antithetic=True)
    Ya, _ = simulate_increments(s, -sample_increments(9, 10, 4, 128, 1))
    assert np.array_equal(Xa, Ya)


def test_escape_guard():
    inc = np.full((8, 2), 50.0)
    with pytest.raises(EscapeError):
        simulate_endpoint(ScaledSystem.build(S1, 1.0), PathGrid(inc), guard=10.0)
    X, esc = simulate_increments(ScaledSystem.build(S1, 1.0), inc[None])
    assert esc == 1 and np.all(np.isnan(X))


def test_taylor_low_orders():
    path = sample_path(1, 0, 256, 1)
    tab = IteratedTable.from_path(path, 4)
    eps = 0.2
    S = levy_area(tab, 1)[1]
    for model in (H1, S1):
        co = taylor_coefficients(model, 4)
        t1 = taylor_endpoint(tab, co, 1, eps)
        assert np.allclose(t1, [eps * path.W[-1, 0], eps * path.W[-1, 1], eps ** 2 * S], atol=1e-13)
        assert np.allclose(taylor_endpoint(tab, co, 2, eps), t1, atol=1e-13)
    assert np.allclose(taylor_endpoint(tab, taylor_coefficients(H1, 4), 3, eps), t1, atol=1e-13)
    assert not np.any(phi_a(tab, taylor_coefficients(S1, 4), 2))
    with pytest.raises(ValueError):
        taylor_endpoint(IteratedTable.from_path(path, 2), taylor_coefficients(S1, 4), 3, eps)


def test_phi3_coefficients():
    assert all(not row for row in phi3_coefficients(ModelSpec.heisenberg(2)).values())
    c = phi3_coefficients(S1)
    assert c[1] == {(1, 0): mpq(-1, 2), (1, 2, 2): mpq(-1, 3), (2, 1, 2): mpq(1, 6), (2, 2, 1): mpq(1, 6)}
    assert c[3][(1, 0, 2)] == mpq(-1, 2) and c[3][(2, 0, 1)] == mpq(1, 2)


def _expected_kde_gaussian(h):
    # E[K(X/s)/s] = int K(x) phi(s x) dx for a standard normal X
    f = lambda s: quad(lambda x: 0.75 * (1 - x * x) * norm.pdf(s * x), -1, 1)[0]
    return f(h) ** 2 * f(h * h)


def test_kde_gaussian_oracle():
    X = np.random.default_rng(0).standard_normal((1_000_000, 3))
    h = 0.3
    r = kde_diag(X, h)
    assert abs(r.estimate - _expected_kde_gaussian(h)) < 3 * r.stderr
    assert _expected_kde_gaussian(h) == pytest.approx((2 * np.pi) ** -1.5, rel=0.03)
    half = kde_diag(X[:500_000], 0.3)
    assert half.stderr / r.stderr == pytest.approx(math.sqrt(2), rel=0.1)


def test_kde_degenerate_and_errors():
    r = kde_diag(np.zeros((10_000, 3)), 0.5)
    assert r.degenerate and r.estimate == pytest.approx(0.75 ** 3 / 0.5 ** 4)
    with pytest.raises(ValueError):
        kde_diag(np.zeros((10_000, 3)), 0.0)
    with pytest.raises(ValueError):
        kde_diag(np.zeros((10, 3)), 0.5)


def test_kde_richardson_on_gaussian():
    X = np.random.default_rng(1).standard_normal((400_000, 3))
    r = kde_richardson(X, (0.4, 0.6))
    assert abs(r.estimate - (2 * np.pi) ** -1.5) < 3 * r.stderr + 0.01 * r.estimate


def test_fit_exact_synthetic():
    t = np.array([0.1, 0.05, 0.025, 0.0125])
    c0 = gaveau_c0(1)
    rep = fit_expansion(H1, t, c0 * t ** -2, stderr=np.full(4, 1e-3), order=2)
    assert rep.sqrt_coef[0] == pytest.approx(c0, abs=1e-12)
    assert np.all(np.abs(rep.sqrt_coef[1:]) < 1e-12)
    assert rep.t_coef[0] == pytest.approx(c0, abs=1e-12)


def test_fit_preconditions():
    with pytest.raises(ValueError):
        fit_expansion(H1, [0.1, 0.08, 0.05], [1, 1, 1])
    with pytest.raises(ValueError):
        fit_expansion(H1, [0.1, 0.05], [1, 1])
    with pytest.raises(ValueError):
        fit_expansion(H1, [0.1, 0.1, 0.025], [1, 1, 1], order=2)


def test_contact_volume():
    assert [contact_volume(n) for n in (1, 2, 3)] == [2, 8, 48]


def test_hormander():
    rep = hormander_inf(H1)
    assert 0.99 <= rep.minimum <= 1.01 and rep.points >= 10_000
    assert hormander_inf(S1).minimum > 0
    for eps in (0, 0.3, 1):
        assert hormander_form(S1, eps, np.array([1.0, 0, 0]))[0] == pytest.approx(1.0, abs=1e-15)
    assert hormander_form(H1, 1, np.array([0, 0, 1.0]))[0] == pytest.approx(4.0)


def test_scaling_identity():
    assert scaling_identity_check(H1, 0.5, 1).residual.max() <= 1e-10
    rep = scaling_identity_check(S1, 0.3, 2, steps=1024)
    assert rep.passed
    assert scaling_identity_check(S1, 1.0, 2, steps=256).bitwise


def test_power_bookkeeping_heisenberg():
    a, b = power_bookkeeping(H1, 0.3, 20_000)
    assert a == pytest.approx(b, rel=1e-9)


def test_c1_conditional_constant_and_odd():
    one = c1_conditional(S1, 20_000, functional="one", seed=1, steps=64)
    assert abs(one.value - gaveau_c0(1)) < 3 * one.stderr + 0.02 * gaveau_c0(1)
    odd = c1_conditional(S1, 20_000, functional="odd", seed=1, steps=64)
    assert abs(odd.value) < 3 * odd.stderr
    with pytest.raises(ValueError):
        c1_conditional(H1, 10)
