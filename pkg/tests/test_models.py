import numpy as np
import pytest
from scipy.integrate import solve_ivp

from crheat.models import (
    ModelSpec,
    ambient_structure_by_brackets,
    chart_jet,
    christoffel,
    drift_field,
    sphere_frame_numeric,
    structure_functions,
)
from crheat.poly import Poly, mpq


def test_model_validation():
    with pytest.raises(ValueError):
        ModelSpec("torus", 1)
    with pytest.raises(ValueError):
        ModelSpec.sphere(0)
    assert ModelSpec.sphere(2).dim == 5
    assert ModelSpec.sphere(1).base_point == (0, 1)


def test_heisenberg_structure_constants():
    C = structure_functions(ModelSpec.heisenberg(2), 3)
    assert C.is_antisymmetric()
    T = 4
    for a in range(2):
        assert C[T, a, 2 + a] == Poly.const(5, 2)
    assert not C[0, 0, 2]


@pytest.mark.parametrize("n", [1, 2])
def test_sphere_closed_form_matches_brackets(n):
    from crheat.models import _sphere_ambient

    degree = 3 if n == 1 else 2
    closed = _sphere_ambient(n, degree).structure_functions()
    brk = ambient_structure_by_brackets(n, degree)
    D = 2 * n + 1
    for i in range(D):
        for j in range(D):
            for k in range(D):
                assert closed[i][j][k].truncate_degree(degree) == brk[i][j][k].truncate_degree(degree)


def _chart_rk(n, u):
    f = lambda t, w: sphere_frame_numeric(n, w) @ u
    return solve_ivp(f, (0, 1), np.zeros(2 * n + 1), rtol=1e-13, atol=1e-16, method="DOP853").y[:, -1]


def test_chart_jet_matches_ode_flow():
    jet = chart_jet(ModelSpec.sphere(1), 8)
    rng = np.random.default_rng(0)
    for _ in range(20):
        u = rng.normal(size=3) * 0.02
        ref = _chart_rk(1, u)
        assert np.abs(jet.evalf(u) - ref).max() <= 1e-8 * np.abs(ref).max()


def test_chart_jet_heisenberg_is_identity():
    jet = chart_jet(ModelSpec.heisenberg(1), 4)
    assert [p for p in jet.w] == [Poly.var(3, i) for i in range(3)]


def _christoffel_oracle(n, w, h=1e-6):
    """Gamma^g_{bar b a} from [Zbar_b, Z_a] projected onto Z, by finite differences."""
    D = 2 * n + 1

    def Z(w):
        M = sphere_frame_numeric(n, w)
        return np.array([(M[:, a] + 1j * M[:, n + a]) / np.sqrt(2) for a in range(n)]), M[:, 2 * n]

    Zs, T = Z(w)
    dZ = np.array([(Z(w + h * e)[0] - Z(w - h * e)[0]) / (2 * h) for e in np.eye(D)])  # [k, a, :]
    basis = np.column_stack(list(Zs) + list(np.conj(Zs)) + [T])
    out = np.zeros((n, n, n), dtype=complex)
    for b in range(n):
        for a in range(n):
            br = np.conj(Zs[b]) @ dZ[:, a, :] - Zs[a] @ np.conj(dZ[:, b, :])
            out[:, b, a] = np.linalg.solve(basis, br)[:n]
    return out


@pytest.mark.parametrize("n", [1, 2])
def test_christoffel_matches_bracket_oracle(n):
    rng = np.random.default_rng(n)
    w = rng.normal(size=2 * n + 1) * 0.2
    x, y, yn = w[:n], w[n:2 * n], w[2 * n]
    z = np.append(x + 1j * y, np.sqrt(1 - x @ x - y @ y - yn ** 2) + 1j * yn)
    got = christoffel(ModelSpec.sphere(n)).gamma(z)
    assert np.abs(got - _christoffel_oracle(n, w)).max() < 1e-8


def test_christoffel_heisenberg_vanishes():
    g = christoffel(ModelSpec.heisenberg(1))
    assert not np.any(g.gamma(np.zeros(2)))


def test_sphere_drift_low_order_terms():
    X0 = drift_field(ModelSpec.sphere(1), 3)
    assert X0.coeffs[0].coeff((1, 0, 0)) == mpq(-1, 2)
    assert X0.coeffs[1].coeff((0, 1, 0)) == mpq(-1, 2)
    assert X0.coeffs[2].coeff((2, 0, 1)) == mpq(1, 12)
    assert drift_field(ModelSpec.heisenberg(2), 3).is_zero()
