import random

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from crheat.models import ModelSpec, StructureJet, sphere_frame_numeric
from crheat.normal import frame_expansion, frame_from_structure, g_series, hormander_span_rank, xi_grades
from crheat.poly import Poly, lie_bracket, mat_mul, mpq


def random_linear_jet(n, seed):
    rnd = random.Random(seed)
    D = 2 * n + 1

    def r():
        return mpq(rnd.randint(-5, 5), rnd.randint(1, 4))

    C = [[[Poly(D) for _ in range(D)] for _ in range(D)] for _ in range(D)]
    for i in range(D):
        for j in range(D):
            for k in range(j + 1, D):
                terms = {tuple(int(a == m) for a in range(D)): r() for m in range(D)}
                terms[(0,) * D] = r()
                C[i][j][k] = Poly(D, terms)
                C[i][k][j] = -C[i][j][k]
    return StructureJet(n, 1, C)


def test_g2_matches_closed_form():
    jet = random_linear_jet(1, 3)
    G = g_series(jet, 2)
    xi = xi_grades(jet, 2)
    X0, X1 = xi[0].entries, xi[1].entries
    sq = mat_mul(X0, X0)
    for j in range(3):
        for k in range(3):
            assert G[1][j, k] == X0[j][k].scale(mpq(1, 2))
            assert G[2][j, k] == sq[j][k].scale(mpq(1, 12)) + X1[j][k].scale(mpq(1, 3))


def test_g3_recursion_value():
    # the recursion gives (1/12) Xi0 Xi1 + (1/24) Xi1 Xi0 + (1/4) Xi2
    jet = random_linear_jet(1, 5)
    G = g_series(jet, 3)
    xi = xi_grades(jet, 3)
    a, b = mat_mul(xi[0].entries, xi[1].entries), mat_mul(xi[1].entries, xi[0].entries)
    for j in range(3):
        for k in range(3):
            want = a[j][k].scale(mpq(1, 12)) + b[j][k].scale(mpq(1, 24)) + xi[2].entries[j][k].scale(mpq(1, 4))
            assert G[3][j, k] == want


def test_heisenberg_frame_is_flat():
    X = frame_expansion(ModelSpec.heisenberg(2), 5)
    u = [Poly.var(5, i) for i in range(5)]
    for a in range(2):
        assert X[a].coeffs[4] == -u[2 + a]
        assert X[2 + a].coeffs[4] == u[a]
        assert X[a].coeffs[a] == Poly.const(5, 1)


def test_non_normal_jet_rejected():
    jet = random_linear_jet(1, 9)
    with pytest.raises(ValueError):
        frame_from_structure(jet, 2)


def test_sphere_frame_pushforward_numeric():
    """Frame in normal coordinates equals dE^{-1} applied to the ambient frame."""
    n = 1
    X = frame_expansion(ModelSpec.sphere(n), 5)

    def E(u):
        f = lambda t, w: sphere_frame_numeric(n, w) @ u
        return solve_ivp(f, (0, 1), np.zeros(3), rtol=1e-13, atol=1e-16, method="DOP853").y[:, -1]

    u = np.array([0.03, -0.02, 0.01])
    h = 1e-5
    J = np.column_stack([(E(u + h * e) - E(u - h * e)) / (2 * h) for e in np.eye(3)])
    G = np.linalg.solve(J, sphere_frame_numeric(n, E(u)))
    for k in range(2):
        assert np.allclose(X[k].evalf(u), G[:, k], atol=2e-8)


def test_hormander_span():
    assert hormander_span_rank(ModelSpec.sphere(1)) == 3
    assert hormander_span_rank(ModelSpec.heisenberg(2)) == 5


def test_sphere_brackets_at_origin():
    X = frame_expansion(ModelSpec.sphere(2), 2)
    for a in range(2):
        assert lie_bracket(X[a], X[2 + a]).at_zero() == [0, 0, 0, 0, 2]
