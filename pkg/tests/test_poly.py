import itertools

import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from crheat.poly import (
    Poly,
    PolyVectorField,
    QSqrt2,
    apply_sequence,
    count_multi_indices,
    index_norm,
    inverse_series,
    lie_bracket,
    mat_inverse_series,
    mat_mul,
    mpq,
    multi_indices,
    multi_indices_upto,
    parse_poly_text,
    sqrt1p_coeffs,
    truncate_field,
    weight,
)

NV = 3
small = st.fractions(min_value=-4, max_value=4, max_denominator=6).map(lambda f: mpq(f.numerator, f.denominator))
exponents = st.tuples(*[st.integers(0, 2)] * NV)
polys = st.dictionaries(exponents, small, max_size=5).map(lambda d: Poly(NV, d))


def var(i):
    return Poly.var(NV, i)


def test_qsqrt2_field_ops():
    r = QSqrt2(1, 1)
    assert r * r == QSqrt2(3, 2)
    assert r * r.inverse() == QSqrt2(1, 0)
    assert float(QSqrt2(0, 1)) == pytest.approx(2 ** 0.5)
    assert QSqrt2(0, 1) * QSqrt2(0, 1) == 2


def test_weight_counts_last_variable_twice():
    assert weight((1, 0, 0)) == 1
    assert weight((0, 0, 1)) == 2
    assert weight((2, 1, 3)) == 9


@given(polys, polys, polys)
@settings(max_examples=40, deadline=None)
def test_ring_axioms(p, q, r):
    assert p * q == q * p
    assert (p * q) * r == p * (q * r)
    assert p * (q + r) == p * q + p * r


@given(polys, polys)
@settings(max_examples=40, deadline=None)
def test_leibniz_rule(p, q):
    for i in range(NV):
        assert (p * q).diff(i) == p.diff(i) * q + p * q.diff(i)


@given(polys)
@settings(max_examples=30, deadline=None)
def test_compose_with_identity(p):
    assert p.compose([var(i) for i in range(NV)]) == p


def test_truncation_by_weight_and_degree():
    p = var(0) * var(2) + var(0) ** 3 + var(1)
    assert p.truncate_weight(2) == var(1)
    assert p.truncate_weight(3) == p
    assert p.truncate_degree(2) == var(0) * var(2) + var(1)


def test_mul_truncation_matches_truncated_product():
    p = var(0) + var(2) + var(1) ** 2
    assert p.mul(p, max_weight=3) == (p * p).truncate_weight(3)


def test_text_roundtrip():
    p = Poly(NV, {(1, 0, 2): mpq(-3, 7), (0, 0, 0): mpq(5), (0, 2, 0): mpq(1)})
    assert parse_poly_text(p.to_text(), NV) == p


def test_sqrt_series_matches_sympy():
    s = sp.symbols("s")
    ref = sp.series(sp.sqrt(1 + s), s, 0, 7).removeO()
    for k, c in enumerate(sqrt1p_coeffs(6)):
        assert sp.Rational(int(c.numerator), int(c.denominator)) == ref.coeff(s, k)


def test_inverse_series():
    p = Poly.const(NV, 2) + var(0) - var(1) * var(2)
    inv = inverse_series(p, max_degree=5)
    assert (p * inv).truncate_degree(5) == Poly.const(NV, 1)


def test_matrix_inverse_series():
    one, x, z = Poly.const(NV, 1), var(0), var(2)
    M = [[one + x, z], [x * z, Poly.const(NV, 3) - x]]
    Minv = mat_inverse_series(M, max_weight=4)
    prod = mat_mul(M, Minv, max_weight=4)
    for i, j in itertools.product(range(2), repeat=2):
        assert prod[i][j] == Poly.const(NV, int(i == j))


def heis_fields():
    X = PolyVectorField([Poly.const(NV, 1), Poly(NV), -var(1)])
    Y = PolyVectorField([Poly(NV), Poly.const(NV, 1), var(0)])
    return X, Y


def test_bracket_antisymmetry_and_jacobi():
    X, Y = heis_fields()
    Z = PolyVectorField([var(2), var(0) * var(1), Poly.const(NV, 1)])
    assert lie_bracket(X, Y) == -lie_bracket(Y, X)
    jac = (lie_bracket(X, lie_bracket(Y, Z)) + lie_bracket(Y, lie_bracket(Z, X))
           + lie_bracket(Z, lie_bracket(X, Y)))
    assert jac.is_zero()


def test_heisenberg_bracket_is_twice_T():
    X, Y = heis_fields()
    assert lie_bracket(X, Y).at_zero() == [0, 0, 2]


def test_apply_sequence_order():
    X, Y = heis_fields()
    # X Y u3 = X(u1) = 1 while Y X u3 = Y(-u2) = -1
    assert apply_sequence([X, Y], 2) == 1
    assert apply_sequence([Y, X], 2) == -1
    with pytest.raises(ValueError):
        apply_sequence([], 0)


def test_truncate_field_keeps_extra_vertical_weight():
    f = PolyVectorField([var(0) ** 2, var(1) ** 3, var(0) ** 3])
    t = truncate_field(f, 2)
    assert t.coeffs[0] == var(0) ** 2 and not t.coeffs[1] and t.coeffs[2] == var(0) ** 3


def test_multi_index_count_matches_formula():
    for drivers, norm in [(2, 4), (2, 6), (4, 4), (1, 5)]:
        idx = multi_indices_upto(drivers, norm)
        assert len(idx) == count_multi_indices(drivers, norm)
        assert len(set(idx)) == len(idx)
    assert count_multi_indices(2, 4) == 48
    assert all(index_norm(J) == 3 for J in multi_indices(2, 3))
    assert index_norm((0, 1, 0)) == 5
