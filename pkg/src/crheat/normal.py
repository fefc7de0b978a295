"""Folland-Stein normal-coordinate expansion of a horizontal frame.

From the structure jet C the engine forms the grades Xi^(b) of
``Xi^j_k(s, u) = sum_l C^j_{lk}(su) u^l``, solves the recursion for F^(a),
inverts grade by grade to G^(a) and reads off the frame
``X_k = sum_j G^j_k d/du^j``.  Grades are homogeneous degrees in u.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .models import ModelSpec, StructureJet, structure_functions
from .poly import Poly, PolyVectorField, _normalize, lie_bracket, mat_mul, mpq, truncate_field


@dataclass(frozen=True)
class JetMatrix:
    """Square matrix of polynomials, homogeneous of degree ``grade`` in u."""

    entries: tuple
    grade: int

    @classmethod
    def build(cls, rows, grade: int) -> "JetMatrix":
        return cls(tuple(tuple(r) for r in rows), grade)

    @classmethod
    def identity(cls, dim: int) -> "JetMatrix":
        return cls.build([[Poly.const(dim, int(i == j)) for j in range(dim)] for i in range(dim)], 0)

    @property
    def size(self) -> int:
        return len(self.entries)

    def __getitem__(self, jk) -> Poly:
        j, k = jk
        return self.entries[j][k]

    def is_zero(self) -> bool:
        return not any(p for row in self.entries for p in row)

    def scale(self, c) -> "JetMatrix":
        return JetMatrix.build([[p.scale(c) for p in row] for row in self.entries], self.grade)


def _zero_rows(d: int, nv: int):
    return [[Poly(nv) for _ in range(d)] for _ in range(d)]


def _add_into(acc, M):
    for i, row in enumerate(M):
        for j, p in enumerate(row):
            if p:
                acc[i][j] = acc[i][j] + p


def xi_grades(C: StructureJet, order: int) -> list[JetMatrix]:
    """Xi^(b)(u)^j_k = sum_l [C^j_{lk}]_{deg b}(u) u^l for b = 0..order."""
    d = C.dim
    u = [Poly.var(d, i) for i in range(d)]
    out = []
    for b in range(order + 1):
        rows = _zero_rows(d, d)
        for j in range(d):
            for k in range(d):
                acc = Poly(d)
                for l in range(d):
                    h = C[j, l, k].homogeneous(b)
                    if h:
                        acc = acc + h.mul(u[l])
                rows[j][k] = acc
        out.append(JetMatrix.build(rows, b + 1))
    return out


def f_recursion(xi: list[JetMatrix], order: int, max_weight: int | None = None) -> list[JetMatrix]:
    """F^(0) = I and (a+1) F^(a) = -sum_{b<a} Xi^(b) F^(a-b-1), for a = 0..order."""
    d = xi[0].size if xi else 1
    F = [JetMatrix.identity(d)]
    for a in range(1, order + 1):
        acc = _zero_rows(d, d)
        for b in range(a):
            if b < len(xi):
                _add_into(acc, mat_mul(xi[b].entries, F[a - b - 1].entries, max_weight=max_weight))
        F.append(JetMatrix.build(acc, a).scale(mpq(-1, a + 1)))
    return F


def g_from_f(F: list[JetMatrix], max_weight: int | None = None) -> list[JetMatrix]:
    """G^(0) = I and G^(a) = -sum_{b=1..a} G^(a-b) F^(b), so that G F = I grade by grade."""
    d = F[0].size
    G = [JetMatrix.identity(d)]
    for a in range(1, len(F)):
        acc = _zero_rows(d, d)
        for b in range(1, a + 1):
            _add_into(acc, mat_mul(G[a - b].entries, F[b].entries, max_weight=max_weight))
        G.append(JetMatrix.build(acc, a).scale(-1))
    return G


def g_grades(C: StructureJet, order: int) -> list[JetMatrix]:
    """G^(0..order+1), enough for the frame truncated at weight ``order``."""
    xi = xi_grades(C, order)
    F = f_recursion(xi, order + 1, max_weight=order + 1)
    return g_from_f(F, max_weight=order + 1)


def g_series(C: StructureJet, order: int) -> list[JetMatrix]:
    """G^(0..order) with no weight truncation: each grade is exact in degree."""
    return g_from_f(f_recursion(xi_grades(C, order), order))


def frame_from_structure(C: StructureJet, order: int) -> list[PolyVectorField]:
    """Truncated horizontal frame from a structure jet; checks the normal form of G^(1)."""
    if order < 1:
        raise ValueError("frame order must be >= 1")
    n, d = C.n, C.dim
    G = g_grades(C, order)
    u = [Poly.var(d, i) for i in range(d)]
    for a in range(n):
        if G[1][2 * n, a] != -u[n + a] or G[1][2 * n, n + a] != u[a]:
            raise ValueError("structure jet is not in Folland-Stein normal form at the base point")
    total = _zero_rows(d, d)
    for g in G:
        _add_into(total, g.entries)
    return [truncate_field(PolyVectorField([total[j][k] for j in range(d)]), order)
            for k in range(2 * n)]


@lru_cache(maxsize=None)
def _frame_cached(model: ModelSpec, order: int) -> tuple:
    return tuple(frame_from_structure(structure_functions(model, order), order))


def frame_expansion(model: ModelSpec, order: int) -> list[PolyVectorField]:
    """The 2n horizontal fields in Folland-Stein coordinates, truncated at weight ``order``."""
    return list(_frame_cached(model, order))


def exact_rank(vectors) -> int:
    """Rank over Q (or Q[sqrt 2]) of a list of exact vectors."""
    rows = [list(v) for v in vectors]
    rank, ncols = 0, len(rows[0]) if rows else 0
    for c in range(ncols):
        piv = next((r for r in range(rank, len(rows)) if rows[r][c]), None)
        if piv is None:
            continue
        rows[rank], rows[piv] = rows[piv], rows[rank]
        p = rows[rank][c]
        for r in range(len(rows)):
            if r != rank and rows[r][c]:
                f = rows[r][c] / p
                rows[r] = [_normalize(x - f * y) for x, y in zip(rows[r], rows[rank])]
        rank += 1
    return rank


def hormander_span_rank(model: ModelSpec) -> int:
    """Rank of {X_j(0)} together with {[X_a, X_{n+a}](0)}; full rank is 2n+1."""
    n = model.n
    X = frame_expansion(model, 2)
    vecs = [f.at_zero() for f in X]
    vecs += [lie_bracket(X[a], X[n + a]).at_zero() for a in range(n)]
    return exact_rank(vecs)
