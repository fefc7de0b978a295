"""Exact multivariate polynomials and polynomial vector fields.

Polynomials live in ``nvars`` variables ``u1 .. u{nvars}``.  The last variable
carries parabolic weight 2, all others weight 1, so a monomial ``u^e`` has
weight ``sum(e[:-1]) + 2*e[-1]``.  Coefficients are exact: rationals
(``gmpy2.mpq``) or elements of Q[sqrt 2] (:class:`QSqrt2`).
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction
from typing import Iterable, Iterator, Mapping, Sequence

import gmpy2

mpq = gmpy2.mpq
_MPQ = type(mpq(0))

Exponent = tuple[int, ...]


def rational(x) -> "gmpy2.mpq":
    """Coerce ints, Fractions and mpq to mpq."""
    if isinstance(x, _MPQ):
        return x
    if isinstance(x, Fraction):
        return mpq(x.numerator, x.denominator)
    if isinstance(x, int):
        return mpq(x)
    raise TypeError(f"not an exact rational: {x!r}")


class QSqrt2:
    """Element ``a + b*sqrt(2)`` of Q[sqrt 2] with rational ``a``, ``b``."""

    __slots__ = ("a", "b")

    def __init__(self, a=0, b=0):
        self.a = rational(a)
        self.b = rational(b)

    @staticmethod
    def _lift(x):
        if isinstance(x, QSqrt2):
            return x
        try:
            return QSqrt2(x, 0)
        except TypeError:
            return None

    def __add__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        return QSqrt2(self.a + o.a, self.b + o.b)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        return QSqrt2(self.a - o.a, self.b - o.b)

    def __rsub__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        return o - self

    def __neg__(self):
        return QSqrt2(-self.a, -self.b)

    def __mul__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        return QSqrt2(self.a * o.a + 2 * self.b * o.b, self.a * o.b + self.b * o.a)

    __rmul__ = __mul__

    def inverse(self) -> "QSqrt2":
        norm = self.a * self.a - 2 * self.b * self.b
        if norm == 0:
            raise ZeroDivisionError("QSqrt2 division by zero")
        return QSqrt2(self.a / norm, -self.b / norm)

    def __truediv__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        return self * o.inverse()

    def __rtruediv__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        return o * self.inverse()

    def __eq__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        return self.a == o.a and self.b == o.b

    def __hash__(self):
        if self.b == 0:
            return hash(self.a)
        return hash((self.a, self.b))

    def __bool__(self):
        return bool(self.a) or bool(self.b)

    def __float__(self):
        return float(self.a) + float(self.b) * math.sqrt(2.0)

    def is_rational(self) -> bool:
        return self.b == 0

    def __repr__(self):
        return f"QSqrt2({self.a}, {self.b})"

    def __str__(self):
        if self.b == 0:
            return str(self.a)
        if self.a == 0:
            return f"{self.b}*sqrt2"
        return f"({self.a} + {self.b}*sqrt2)"


SQRT2 = QSqrt2(0, 1)


def _normalize(c):
    """Collapse a QSqrt2 with vanishing irrational part to a rational."""
    if isinstance(c, QSqrt2) and c.b == 0:
        return c.a
    if isinstance(c, (int, Fraction)):
        return rational(c)
    return c


def weight(e: Exponent) -> int:
    """Parabolic weight of a monomial exponent (last variable counts twice)."""
    return sum(e) + e[-1]


def _mono_key(e: Exponent):
    # graded by weight, then lexicographic (u1 before u2 ...)
    return (weight(e), tuple(-x for x in e))


class Poly:
    """Sparse exact polynomial; treat instances as immutable."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Mapping[Exponent, object] | None = None):
        self.nvars = nvars
        clean = {}
        if terms:
            for e, c in terms.items():
                if len(e) != nvars:
                    raise ValueError(f"exponent {e} has wrong length for {nvars} variables")
                if c:
                    clean[tuple(e)] = _normalize(c)
        self.terms = clean

    # construction -------------------------------------------------------
    @classmethod
    def zero(cls, nvars: int) -> "Poly":
        return cls(nvars)

    @classmethod
    def const(cls, nvars: int, c) -> "Poly":
        return cls(nvars, {(0,) * nvars: c})

    @classmethod
    def var(cls, nvars: int, i: int) -> "Poly":
        """The coordinate function u_{i+1} (``i`` is 0-based)."""
        e = [0] * nvars
        e[i] = 1
        return cls(nvars, {tuple(e): mpq(1)})

    @classmethod
    def monomial(cls, exponent: Sequence[int], c=1) -> "Poly":
        return cls(len(exponent), {tuple(exponent): c})

    # basic queries ------------------------------------------------------
    def is_zero(self) -> bool:
        return not self.terms

    def __bool__(self):
        return bool(self.terms)

    @property
    def constant(self):
        return self.terms.get((0,) * self.nvars, mpq(0))

    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=-1)

    def weighted_degree(self) -> int:
        return max((weight(e) for e in self.terms), default=-1)

    def min_weight(self) -> int:
        return min((weight(e) for e in self.terms), default=-1)

    def coeff(self, exponent: Sequence[int]):
        return self.terms.get(tuple(exponent), mpq(0))

    def sorted_terms(self) -> list[tuple[Exponent, object]]:
        return sorted(self.terms.items(), key=lambda kv: _mono_key(kv[0]))

    def __eq__(self, other):
        if isinstance(other, Poly):
            return self.nvars == other.nvars and self.terms == other.terms
        if other == 0:
            return not self.terms
        return NotImplemented

    def __hash__(self):
        return hash((self.nvars, frozenset(self.terms.items())))

    def __repr__(self):
        return f"Poly({self.nvars}, {self.to_text() or '0'})"

    # arithmetic ---------------------------------------------------------
    def _check(self, other: "Poly"):
        if other.nvars != self.nvars:
            raise ValueError(f"dimension mismatch: {self.nvars} vs {other.nvars}")

    def __add__(self, other):
        if not isinstance(other, Poly):
            other = Poly.const(self.nvars, other)
        self._check(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out[e] + c if e in out else c
        return Poly(self.nvars, out)

    __radd__ = __add__

    def __neg__(self):
        return Poly(self.nvars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        if not isinstance(other, Poly):
            other = Poly.const(self.nvars, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, c) -> "Poly":
        if not c:
            return Poly(self.nvars)
        return Poly(self.nvars, {e: c * v for e, v in self.terms.items()})

    def mul(self, other: "Poly", max_degree: int | None = None,
            max_weight: int | None = None) -> "Poly":
        """Product, optionally dropping monomials above a total degree or parabolic weight."""
        self._check(other)
        out: dict[Exponent, object] = {}
        b_items = [(eb, cb, sum(eb), sum(eb) + eb[-1]) for eb, cb in other.terms.items()]
        for ea, ca in self.terms.items():
            da = sum(ea)
            wa = da + ea[-1]
            for eb, cb, db, wb in b_items:
                if max_degree is not None and da + db > max_degree:
                    continue
                if max_weight is not None and wa + wb > max_weight:
                    continue
                e = tuple(x + y for x, y in zip(ea, eb))
                v = ca * cb
                out[e] = out[e] + v if e in out else v
        return Poly(self.nvars, out)

    def __mul__(self, other):
        if isinstance(other, Poly):
            return self.mul(other)
        return self.scale(other)

    def __rmul__(self, other):
        return self.scale(other)

    def __truediv__(self, c):
        if isinstance(c, Poly):
            raise TypeError("polynomial division is not supported")
        if isinstance(c, QSqrt2):
            return self.scale(c.inverse())
        return self.scale(1 / rational(c))

    def __pow__(self, k: int):
        if k < 0:
            raise ValueError("negative power")
        out = Poly.const(self.nvars, 1)
        for _ in range(k):
            out = out.mul(self)
        return out

    # calculus -----------------------------------------------------------
    def diff(self, i: int) -> "Poly":
        """Partial derivative with respect to variable ``i`` (0-based)."""
        out = {}
        for e, c in self.terms.items():
            k = e[i]
            if k:
                ne = list(e)
                ne[i] = k - 1
                out[tuple(ne)] = c * k
        return Poly(self.nvars, out)

    def __call__(self, point: Sequence):
        if len(point) != self.nvars:
            raise ValueError("point has wrong dimension")
        total = 0
        for e, c in self.terms.items():
            v = c
            for x, k in zip(point, e):
                if k:
                    v = v * x**k
            total = total + v
        return total

    def evalf(self, point: Sequence[float]) -> float:
        total = 0.0
        for e, c in self.terms.items():
            v = float(c)
            for x, k in zip(point, e):
                if k:
                    v *= x**k
            total += v
        return total

    # truncation ---------------------------------------------------------
    def truncate_weight(self, a: int) -> "Poly":
        """Keep exactly the terms of weight <= a."""
        return Poly(self.nvars, {e: c for e, c in self.terms.items() if weight(e) <= a})

    def truncate_degree(self, d: int) -> "Poly":
        return Poly(self.nvars, {e: c for e, c in self.terms.items() if sum(e) <= d})

    def homogeneous(self, d: int) -> "Poly":
        """Part of total (unweighted) degree exactly d."""
        return Poly(self.nvars, {e: c for e, c in self.terms.items() if sum(e) == d})

    def weighted_part(self, a: int) -> "Poly":
        return Poly(self.nvars, {e: c for e, c in self.terms.items() if weight(e) == a})

    def map_coeffs(self, f) -> "Poly":
        return Poly(self.nvars, {e: f(c) for e, c in self.terms.items()})

    def compose(self, subs: Sequence["Poly"], max_degree: int | None = None,
                max_weight: int | None = None) -> "Poly":
        """Substitute ``subs[i]`` for variable ``i``, truncating the result.

        The substituted polynomials may live in a different number of variables;
        all of them must share it. Truncation is exact when every substitution
        vanishes at the origin.
        """
        return compose_many([self], subs, max_degree, max_weight)[0]

    # text ---------------------------------------------------------------
    def to_text(self) -> str:
        """One ``coeff * u1^e1 ...`` line per term, graded-weight/lex order."""
        lines = []
        for e, c in self.sorted_terms():
            mono = " ".join(f"u{i + 1}^{k}" for i, k in enumerate(e) if k)
            lines.append(f"{c} * {mono}" if mono else f"{c}")
        return "\n".join(lines)


def _truncate(p: Poly, max_degree, max_weight) -> Poly:
    if max_degree is not None:
        p = p.truncate_degree(max_degree)
    if max_weight is not None:
        p = p.truncate_weight(max_weight)
    return p


def compose_many(polys: Sequence[Poly], subs: Sequence[Poly], max_degree: int | None = None,
                 max_weight: int | None = None) -> list[Poly]:
    """Compose several polynomials with one substitution, sharing the power tables."""
    if not polys:
        return []
    nv = polys[0].nvars
    if len(subs) != nv or any(p.nvars != nv for p in polys):
        raise ValueError("need one substitution per variable")
    m = subs[0].nvars
    one = Poly.const(m, 1)
    subs = [_truncate(q, max_degree, max_weight) for q in subs]
    powers: list[list[Poly]] = [[one] for _ in range(nv)]
    products: dict[Exponent, Poly] = {}

    def power(i, k):
        pw = powers[i]
        while len(pw) <= k:
            pw.append(pw[-1].mul(subs[i], max_degree, max_weight))
        return pw[k]

    def monomial(e):
        # memoised over prefixes, since many terms share leading factors
        if e in products:
            return products[e]
        last = max(i for i, k in enumerate(e) if k)
        head = e[:last] + (0,) * (nv - last)
        f = power(last, e[last])
        r = f if not any(head) else monomial(head).mul(f, max_degree, max_weight)
        products[e] = r
        return r

    out = []
    for p in polys:
        acc: dict[Exponent, object] = {}
        for e, c in p.terms.items():
            term = monomial(e) if any(e) else one
            for te, tc in term.terms.items():
                v = c * tc
                acc[te] = acc[te] + v if te in acc else v
        out.append(Poly(m, acc))
    return out


def series_compose(coeffs: Sequence, p: Poly, max_degree: int | None = None,
                   max_weight: int | None = None) -> Poly:
    """Evaluate ``sum coeffs[k] * p**k`` truncated by degree and/or weight.

    ``p`` must vanish at the origin so the truncation is exact.
    """
    if p.constant:
        raise ValueError("series argument must vanish at the origin")
    out = Poly(p.nvars)
    pk = Poly.const(p.nvars, 1)
    for c in coeffs:
        if not pk:
            break
        if c:
            out = out + pk.scale(c)
        pk = pk.mul(p, max_degree, max_weight)
    return out


def sqrt1p_coeffs(n: int) -> list:
    """Taylor coefficients of sqrt(1 + s) up to s**n."""
    out = []
    c = mpq(1)
    for k in range(n + 1):
        out.append(c)
        c = c * (mpq(1, 2) - k) / (k + 1)
    return out


def inverse_series(p: Poly, max_degree: int | None = None, max_weight: int | None = None) -> Poly:
    """1/p truncated by degree and/or weight; needs p(0) != 0."""
    c0 = p.constant
    if not c0:
        raise ZeroDivisionError("inverse of a polynomial vanishing at the origin")
    inv0 = c0.inverse() if isinstance(c0, QSqrt2) else 1 / rational(c0)
    q = (p - Poly.const(p.nvars, c0)).scale(inv0)
    top = max_degree if max_degree is not None else max_weight
    coeffs = [mpq((-1) ** k) for k in range(top + 1)]
    return series_compose(coeffs, q, max_degree, max_weight).scale(inv0)


class PolyVectorField:
    """First-order operator ``sum_i coeffs[i] * d/du_{i+1}`` with polynomial coefficients."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs: Sequence[Poly]):
        coeffs = tuple(coeffs)
        if not coeffs:
            raise ValueError("empty vector field")
        n = coeffs[0].nvars
        if any(c.nvars != n for c in coeffs) or len(coeffs) != n:
            raise ValueError("vector field needs one coefficient per variable, all of equal dimension")
        self.coeffs = coeffs

    @property
    def dim(self) -> int:
        return len(self.coeffs)

    @classmethod
    def zero(cls, dim: int) -> "PolyVectorField":
        return cls([Poly(dim) for _ in range(dim)])

    @classmethod
    def coordinate(cls, dim: int, i: int) -> "PolyVectorField":
        """The constant field d/du_{i+1}."""
        return cls([Poly.const(dim, 1) if k == i else Poly(dim) for k in range(dim)])

    def __call__(self, f: Poly) -> Poly:
        """Apply the field as a derivation to a polynomial."""
        if f.nvars != self.dim:
            raise ValueError("dimension mismatch")
        out = Poly(self.dim)
        for i, c in enumerate(self.coeffs):
            if c:
                d = f.diff(i)
                if d:
                    out = out + c.mul(d)
        return out

    def __add__(self, other: "PolyVectorField"):
        _same_dim(self, other)
        return PolyVectorField([a + b for a, b in zip(self.coeffs, other.coeffs)])

    def __sub__(self, other: "PolyVectorField"):
        _same_dim(self, other)
        return PolyVectorField([a - b for a, b in zip(self.coeffs, other.coeffs)])

    def __neg__(self):
        return PolyVectorField([-a for a in self.coeffs])

    def __mul__(self, other):
        # scalar or polynomial multiple
        if isinstance(other, Poly):
            return PolyVectorField([other.mul(a) for a in self.coeffs])
        return PolyVectorField([a.scale(other) for a in self.coeffs])

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, PolyVectorField):
            return NotImplemented
        return self.coeffs == other.coeffs

    def __hash__(self):
        return hash(self.coeffs)

    def is_zero(self) -> bool:
        return not any(self.coeffs)

    def at_zero(self) -> list:
        return [c.constant for c in self.coeffs]

    def evalf(self, point: Sequence[float]) -> list[float]:
        return [c.evalf(point) for c in self.coeffs]

    def truncate(self, a: int) -> "PolyVectorField":
        return truncate_field(self, a)

    def truncate_degree(self, d: int) -> "PolyVectorField":
        return PolyVectorField([c.truncate_degree(d) for c in self.coeffs])

    def map_coeffs(self, f) -> "PolyVectorField":
        return PolyVectorField([c.map_coeffs(f) for c in self.coeffs])

    def to_text(self) -> str:
        blocks = []
        for i, c in enumerate(self.coeffs):
            body = c.to_text() or "0"
            blocks.append(f"d/du{i + 1}:\n" + "\n".join("  " + ln for ln in body.splitlines()))
        return "\n".join(blocks)

    def __repr__(self):
        return f"PolyVectorField(dim={self.dim})"


def _same_dim(v: PolyVectorField, w: PolyVectorField):
    if v.dim != w.dim:
        raise ValueError(f"dimension mismatch: {v.dim} vs {w.dim}")


def lie_bracket(v: PolyVectorField, w: PolyVectorField) -> PolyVectorField:
    """[V, W] = V o W - W o V as a first-order field."""
    _same_dim(v, w)
    return PolyVectorField([v(wc) - w(vc) for vc, wc in zip(v.coeffs, w.coeffs)])


def apply_sequence(fields: Sequence[PolyVectorField], i: int):
    """Value at 0 of ``V_1 V_2 ... V_b u_{i+1}`` (rightmost field acts first)."""
    if not fields:
        raise ValueError("empty field sequence")
    dim = fields[0].dim
    if any(f.dim != dim for f in fields):
        raise ValueError("dimension mismatch")
    f = Poly.var(dim, i)
    for v in reversed(fields):
        f = v(f)
        if not f:
            return mpq(0)
    return f.constant


def truncate_field(v: PolyVectorField, a: int) -> PolyVectorField:
    """Drop O^{a+1} terms: weight <= a for d/du_i (i < dim), <= a+1 for the last direction."""
    if a < 0:
        raise ValueError("truncation order must be >= 0")
    head = [c.truncate_weight(a) for c in v.coeffs[:-1]]
    return PolyVectorField(head + [v.coeffs[-1].truncate_weight(a + 1)])


# multi-indices -------------------------------------------------------------

def index_norm(j: Sequence[int]) -> int:
    """Weighted length: entries equal to 0 (the dt direction) count twice."""
    return len(j) + sum(1 for x in j if x == 0)


def multi_indices(n_drivers: int, norm: int) -> Iterator[tuple[int, ...]]:
    """All J over {0, 1, .., n_drivers} with index_norm(J) == norm, in lexicographic order."""
    for length in range(1, norm + 1):
        for j in itertools.product(range(n_drivers + 1), repeat=length):
            if index_norm(j) == norm:
                yield j


def multi_indices_upto(n_drivers: int, max_norm: int) -> list[tuple[int, ...]]:
    out = []
    for a in range(1, max_norm + 1):
        out.extend(multi_indices(n_drivers, a))
    return out


def count_multi_indices(n_drivers: int, max_norm: int) -> int:
    """Closed-form count of J with 1 <= index_norm(J) <= max_norm."""
    total = 0
    for b in range(1, max_norm + 1):
        for z in range(0, b + 1):
            if b + z <= max_norm:
                total += math.comb(b, z) * n_drivers ** (b - z)
    return total


def parse_poly_text(text: str, nvars: int) -> Poly:
    """Inverse of :meth:`Poly.to_text` for rational coefficients."""
    terms = {}
    for line in text.strip().splitlines():
        line = line.strip()
        if not line or line == "0":
            continue
        if " * " in line:
            cs, mono = line.split(" * ", 1)
        elif line.startswith("u"):
            cs, mono = "1", line
        else:
            cs, mono = line, ""
        e = [0] * nvars
        for tok in mono.split():
            var, k = tok[1:].split("^")
            e[int(var) - 1] = int(k)
        terms[tuple(e)] = mpq(cs)
    return Poly(nvars, terms)


def iter_fields_text(fields: Iterable[tuple[str, PolyVectorField]]) -> str:
    return "\n".join(f"[{name}]\n{f.to_text()}" for name, f in fields) + "\n"


# polynomial matrices ------------------------------------------------------

def mat_mul(A, B, max_degree: int | None = None, max_weight: int | None = None):
    """Product of square polynomial matrices (lists of rows)."""
    d = len(A)
    nv = A[0][0].nvars
    out = []
    for i in range(d):
        row = []
        for j in range(d):
            acc = Poly(nv)
            for k in range(d):
                if A[i][k] and B[k][j]:
                    acc = acc + A[i][k].mul(B[k][j], max_degree, max_weight)
            row.append(acc)
        out.append(row)
    return out


def _const_inverse(M0):
    """Gauss-Jordan inverse of an exact constant matrix."""
    d = len(M0)
    A = [list(r) + [mpq(int(i == j)) for j in range(d)] for i, r in enumerate(M0)]
    for c in range(d):
        piv = next(r for r in range(c, d) if A[r][c])
        A[c], A[piv] = A[piv], A[c]
        inv = A[c][c].inverse() if isinstance(A[c][c], QSqrt2) else 1 / A[c][c]
        A[c] = [_normalize(x * inv) for x in A[c]]
        for r in range(d):
            if r != c and A[r][c]:
                f = A[r][c]
                A[r] = [_normalize(x - f * y) for x, y in zip(A[r], A[c])]
    return [row[d:] for row in A]


def mat_inverse_series(M, max_degree: int | None = None, max_weight: int | None = None):
    """Inverse of a polynomial matrix invertible at 0, as a truncated series."""
    d = len(M)
    nv = M[0][0].nvars
    M0inv = _const_inverse([[M[i][j].constant for j in range(d)] for i in range(d)])
    P0 = [[Poly.const(nv, c) for c in row] for row in M0inv]
    # N = M0^{-1} (M - M0), nilpotent in the truncated algebra
    Mh = [[M[i][j] - Poly.const(nv, M[i][j].constant) for j in range(d)] for i in range(d)]
    N = mat_mul(P0, Mh, max_degree, max_weight)
    total = [row[:] for row in P0]
    term = P0
    top = max_degree if max_degree is not None else max_weight
    for _ in range(top):
        term = mat_mul(N, term, max_degree, max_weight)
        term = [[-p for p in row] for row in term]
        if not any(p for row in term for p in row):
            break
        total = [[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(total, term)]
    return total
