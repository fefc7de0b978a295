"""Concrete CR models: the Heisenberg group and the CR sphere.

The sphere is handled in the real chart ``w = (x^1..x^n, y^1..y^n, y^{n+1})``
around ``(0, .., 0, 1)``; ``x^{n+1}`` is eliminated through the sphere
constraint as a power series.  All series are exact, with coefficients in
Q[sqrt 2].
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .poly import (
    Poly,
    PolyVectorField,
    QSqrt2,
    compose_many,
    inverse_series,
    lie_bracket,
    mat_inverse_series,
    mpq,
    series_compose,
    sqrt1p_coeffs,
)

KINDS = ("heisenberg", "sphere")
HALF = mpq(1, 2)
INV_SQRT2 = QSqrt2(0, HALF)
SQRT2 = QSqrt2(0, 1)


@dataclass(frozen=True)
class ModelSpec:
    """A CR model of CR dimension ``n`` at its distinguished base point."""

    kind: str
    n: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported model kind {self.kind!r}; expected one of {KINDS}")
        if not isinstance(self.n, int) or self.n < 1:
            raise ValueError("n must be a positive integer")

    @classmethod
    def heisenberg(cls, n: int) -> "ModelSpec":
        return cls("heisenberg", n)

    @classmethod
    def sphere(cls, n: int) -> "ModelSpec":
        return cls("sphere", n)

    @property
    def dim(self) -> int:
        return 2 * self.n + 1

    @property
    def base_point(self) -> tuple:
        """Origin of H_n, or (0, .., 0, 1) in C^{n+1} for the sphere."""
        if self.kind == "heisenberg":
            return (0,) * self.dim
        return (0,) * self.n + (1,)

    def __str__(self):
        return f"{self.kind}(n={self.n})"


# ---------------------------------------------------------------------------
# structure jets


class StructureJet:
    """Structure functions ``C[i][j][k]`` (0-based) in Folland-Stein coordinates.

    ``[X_j, X_k] = sum_i C[i][j][k] X_i`` with ``X_{2n}`` the characteristic
    field T.  Every entry is truncated to parabolic weight ``order``.
    """

    def __init__(self, n: int, order: int, C):
        self.n = n
        self.order = order
        self.C = C

    @property
    def dim(self) -> int:
        return 2 * self.n + 1

    def __getitem__(self, ijk) -> Poly:
        i, j, k = ijk
        return self.C[i][j][k]

    def at_zero(self) -> list:
        d = self.dim
        return [[[self.C[i][j][k].constant for k in range(d)] for j in range(d)] for i in range(d)]

    def is_antisymmetric(self) -> bool:
        d = self.dim
        return all(self.C[i][j][k] == -self.C[i][k][j]
                   for i in range(d) for j in range(d) for k in range(d))

    def truncate(self, order: int) -> "StructureJet":
        d = self.dim
        C = [[[self.C[i][j][k].truncate_weight(order) for k in range(d)] for j in range(d)]
             for i in range(d)]
        return StructureJet(self.n, order, C)


def _heisenberg_constants(n: int, nvars: int):
    d = 2 * n + 1
    C = [[[Poly(nvars) for _ in range(d)] for _ in range(d)] for _ in range(d)]
    for a in range(n):
        C[2 * n][a][n + a] = Poly.const(nvars, 2)
        C[2 * n][n + a][a] = Poly.const(nvars, -2)
    return C


# ---------------------------------------------------------------------------
# sphere: ambient series


def _cmul(p, q, degree):
    (a, b), (c, d) = p, q
    return (a.mul(c, degree) - b.mul(d, degree), a.mul(d, degree) + b.mul(c, degree))


def _conj(p):
    return (p[0], -p[1])


class _SphereAmbient:
    """Ambient-chart series for S^{2n+1}, truncated at total degree ``degree`` in w."""

    def __init__(self, n: int, degree: int):
        self.n, self.degree = n, degree
        D = 2 * n + 1
        w = [Poly.var(D, i) for i in range(D)]
        self.x, self.y, yn1 = w[:n], w[n:2 * n], w[2 * n]
        one = Poly.const(D, 1)
        zero = Poly(D)
        r2 = sum((p.mul(p) for p in self.x + self.y), zero)
        sq = sqrt1p_coeffs(degree)
        self.rho = series_compose(sq, -r2, degree)
        self.xn1 = series_compose(sq, -(r2 + yn1.mul(yn1)), degree)
        self.inv1 = inverse_series(one + self.rho, degree)
        rr = self.rho.mul(one + self.rho, degree)
        self.inv_rr = inverse_series(rr, degree)
        self.q = inverse_series(rr.mul(one + self.rho, degree), degree)
        z = [(self.x[a], self.y[a]) for a in range(n)] + [(self.xn1, yn1)]
        self.z = z

        # Z_alpha = sum_a v[alpha][a] d/dz^a
        v = []
        for al in range(n):
            c = _cmul(_conj(z[al]), z[n], degree)
            c = (c[0].mul(self.inv_rr, degree), c[1].mul(self.inv_rr, degree))
            row = []
            for a in range(n + 1):
                t = _cmul(_conj(z[al]), z[a], degree)
                ta = ((one if a == al else zero) - t[0], -t[1])
                t2 = _cmul(_conj(z[n]), z[a], degree)
                tn = ((one if a == n else zero) - t2[0], -t2[1])
                ct = _cmul(c, tn, degree)
                row.append((ta[0] - ct[0], ta[1] - ct[1]))
            v.append(row)
        self.v = v

        # frame components on the chart coordinates: fields[j][comp]
        fields = []
        for al in range(n):
            re = [v[al][b][0] for b in range(n)]
            im = [v[al][b][1] for b in range(n)]
            fields.append([p.scale(INV_SQRT2) for p in re + im + [v[al][n][1]]])
        for al in range(n):
            re = [v[al][b][0] for b in range(n)]
            im = [v[al][b][1] for b in range(n)]
            fields.append([p.scale(INV_SQRT2) for p in im + [-r for r in re] + [-v[al][n][0]]])
        fields.append([p.scale(-HALF) for p in self.y] + [p.scale(HALF) for p in self.x]
                      + [self.xn1.scale(HALF)])
        self.fields = fields

    def structure_functions(self):
        """Closed-form C^i_{jk} as series in w (all indices 0-based)."""
        n, deg = self.n, self.degree
        D = 2 * n + 1
        zero = Poly(D)
        x, y, inv1, q = self.x, self.y, self.inv1, self.q
        C = [[[zero for _ in range(D)] for _ in range(D)] for _ in range(D)]

        def d(a, b):
            return 1 if a == b else 0

        for al in range(n):
            for be in range(n):
                anti = x[al].mul(y[be]) - x[be].mul(y[al])
                sym = x[al].mul(x[be]) + y[al].mul(y[be])
                for ga in range(n):
                    lin_x = x[al].scale(d(be, ga)) - x[be].scale(d(al, ga))
                    lin_y = y[al].scale(d(be, ga)) - y[be].scale(d(al, ga))
                    qy = anti.mul(y[ga]).mul(q, deg)
                    qx = anti.mul(x[ga]).mul(q, deg)
                    C[ga][al][be] = (lin_x.mul(inv1, deg) + qy).scale(INV_SQRT2)
                    C[n + ga][al][be] = (lin_y.mul(inv1, deg) + qx).scale(INV_SQRT2)
                    C[ga][n + al][n + be] = (-lin_x.mul(inv1, deg) + qy).scale(INV_SQRT2)
                    C[n + ga][n + al][n + be] = (-lin_y.mul(inv1, deg) + qx).scale(INV_SQRT2)
                    my = y[be].scale(d(al, ga)) - y[al].scale(d(be, ga)) + y[ga].scale(2 * d(al, be))
                    mx = -x[be].scale(d(al, ga)) + x[al].scale(d(be, ga)) + x[ga].scale(2 * d(al, be))
                    cy = (my.mul(inv1, deg) + sym.mul(y[ga]).mul(q, deg)).scale(INV_SQRT2)
                    cx = (mx.mul(inv1, deg) + sym.mul(x[ga]).mul(q, deg)).scale(INV_SQRT2)
                    C[ga][al][n + be] = cy
                    C[ga][n + be][al] = -cy
                    C[n + ga][al][n + be] = cx
                    C[n + ga][n + be][al] = -cx
                if al == be:
                    C[2 * n][al][n + be] = Poly.const(D, 2)
                    C[2 * n][n + be][al] = Poly.const(D, -2)
            C[n + al][2 * n][al] = Poly.const(D, HALF)
            C[n + al][al][2 * n] = Poly.const(D, -HALF)
            C[al][2 * n][n + al] = Poly.const(D, -HALF)
            C[al][n + al][2 * n] = Poly.const(D, HALF)
        return C

    def gamma_trace(self):
        """sum_beta Gamma^alpha_{bar beta beta} as (re, im) series, one per alpha."""
        n, deg = self.n, self.degree
        D = 2 * n + 1
        r2 = sum((p.mul(p) for p in self.x + self.y), Poly(D))
        coef = self.inv1.scale(n) + r2.mul(self.q, deg).scale(HALF)
        return [(coef.mul(self.x[a], deg), coef.mul(self.y[a], deg)) for a in range(n)]


@lru_cache(maxsize=None)
def _sphere_ambient(n: int, degree: int) -> _SphereAmbient:
    return _SphereAmbient(n, degree)


def ambient_structure_by_brackets(n: int, degree: int):
    """Structure functions of the sphere frame extracted from brackets in the chart.

    Solves ``[V_j, V_k] = sum_i C^i_{jk} V_i`` with the frame matrix inverted as a
    power series.  Independent of the closed-form list; used as a cross-check.
    """
    amb = _sphere_ambient(n, degree + 1)
    D = 2 * n + 1
    V = [PolyVectorField(f) for f in amb.fields]
    M = [[amb.fields[j][i] for j in range(D)] for i in range(D)]  # column j = field j
    Minv = mat_inverse_series(M, max_degree=degree)
    C = [[[Poly(D) for _ in range(D)] for _ in range(D)] for _ in range(D)]
    for j in range(D):
        for k in range(j + 1, D):
            br = lie_bracket(V[j], V[k]).coeffs
            for i in range(D):
                c = Poly(D)
                for m in range(D):
                    c = c + Minv[i][m].mul(br[m], degree)
                C[i][j][k] = c
                C[i][k][j] = -c
    return C


# ---------------------------------------------------------------------------
# chart jet


class ChartJet:
    """Jet of the Folland-Stein chart map ``u -> E_x(u)`` in ambient coordinates."""

    def __init__(self, model: ModelSpec, order: int, w: list[Poly]):
        self.model = model
        self.order = order
        self.w = w

    def evalf(self, u) -> np.ndarray:
        return np.array([p.evalf(u) for p in self.w])

    def ambient_point(self, u) -> np.ndarray:
        """Complex point of C^{n+1} (sphere) or the point itself (Heisenberg)."""
        w = self.evalf(u)
        if self.model.kind == "heisenberg":
            return w
        n = self.model.n
        z = w[:n] + 1j * w[n:2 * n]
        r2 = float(np.sum(np.abs(z) ** 2) + w[2 * n] ** 2)
        return np.append(z, np.sqrt(1 - r2) + 1j * w[2 * n])


@lru_cache(maxsize=None)
def chart_jet(model: ModelSpec, order: int) -> ChartJet:
    """Solve dC/dt = X_u(C), C(0) = x, as a jet truncated at weight ``order``.

    Picard iteration on E(u) = sum_d (1/d) [sum_j u^j V_j(E(u))]_{deg d}; each
    sweep fixes one more weight level.  Heisenberg coordinates are already
    normal, so its chart is the identity.
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    D = model.dim
    u = [Poly.var(D, i) for i in range(D)]
    if model.kind == "heisenberg":
        return ChartJet(model, order, [p.truncate_weight(order) for p in u])
    amb = _sphere_ambient(model.n, max(order, 1))
    flat = [c for f in amb.fields for c in f]
    E = [Poly(D) for _ in range(D)]
    for _ in range(order + 2):
        vals = compose_many(flat, E, max_weight=max(order - 1, 0))
        rhs = [Poly(D) for _ in range(D)]
        for j in range(D):
            for i in range(D):
                rhs[i] = rhs[i] + u[j].mul(vals[j * D + i], max_weight=order)
        new = []
        for p in rhs:
            terms = {e: c / sum(e) for e, c in p.terms.items()}
            new.append(Poly(D, terms))
        if new == E:
            return ChartJet(model, order, E)
        E = new
    raise RuntimeError("Picard iteration for the chart jet did not stabilise")


@lru_cache(maxsize=None)
def structure_functions(model: ModelSpec, order: int) -> StructureJet:
    """C^i_{jk} in Folland-Stein coordinates, truncated at weight ``order``."""
    if order < 0:
        raise ValueError("order must be >= 0")
    D = model.dim
    if model.kind == "heisenberg":
        return StructureJet(model.n, order, _heisenberg_constants(model.n, D))
    amb = _sphere_ambient(model.n, max(order, 1))
    E = chart_jet(model, order).w
    Camb = amb.structure_functions()
    flat = compose_many([Camb[i][j][k] for i in range(D) for j in range(D) for k in range(D)],
                        E, max_weight=order)
    C = [[[flat[(i * D + j) * D + k] for k in range(D)] for j in range(D)] for i in range(D)]
    return StructureJet(model.n, order, C)


# ---------------------------------------------------------------------------
# Christoffel symbols and drift


class Christoffel:
    """Christoffel data of the model's unitary frame."""

    def __init__(self, model: ModelSpec):
        self.model = model

    def _inner(self, z):
        # inner[beta, alpha] = delta/(1+rho) + conj(z^alpha) z^beta / (2 rho (1+rho)^2)
        n = self.model.n
        rho = abs(z[n])
        return np.eye(n) / (1 + rho) + np.einsum("b,a->ba", z[:n], np.conj(z[:n])) / (
            2 * rho * (1 + rho) ** 2)

    def gamma(self, z) -> np.ndarray:
        """Gamma^gamma_{bar beta alpha}(z) as an array indexed [gamma, beta, alpha]."""
        n = self.model.n
        if self.model.kind == "heisenberg":
            return np.zeros((n, n, n), dtype=complex)
        z = np.asarray(z, dtype=complex)
        return np.einsum("g,ba->gba", z[:n], self._inner(z))

    def gamma_conj(self, z) -> np.ndarray:
        """Gamma^{bar gamma}_{alpha bar beta}(z), indexed [gamma, beta, alpha]."""
        n = self.model.n
        if self.model.kind == "heisenberg":
            return np.zeros((n, n, n), dtype=complex)
        z = np.asarray(z, dtype=complex)
        return np.einsum("g,ba->gba", np.conj(z[:n]), self._inner(z))

    def trace(self, z) -> np.ndarray:
        """sum_beta Gamma^alpha_{bar beta beta}(z), one entry per alpha."""
        g = self.gamma(z)
        return np.einsum("abb->a", g)

    def at_base(self) -> np.ndarray:
        """Gamma^alpha_{bar beta beta} at the base point, indexed [alpha, beta]."""
        g = self.gamma(np.array(self.model.base_point, dtype=complex))
        return np.einsum("abb->ab", g)


def christoffel(model: ModelSpec) -> Christoffel:
    return Christoffel(model)


@lru_cache(maxsize=None)
def drift_field(model: ModelSpec, order: int) -> PolyVectorField:
    """X_0 = -sqrt2 sum_{a,b} (Re G^a_{bb} X_a - Im G^a_{bb} X_{n+a}), weight-truncated."""
    from .normal import frame_expansion

    D = model.dim
    if model.kind == "heisenberg":
        return PolyVectorField.zero(D)
    n = model.n
    amb = _sphere_ambient(n, max(order, 1))
    E = chart_jet(model, order + 1).w
    tr = amb.gamma_trace()
    pulled = compose_many([p for pair in tr for p in pair], E, max_weight=order + 1)
    frame = frame_expansion(model, order + 1)
    out = PolyVectorField.zero(D)
    for a in range(n):
        re, im = pulled[2 * a], pulled[2 * a + 1]
        fa, fna = frame[a], frame[n + a]
        comps = [re.mul(fa.coeffs[i], max_weight=order + 1) - im.mul(fna.coeffs[i], max_weight=order + 1)
                 for i in range(D)]
        out = out + PolyVectorField(comps)
    return (out * (-SQRT2)).truncate(order)


# ---------------------------------------------------------------------------
# numeric oracles


def sphere_frame_numeric(n: int, w) -> np.ndarray:
    """Frame matrix in the chart at ``w`` (floats): column j holds field j."""
    w = np.asarray(w, dtype=float)
    x, y, yn1 = w[:n], w[n:2 * n], w[2 * n]
    r2 = float(np.dot(x, x) + np.dot(y, y))
    rho = np.sqrt(1 - r2)
    xn1 = np.sqrt(1 - r2 - yn1 ** 2)
    z = np.append(x + 1j * y, xn1 + 1j * yn1)
    D = 2 * n + 1
    M = np.zeros((D, D))
    for al in range(n):
        c = np.conj(z[al]) * z[n] / (rho * (1 + rho))
        v = -np.conj(z[al]) * z - c * (np.eye(n + 1)[n] - np.conj(z[n]) * z)
        v[al] += 1
        M[:n, al] = v[:n].real / np.sqrt(2)
        M[n:2 * n, al] = v[:n].imag / np.sqrt(2)
        M[2 * n, al] = v[n].imag / np.sqrt(2)
        M[:n, n + al] = v[:n].imag / np.sqrt(2)
        M[n:2 * n, n + al] = -v[:n].real / np.sqrt(2)
        M[2 * n, n + al] = -v[n].real / np.sqrt(2)
    M[:n, 2 * n] = -y / 2
    M[n:2 * n, 2 * n] = x / 2
    M[2 * n, 2 * n] = xn1 / 2
    return M
