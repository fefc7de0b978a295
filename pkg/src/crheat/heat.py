"""Diagonal heat-kernel experiments in Folland-Stein coordinates.

Everything numeric lives here: Gaveau's constant, the compiled (scaled)
polynomial SDE and its Heun integrator, stochastic-Taylor endpoints,
anisotropic kernel density estimates at the origin, the expansion fit in
sqrt(t), the mollified c_1 estimator and the Hormander / scaling checks.

Densities come in two normalisations.  Kernel estimates are densities with
respect to Lebesgue measure du; heat-kernel values are reported against
the contact volume, which is smaller by the factor ``contact_volume(n) =
2^n n!``.  With that convention the Heisenberg constant is gaveau_c0(n).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numba as nb
import numpy as np
from scipy import integrate, special
from scipy.stats import qmc

from .models import ModelSpec, drift_field
from .normal import frame_expansion
from .poly import Poly, PolyVectorField, index_norm, lie_bracket, multi_indices, mpq, weight
from .wiener import (_FI, _KI, _WI, IteratedTable, PathGrid, PhiEvaluator, _check_seed,
                     levy_area, stream_init, stream_normal)

GUARD_RADIUS = 10.0
DEFAULT_ORDER = 4
DEFAULT_STEPS = 2 ** 12
RICHARDSON_PAIR = (0.4, 0.6)


def contact_volume(n: int) -> int:
    """Ratio between Lebesgue measure du and the contact volume at the base point."""
    return 2 ** n * math.factorial(n)


# ---------------------------------------------------------------------------
# Gaveau's constant


def _gaveau_integrand(tau, n):
    x = 2.0 * abs(tau)
    if x < 1e-8:
        return 1.0
    return (x / math.sinh(x)) ** n


def _tail_bound(T: float, n: int) -> float:
    # x / sinh x <= 2x e^{-x} / (1 - e^{-2x}); for x >= 1 that is <= 2.32 x e^{-x}
    # so the tail of (2t/sinh 2t)^n beyond T is <= int_T^inf (4.63 t)^n e^{-2nt} dt
    c = 4.63 ** n
    return c * special.gamma(n + 1) * special.gammaincc(n + 1, 2 * n * T) / (2 * n) ** (n + 1)


def gaveau_c0(n: int, return_error: bool = False):
    """c_0 = (2 pi)^{-(n+1)} int_R (2 tau / sinh 2 tau)^n d tau.

    The integral is split at 0, truncated where the integrand drops below
    1e-18 and integrated adaptively to absolute tolerance 1e-12.  With
    ``return_error`` the quadrature error estimate plus the analytic tail
    bound is returned as well.
    """
    if n < 1:
        raise ValueError("gaveau_c0 needs n >= 1; the integral diverges for n = 0")
    # first T with (2T/sinh 2T)^n < 1e-18
    T = 1.0
    while _gaveau_integrand(T, n) >= 1e-18:
        T *= 1.25
    val, err = integrate.quad(_gaveau_integrand, 0.0, T, args=(n,),
                              epsabs=1e-12, epsrel=1e-13, limit=200)
    total = 2.0 * val / (2.0 * math.pi) ** (n + 1)
    bound = 2.0 * (err + _tail_bound(T, n)) / (2.0 * math.pi) ** (n + 1)
    return (total, bound) if return_error else total


# ---------------------------------------------------------------------------
# compiled polynomial systems


def _wt(i: int, dim: int) -> int:
    return 2 if i == dim - 1 else 1


@dataclass(frozen=True)
class ScaledSystem:
    """Numeric fields of the (scaled or unscaled) SDE for a model at scale eps.

    Field 0 is the drift and fields 1..2n the drivers.  In the scaled form a
    monomial u^e in component i of field j is multiplied by
    eps^{w(e) - wt(i) + s_j} with s_j = 2 for the drift and 1 otherwise, which
    is the conjugation by the parabolic dilation.  The unscaled form carries
    eps X_j and eps^2 X_0 instead.
    """

    model: ModelSpec
    eps: float
    order: int
    scaled: bool
    exps: np.ndarray = field(repr=False)      # (M, dim) distinct monomials
    entries: np.ndarray = field(repr=False)   # (nnz, 3) int: monomial, field, component
    values: np.ndarray = field(repr=False)    # (nnz,) coefficients

    @classmethod
    def build(cls, model: ModelSpec, eps: float, order: int = DEFAULT_ORDER,
              scaled: bool = True) -> "ScaledSystem":
        if not 0 <= eps <= 1:
            raise ValueError("eps must lie in [0, 1]")
        fields = _exact_fields(model, order)
        dim = model.dim
        mono: dict = {}
        entries, values = [], []
        for j, f in enumerate(fields):
            s_j = 2 if j == 0 else 1
            for i, c in enumerate(f.coeffs):
                for e, coef in c.sorted_terms():
                    if scaled:
                        p = weight(e) - _wt(i, dim) + s_j
                        if p < 0:
                            raise ValueError("field is not compatible with the parabolic dilation")
                    else:
                        p = s_j
                    k = mono.setdefault(e, len(mono))
                    entries.append((k, j, i))
                    values.append(float(coef) * eps ** p)
        exps = np.array(list(mono), dtype=np.int64).reshape(len(mono), dim)
        return cls(model, float(eps), order, scaled, exps,
                   np.array(entries, dtype=np.int64).reshape(-1, 3), np.array(values, dtype=float))

    @classmethod
    def unscaled(cls, model: ModelSpec, eps: float, order: int = DEFAULT_ORDER) -> "ScaledSystem":
        return cls.build(model, eps, order, scaled=False)

    @property
    def dim(self) -> int:
        return self.model.dim

    @property
    def n_fields(self) -> int:
        return 2 * self.model.n + 1

    def evaluate(self, y) -> np.ndarray:
        """Matrix V[j, i] of field j, component i at the point y."""
        mon = np.prod(np.asarray(y, dtype=float) ** self.exps, axis=1)
        out = np.zeros((self.n_fields, self.dim))
        np.add.at(out, (self.entries[:, 1], self.entries[:, 2]), self.values * mon[self.entries[:, 0]])
        return out

    @property
    def step(self):
        """The compiled Heun step for this monomial structure (shared across eps)."""
        return _compile_step(step_source(self.exps, self.entries, self.dim, self.n_fields))


@lru_cache(maxsize=None)
def _exact_fields(model: ModelSpec, order: int) -> tuple:
    return (drift_field(model, order), *frame_expansion(model, order))


def _field_block(exps, entries, D, F, src, tag):
    """Source lines computing every field component at the point named ``src``."""
    lines = []
    maxdeg = int(exps.max()) if exps.size else 0
    for d in range(D):
        if maxdeg:
            lines.append(f"    {tag}{d}_1 = {src}{d}")
        for k in range(2, maxdeg + 1):
            lines.append(f"    {tag}{d}_{k} = {tag}{d}_{k - 1} * {src}{d}")
    for m, e in enumerate(exps):
        factors = [f"{tag}{d}_{k}" for d, k in enumerate(e) if k]
        lines.append(f"    {tag}m{m} = " + (" * ".join(factors) or "1.0"))
    terms: dict = {}
    for q, (m, j, i) in enumerate(entries):
        terms.setdefault((j, i), []).append(f"c[{q}] * {tag}m{m}")
    for j in range(F):
        for i in range(D):
            lines.append(f"    {tag}v{j}_{i} = " + (" + ".join(terms.get((j, i), [])) or "0.0"))
    return lines


def _noise(F, i, fmt):
    return "".join(f" + dW[{j - 1}] * {fmt.format(j=j, i=i)}" for j in range(1, F))


def step_source(exps: np.ndarray, entries: np.ndarray, D: int, F: int) -> str:
    """Straight-line source of one Heun step for a fixed monomial structure.

    ``step(y, dW, dt, c)`` updates y in place and returns |y|^2; ``c`` holds
    the coefficient of each (monomial, field, component) entry.
    """
    lines = ["def step(y, dW, dt, c):"]
    lines += [f"    a{d} = y[{d}]" for d in range(D)]
    lines += _field_block(exps, entries, D, F, "a", "p")
    for i in range(D):
        lines.append(f"    b{i} = a{i} + dt * pv0_{i}" + _noise(F, i, "pv{j}_{i}"))
    lines += _field_block(exps, entries, D, F, "b", "q")
    for i in range(D):
        lines.append(f"    y[{i}] = a{i} + 0.5 * (dt * (pv0_{i} + qv0_{i})"
                     + _noise(F, i, "(pv{j}_{i} + qv{j}_{i})") + ")")
    lines.append("    return " + " + ".join(f"y[{i}] * y[{i}]" for i in range(D)))
    return "\n".join(lines) + "\n"


@lru_cache(maxsize=None)
def _compile_step(source: str):
    namespace: dict = {}
    exec(compile(source, "<heun-step>", "exec"), namespace)
    return nb.njit(namespace["step"])


@nb.njit(parallel=True)
def _heun_given(step, incs, c, D, guard):
    P, S, d = incs.shape
    out = np.zeros((P, D))
    escaped = np.zeros(P, dtype=np.bool_)
    dt = 1.0 / S
    g2 = guard * guard
    for p in nb.prange(P):
        y = np.zeros(D)
        dW = np.empty(d)
        for k in range(S):
            for j in range(d):
                dW[j] = incs[p, k, j]
            if not step(y, dW, dt, c) <= g2:
                escaped[p] = True
                break
        for i in range(D):
            out[p, i] = y[i]
    return out, escaped


@nb.njit(parallel=True)
def _heun_stream(step, seed, first, count, steps, sign, c, D, d, guard, ki, wi, fi):
    out = np.zeros((count, D))
    escaped = np.zeros(count, dtype=np.bool_)
    dt = 1.0 / steps
    sq = math.sqrt(dt)
    g2 = guard * guard
    for p in nb.prange(count):
        st = stream_init(seed, first + p)
        y = np.zeros(D)
        dW = np.empty(d)
        for k in range(steps):
            for j in range(d):
                dW[j] = sign * (sq * stream_normal(st, ki, wi, fi))
            if not step(y, dW, dt, c) <= g2:
                escaped[p] = True
                break
        for i in range(D):
            out[p, i] = y[i]
    return out, escaped


class EscapeError(RuntimeError):
    """A trajectory left the guard ball where the truncated fields are trusted."""


def _run_given(system: ScaledSystem, incs: np.ndarray, guard: float):
    return _heun_given(system.step, np.ascontiguousarray(incs, dtype=float), system.values,
                       system.dim, float(guard))


def simulate_endpoint(system: ScaledSystem, path: PathGrid, guard: float = GUARD_RADIUS) -> np.ndarray:
    """Heun endpoint at time 1 of one path; raises EscapeError outside the guard ball."""
    if path.n != system.model.n:
        raise ValueError("path dimension does not match the model")
    out, esc = _run_given(system, path.increments[None], guard)
    if esc[0]:
        raise EscapeError(f"trajectory left the ball of radius {guard}")
    return out[0]


def simulate_increments(system: ScaledSystem, incs: np.ndarray, guard: float = GUARD_RADIUS):
    """Batched endpoints for given increments (paths, steps, 2n); escaped rows are NaN."""
    out, esc = _run_given(system, incs, guard)
    out[esc] = np.nan
    return out, int(esc.sum())


def simulate_batch(system: ScaledSystem, seed: int, first: int, count: int,
                   steps: int = DEFAULT_STEPS, guard: float = GUARD_RADIUS,
                   antithetic: bool = False):
    """Endpoints of paths ``first .. first+count-1`` drawn from the counter-based stream.

    The paths are the ones :func:`crheat.wiener.sample_increments` returns
    for the same arguments; ``antithetic`` negates every increment.
    Escaped rows are NaN; the number of escapes is returned alongside.
    """
    _check_seed(seed)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    out, esc = _heun_stream(system.step, seed, first, count, steps, -1.0 if antithetic else 1.0,
                            system.values, system.dim, 2 * system.model.n, float(guard),
                            _KI, _WI, _FI)
    out[esc] = np.nan
    return out, int(esc.sum())


# ---------------------------------------------------------------------------
# stochastic Taylor expansion


class TaylorCoefficients:
    """(X_J u^i)(0) for every J up to a norm bound, computed exactly.

    Components ``i`` are 0-based; J runs over 0 (drift) and 1..2n.  Values are
    memoised over suffixes of J since X_J u^i = X_{j1}(X_{(j2..)} u^i).
    """

    def __init__(self, model: ModelSpec, max_norm: int, order: int | None = None):
        self.model = model
        self.max_norm = max_norm
        self.order = max(order or max_norm, 1)
        self.fields = _exact_fields(model, self.order)
        self._memo: dict = {}
        self._table: dict = {}

    def _poly(self, i: int, J: tuple) -> Poly:
        key = (i, J)
        if key not in self._memo:
            inner = Poly.var(self.model.dim, i) if not J[1:] else self._poly(i, J[1:])
            self._memo[key] = self.fields[J[0]](inner) if inner else inner
        return self._memo[key]

    def coefficient(self, i: int, J) -> object:
        J = tuple(J)
        if index_norm(J) > self.max_norm:
            raise KeyError(f"index {J} exceeds the coefficient norm bound {self.max_norm}")
        if (i, J) not in self._table:
            self._table[(i, J)] = self._poly(i, J).constant
        return self._table[(i, J)]

    def level(self, i: int, norm: int) -> dict:
        """Non-zero c^i_J with ||J|| == norm."""
        out = {}
        for J in multi_indices(2 * self.model.n, norm):
            c = self.coefficient(i, J)
            if c:
                out[J] = c
        return out

    def phi_level(self, a: int) -> dict:
        """{i: {J: c}} for the terms of phi^a: norm a horizontally, a + 1 vertically."""
        D = self.model.dim
        return {i: self.level(i, a + (i == D - 1)) for i in range(D)}


@lru_cache(maxsize=None)
def taylor_coefficients(model: ModelSpec, max_norm: int) -> TaylorCoefficients:
    return TaylorCoefficients(model, max_norm)


def _level_value(table: IteratedTable, terms: dict):
    out = 0.0
    for J, c in terms.items():
        out = out + float(c) * table[J]
    return out


def phi_a(table: IteratedTable, coeffs: TaylorCoefficients, a: int) -> np.ndarray:
    """The vector phi^a_1, shape (2n+1,) or (2n+1, paths)."""
    if table.max_norm < a + 1:
        raise ValueError(f"phi^{a} needs a table of norm >= {a + 1}")
    level = coeffs.phi_level(a)
    shape = () if table.single else (table.paths,)
    return np.array([_level_value(table, level[i]) + np.zeros(shape) for i in sorted(level)])


def taylor_endpoint(table: IteratedTable, coeffs: TaylorCoefficients, A: int, eps: float) -> np.ndarray:
    """sum_{a <= A} eps^a phi^{a,i} horizontally and eps^{a+1} phi^{a,2n+1} vertically."""
    if A < 1:
        raise ValueError("A must be >= 1")
    if table.max_norm < A + 1:
        raise ValueError(f"Taylor order {A} needs a table of norm >= {A + 1}")
    D = coeffs.model.dim
    total = 0.0
    for a in range(1, A + 1):
        scale = np.array([eps ** (a + (i == D - 1)) for i in range(D)])
        v = phi_a(table, coeffs, a)
        total = total + (scale if table.single else scale[:, None]) * v
    return total


def phi3_coefficients(model: ModelSpec) -> dict:
    """Non-zero coefficients of phi^3 as {i: {J: c}} with 1-based components i."""
    level = taylor_coefficients(model, 4).phi_level(3)
    return {i + 1: row for i, row in level.items()}


# ---------------------------------------------------------------------------
# kernel density at the origin


def epanechnikov(x):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) <= 1.0, 0.75 * (1.0 - x * x), 0.0)


@dataclass(frozen=True)
class KDEResult:
    estimate: float
    stderr: float
    bandwidth: tuple
    samples: int
    degenerate: bool = False


def kde_values(endpoints: np.ndarray, h: float) -> np.ndarray:
    """Per-sample product-kernel values at 0; bandwidth h horizontally, h^2 vertically.

    NaN rows (escaped trajectories) contribute 0.
    """
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    X = np.asarray(endpoints, dtype=float)
    dim = X.shape[1]
    scale = np.full(dim, float(h))
    scale[-1] = h * h
    K = np.prod(epanechnikov(X / scale), axis=1) / (h ** (dim + 1))
    return np.nan_to_num(K, nan=0.0)


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    m = float(v.mean())
    return m, float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.inf


def plugin_bandwidth(endpoints: np.ndarray) -> float:
    """1.06 sigma paths^{-1/(2n+5)}, sigma the mean horizontal standard deviation."""
    X = np.asarray(endpoints, dtype=float)
    X = X[~np.isnan(X).any(axis=1)]
    n = (X.shape[1] - 1) // 2
    sig = float(X[:, :-1].std(axis=0, ddof=1).mean())
    return 1.06 * sig * len(X) ** (-1.0 / (2 * n + 5))


def kde_diag(endpoints: np.ndarray, h: float | None = None, min_samples: int = 10_000) -> KDEResult:
    """Epanechnikov density estimate of the endpoint law at 0 (Lebesgue normalisation)."""
    X = np.asarray(endpoints, dtype=float)
    if h is not None and not h > 0:
        raise ValueError("bandwidth must be positive")
    if len(X) < min_samples:
        raise ValueError(f"kde_diag needs at least {min_samples} endpoints, got {len(X)}")
    degenerate = bool(np.all(X == 0.0))
    if degenerate:
        if h is None:
            raise ValueError("the plug-in bandwidth is undefined for a point mass")
        dim = X.shape[1]
        return KDEResult(0.75 ** dim / h ** (dim + 1), 0.0, (h,), len(X), True)
    h = plugin_bandwidth(X) if h is None else h
    m, se = _mean_se(kde_values(X, h))
    return KDEResult(m, se, (h,), len(X))


def richardson_weights(h1: float, h2: float) -> tuple[float, float]:
    """Weights removing an O(h^2) bias from two bandwidths."""
    d = h1 * h1 - h2 * h2
    return -h2 * h2 / d, h1 * h1 / d


def kde_richardson_values(endpoints: np.ndarray, pair=RICHARDSON_PAIR) -> np.ndarray:
    h1, h2 = pair
    w1, w2 = richardson_weights(h1, h2)
    return w1 * kde_values(endpoints, h1) + w2 * kde_values(endpoints, h2)


def kde_richardson(endpoints: np.ndarray, pair=RICHARDSON_PAIR, min_samples: int = 10_000) -> KDEResult:
    """Two-bandwidth extrapolated estimate; the standard error uses per-sample values jointly."""
    X = np.asarray(endpoints, dtype=float)
    if len(X) < min_samples:
        raise ValueError(f"kde_richardson needs at least {min_samples} endpoints, got {len(X)}")
    m, se = _mean_se(kde_richardson_values(X, pair))
    return KDEResult(m, se, tuple(pair), len(X))


# ---------------------------------------------------------------------------
# density runs and the expansion fit


@dataclass
class DensityPoint:
    t: float
    density: float          # Lebesgue density of F^{sqrt t}_1 at 0
    density_se: float
    escapes: int
    values: np.ndarray = field(repr=False)   # per-path (or per-pair) kernel values

    def scaled(self, n: int) -> tuple[float, float]:
        """t^{n+1} p(t, 0, 0) and its standard error, contact normalisation."""
        v = contact_volume(n)
        return self.density / v, self.density_se / v

    def heat_kernel(self, n: int) -> tuple[float, float]:
        s, e = self.scaled(n)
        return s / self.t ** (n + 1), e / self.t ** (n + 1)


@dataclass
class DensityRun:
    model: ModelSpec
    points: list
    paths: int
    steps: int
    seed: int
    bandwidth: tuple
    antithetic: bool
    common_paths: bool
    order: int

    def arrays(self):
        n = self.model.n
        t = np.array([p.t for p in self.points])
        s = np.array([p.scaled(n) for p in self.points])
        return t, s[:, 0], s[:, 1]

    def covariance(self) -> np.ndarray:
        """Covariance of the scaled estimates; full when paths are shared across t."""
        n = self.model.n
        if not self.common_paths:
            return np.diag(self.arrays()[2] ** 2)
        V = np.stack([p.values for p in self.points]) / contact_volume(n)
        return np.cov(V) / V.shape[1]


def estimate_density(model: ModelSpec, t_values, paths: int, steps: int = DEFAULT_STEPS,
                     seed: int = 0, bandwidth=RICHARDSON_PAIR, antithetic: bool = False,
                     common_paths: bool = False, order: int = DEFAULT_ORDER,
                     batch: int = 1 << 16, guard: float = GUARD_RADIUS) -> DensityRun:
    """Kernel estimates of the density of F^{sqrt t}_1 at 0 for every t.

    ``bandwidth`` is a float (single Epanechnikov bandwidth) or a pair
    (Richardson extrapolation).  Without ``common_paths`` the t values use
    disjoint blocks of path indices and are independent; with it they share
    paths, which makes their differences much more precise.  ``antithetic``
    averages each path with its negation.
    """
    pair = tuple(bandwidth) if np.ndim(bandwidth) else None
    kern = (lambda X: kde_richardson_values(X, pair)) if pair else (lambda X: kde_values(X, bandwidth))
    pts = []
    for k, t in enumerate(t_values):
        if not 0 < t <= 1:
            raise ValueError("t must lie in (0, 1]")
        system = ScaledSystem.build(model, math.sqrt(t), order)
        base = 0 if common_paths else k * paths
        vals = np.empty(paths)
        escapes = 0
        for start in range(0, paths, batch):
            cnt = min(batch, paths - start)
            X, e = simulate_batch(system, seed, base + start, cnt, steps, guard)
            v = kern(X)
            escapes += e
            if antithetic:
                Xa, e = simulate_batch(system, seed, base + start, cnt, steps, guard, antithetic=True)
                v = 0.5 * (v + kern(Xa))
                escapes += e
            vals[start:start + cnt] = v
        m, se = _mean_se(vals)
        pts.append(DensityPoint(float(t), m, se, escapes, vals))
    return DensityRun(model, pts, paths, steps, seed, pair or (bandwidth,), antithetic,
                      common_paths, order)


@dataclass
class ExpansionReport:
    """Fit of t^{n+1} p(t,0,0) in powers of sqrt(t) and of t."""

    model: ModelSpec
    t: np.ndarray
    estimates: np.ndarray          # t^{n+1} p-hat(t), contact normalisation
    stderr: np.ndarray
    sqrt_coef: np.ndarray          # coefficient of t^{k/2}, k = 0..order
    sqrt_cov: np.ndarray
    t_coef: np.ndarray             # c_a, coefficient of t^a
    t_cov: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def c(self) -> np.ndarray:
        return self.t_coef

    def sqrt_z(self) -> np.ndarray:
        """z-scores of the sqrt(t) coefficients."""
        return self.sqrt_coef / np.sqrt(np.diag(self.sqrt_cov))

    def odd_consistent_with_zero(self, nsigma: float = 3.0) -> bool:
        z = self.sqrt_z()[1::2]
        return bool(np.all(np.abs(z) <= nsigma))


def _gls(X: np.ndarray, y: np.ndarray, cov: np.ndarray):
    if X.shape[1] > X.shape[0] or np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("singular design matrix")
    L = np.linalg.cholesky(cov)
    A = np.linalg.solve(L, X)
    b = np.linalg.solve(L, y)
    Q, R = np.linalg.qr(A)
    if np.linalg.cond(R) > 1e12:
        raise ValueError("singular design matrix")
    Rinv = np.linalg.inv(R)
    return Rinv @ (Q.T @ b), Rinv @ Rinv.T


def fit_expansion(model: ModelSpec, t_values, estimates, stderr=None, order: int = 2,
                  cov=None, metadata: dict | None = None) -> ExpansionReport:
    """Weighted least squares of t^{n+1} p-hat(t) against powers of sqrt(t).

    ``estimates`` are heat-kernel values p-hat(t) and ``stderr`` their
    standard errors (or ``cov`` the covariance of t^{n+1} p-hat).  The
    sqrt(t) fit uses t^{k/2}, k <= order; the t fit uses t^a, a <= order // 2.
    """
    t = np.asarray(t_values, dtype=float)
    if len(t) < 3:
        raise ValueError("need at least 3 t values")
    if np.any(t <= 0) or t.max() < 4 * t.min():
        raise ValueError("t values must be positive and span a factor of at least 4")
    n = model.n
    y = np.asarray(estimates, dtype=float) * t ** (n + 1)
    if cov is None:
        if stderr is None:
            cov = np.eye(len(t))
        else:
            se = np.asarray(stderr, dtype=float) * t ** (n + 1)
            cov = np.diag(np.where(se > 0, se, 1.0) ** 2)
    cov = np.asarray(cov, dtype=float)
    Xs = np.stack([t ** (k / 2) for k in range(order + 1)], axis=1)
    Xt = np.stack([t ** a for a in range(order // 2 + 1)], axis=1)
    bs, Cs = _gls(Xs, y, cov)
    bt, Ct = _gls(Xt, y, cov)
    return ExpansionReport(model, t, y, np.sqrt(np.diag(cov)), bs, Cs, bt, Ct, dict(metadata or {}))


def fit_density_run(run: DensityRun, order: int = 2) -> ExpansionReport:
    t, s, _ = run.arrays()
    meta = dict(seed=run.seed, paths=run.paths, steps=run.steps, bandwidth=run.bandwidth,
                antithetic=run.antithetic, common_paths=run.common_paths)
    return fit_expansion(run.model, t, s / t ** (run.model.n + 1), order=order,
                         cov=run.covariance(), metadata=meta)


# ---------------------------------------------------------------------------
# c_1 by mollification


@dataclass(frozen=True)
class C1Estimate:
    value: float
    stderr: float
    h: float
    paths: int
    excluded: int
    raw: tuple          # (estimate at h, estimate at h/2), contact normalisation


def gaussian_mollifier(X: np.ndarray, h: float) -> np.ndarray:
    """Parabolic Gaussian bump: variance h^2 horizontally and h^4 vertically."""
    X = np.asarray(X, dtype=float)
    dim = X.shape[1]
    s = np.full(dim, float(h))
    s[-1] = h * h
    z = X / s
    return np.exp(-0.5 * np.sum(z * z, axis=1)) / ((2 * np.pi) ** (dim / 2) * h ** (dim + 1))


def _functional(kind, ev: PhiEvaluator, coefficients):
    if kind is None or kind == "phi":
        return ev.aggregate(coefficients)
    if kind == "one":
        return np.ones(ev.t.paths)
    if kind == "odd":
        return ev.B[1][:, -1]
    if callable(kind):
        return kind(ev)
    raise ValueError(f"unknown functional {kind!r}")


def c1_conditional(model: ModelSpec, paths: int, h: float = 0.4, seed: int = 0,
                   steps: int = 2 ** 8, batch: int = 4096, functional=None,
                   kappa4: str = "homogeneous", weights: str = "derived") -> C1Estimate:
    """Mollified estimate of E[delta_0(X_1) Phi] with X_1 = (B_1, sum S_1).

    The delta is replaced by a parabolic Gaussian of width h and h/2 and the
    two values are extrapolated to remove the O(h^2) smoothing bias.
    ``functional`` selects Phi ("phi", the default), the constant "one",
    the odd functional "odd" (W^1_1), or a callable on a PhiEvaluator.
    ``weights`` picks the Phi^i_J weights ("derived" or "closed-form", see
    :class:`PhiEvaluator`).  Paths whose kappa_3 denominator vanishes are
    dropped and counted.
    """
    from .wiener import sample_increments

    if model.kind != "sphere":
        raise ValueError("c1_conditional is defined for the sphere model")
    if not h > 0:
        raise ValueError("mollifier width must be positive")
    n = model.n
    coefficients = phi3_coefficients(model) if functional in (None, "phi") else None
    vals, excluded = [], 0
    for start in range(0, paths, batch):
        cnt = min(batch, paths - start)
        tab = IteratedTable(sample_increments(seed, start, cnt, steps, n), 6)
        ev = PhiEvaluator(tab, kappa4, weights)
        X = np.empty((cnt, 2 * n + 1))
        for i in range(2 * n):
            X[:, i] = ev.B[i + 1][:, -1]
        X[:, -1] = sum(levy_area(tab, a)[1] for a in range(1, n + 1))
        phi = _functional(functional, ev, coefficients)
        keep = ~ev.degenerate
        excluded += int((~keep).sum())
        g1, g2 = gaussian_mollifier(X[keep], h), gaussian_mollifier(X[keep], h / 2)
        vals.append(np.stack([g1 * phi[keep], g2 * phi[keep]], axis=1))
    V = np.concatenate(vals) / contact_volume(n)
    if excluded > 1e-3 * paths:
        warnings.warn(f"{excluded} of {paths} paths excluded as degenerate", RuntimeWarning)
    comb = (4.0 * V[:, 1] - V[:, 0]) / 3.0
    m, se = _mean_se(comb)
    return C1Estimate(m, se, h, len(V), excluded, (float(V[:, 0].mean()), float(V[:, 1].mean())))


# ---------------------------------------------------------------------------
# Hormander form and the scaling identity


def sphere_grid(dim: int, points: int = 10_000) -> np.ndarray:
    """Deterministic near-uniform points on S^{dim-1}: Fibonacci spiral for S^2, Halton otherwise."""
    if dim == 3:
        k = np.arange(points) + 0.5
        z = 1 - 2 * k / points
        r = np.sqrt(1 - z * z)
        phi = np.pi * (1 + 5 ** 0.5) * k
        pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    else:
        u = qmc.Halton(d=dim, scramble=False).random(points + 1)[1:]
        g = special.ndtri(np.clip(u, 1e-12, 1 - 1e-12))
        pts = g / np.linalg.norm(g, axis=1, keepdims=True)
    return np.concatenate([pts, np.eye(dim), -np.eye(dim)])


@dataclass(frozen=True)
class HormanderReport:
    minimum: float
    argmin: np.ndarray
    eps_at_min: float
    points: int


def _scaled_exact(model: ModelSpec, eps, order: int) -> list[PolyVectorField]:
    dim = model.dim
    out = []
    for f in frame_expansion(model, order):
        comps = []
        for i, c in enumerate(f.coeffs):
            comps.append(Poly(dim, {e: v * eps ** (weight(e) - _wt(i, dim) + 1) for e, v in c.terms.items()}))
        out.append(PolyVectorField(comps))
    return out


def hormander_form(model: ModelSpec, eps, xi: np.ndarray, order: int = 2) -> np.ndarray:
    """sum_j <X^eps_j(0), xi>^2 + sum_a <[X^eps_a, X^eps_{n+a}](0), xi>^2 for rows xi."""
    n = model.n
    X = _scaled_exact(model, mpq(eps) if isinstance(eps, int) else eps, order)
    vecs = np.array([[float(c) for c in f.at_zero()] for f in X])
    brs = np.array([[float(c) for c in lie_bracket(X[a], X[n + a]).at_zero()] for a in range(n)])
    xi = np.atleast_2d(xi)
    return np.sum((xi @ vecs.T) ** 2, axis=1) + np.sum((xi @ brs.T) ** 2, axis=1)


def hormander_inf(model: ModelSpec, eps_grid=None, points: int = 10_000, order: int = 2) -> HormanderReport:
    """Grid minimum of the Hormander quadratic form over the unit sphere and eps grid."""
    eps_grid = [mpq(k, 10) for k in range(11)] if eps_grid is None else eps_grid
    xi = sphere_grid(model.dim, points)
    best = (math.inf, None, None)
    for e in eps_grid:
        vals = hormander_form(model, e, xi, order)
        k = int(np.argmin(vals))
        if vals[k] < best[0]:
            best = (float(vals[k]), xi[k], float(e))
    return HormanderReport(best[0], best[1], best[2], len(xi))


@dataclass(frozen=True)
class ScalingReport:
    eps: float
    residual: np.ndarray        # per component |F - lambda_eps^{-1} U|
    tolerance: float
    passed: bool
    bitwise: bool


def scaling_identity_check(model: ModelSpec, eps: float, seed: int, steps: int = DEFAULT_STEPS,
                           path_index: int = 0, order: int = DEFAULT_ORDER,
                           tolerance: float | None = None) -> ScalingReport:
    """Compare F^eps with the rescaled unscaled solution U^eps on one driving path.

    The default tolerance is 1e-10 for the Heisenberg group and 10 dt otherwise.
    """
    from .wiener import sample_path

    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    path = sample_path(seed, path_index, steps, model.n)
    U = simulate_endpoint(ScaledSystem.unscaled(model, eps, order), path)
    F = simulate_endpoint(ScaledSystem.build(model, eps, order), path)
    dim = model.dim
    lam = np.array([eps ** _wt(i, dim) for i in range(dim)])
    res = np.abs(F - U / lam)
    if tolerance is None:
        tolerance = 1e-10 if model.kind == "heisenberg" else 10.0 / steps
    return ScalingReport(eps, res, tolerance, bool(np.all(res <= tolerance)),
                         bool(np.array_equal(F, U / lam)))


def power_bookkeeping(model: ModelSpec, eps: float, paths: int, seed: int = 0,
                      steps: int = 2 ** 8, h: float = 0.5):
    """Density of U^eps_1 at 0 times eps^{2n+2} against the density of F^eps_1 at 0.

    Kernel bandwidths follow the dilation (eps h, eps^2 h^2), so the two
    numbers agree exactly when the exponent 2n+2 is right.  Returns both.
    """
    from .wiener import sample_increments

    inc = sample_increments(seed, 0, paths, steps, model.n)
    U, _ = simulate_increments(ScaledSystem.unscaled(model, eps), inc)
    F, _ = simulate_increments(ScaledSystem.build(model, eps), inc)
    dim = model.dim
    lam = np.array([eps ** _wt(i, dim) for i in range(dim)])
    kU = kde_values(U / lam, h).mean() / eps ** (dim + 1)     # density of U at 0
    kF = kde_values(F, h).mean()
    return kU * eps ** (2 * model.n + 2), kF
