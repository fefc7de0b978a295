"""Brownian paths, iterated Stratonovich integrals and the Phi functionals.

Randomness comes from Philox4x64-10 substreams keyed by ``(seed, path_index)``
(the raw words are bit-identical to ``numpy.random.Philox(key=[seed,
path_index])``), so every path is reproducible on its own and results do not
depend on batching or thread count.  Gaussians come from a 256-layer
ziggurat consuming that stream.

Multi-index convention: entry 0 is the time direction, entries 1..2n are the
Brownian drivers.  Stratonovich integrals use the trapezoid rule
``I_{k+1} = I_k + (Y_k + Y_{k+1})/2 * dW_k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic

from .poly import index_norm, multi_indices_upto

# ---------------------------------------------------------------------------
# Philox4x64-10 and ziggurat Gaussians

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_ONE = np.uint64(1)
_ZERO = np.uint64(0)
_S1 = np.uint64(1)
_S8 = np.uint64(8)
_S11 = np.uint64(11)
_B52 = np.uint64(0x000FFFFFFFFFFFFF)
_FF = np.uint64(0xFF)
SEED_LIMIT = 2 ** 63


@intrinsic
def _mulhilo(typingctx, a, b):
    """Full 64x64 -> 128 bit product as (hi, lo)."""
    sig = types.UniTuple(types.uint64, 2)(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i128 = ir.IntType(128)
        p = builder.mul(builder.zext(args[0], i128), builder.zext(args[1], i128))
        hi = builder.trunc(builder.lshr(p, ir.Constant(i128, 64)), ir.IntType(64))
        lo = builder.trunc(p, ir.IntType(64))
        return context.make_tuple(builder, signature.return_type, (hi, lo))

    return sig, codegen


@nb.njit(inline="always", cache=True)
def philox_block(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on counter (c0..c3) with key (k0, k1)."""
    for r in range(10):
        if r > 0:
            k0 = k0 + _W0
            k1 = k1 + _W1
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def _zig_tables():
    # Marsaglia-Tsang, 256 layers on 52-bit magnitudes
    m1 = 2.0 ** 52
    dn = tn = 3.6541528853610088
    vn = 4.92867323399e-3
    ki = np.zeros(256, np.uint64)
    wi = np.zeros(256)
    fi = np.zeros(256)
    q = vn / math.exp(-0.5 * dn * dn)
    ki[0] = np.uint64(int(dn / q * m1))
    wi[0], wi[255] = q / m1, dn / m1
    fi[0], fi[255] = 1.0, math.exp(-0.5 * dn * dn)
    for i in range(254, 0, -1):
        dn = math.sqrt(-2.0 * math.log(vn / dn + math.exp(-0.5 * dn * dn)))
        ki[i + 1] = np.uint64(int(dn / tn * m1))
        tn = dn
        fi[i] = math.exp(-0.5 * dn * dn)
        wi[i] = dn / m1
    return ki, wi, fi


_KI, _WI, _FI = _zig_tables()
_KI = _KI.astype(np.int64)
_ZR = 3.6541528853610088


@nb.njit(inline="always", cache=True)
def stream_init(seed, path):
    """State of substream (seed, path): key, block counter, buffer position, buffer."""
    st = np.zeros(8, np.uint64)
    st[0] = np.uint64(seed)
    st[1] = np.uint64(path)
    st[3] = np.uint64(4)
    return st


@nb.njit(inline="always", cache=True)
def stream_next(st):
    """Next raw 64-bit word; same sequence as numpy's Philox(key=[seed, path]).random_raw."""
    pos = np.int64(st[3])
    if pos >= 4:
        st[2] += _ONE
        x0, x1, x2, x3 = philox_block(st[2], _ZERO, _ZERO, _ZERO, st[0], st[1])
        st[4] = x0
        st[5] = x1
        st[6] = x2
        st[7] = x3
        pos = 0
    st[3] = np.uint64(pos + 1)
    return st[4 + pos]


@nb.njit(cache=True)
def _next_double(st):
    return (stream_next(st) >> _S11) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True)
def _zig_tail(st, idx, rabs, x, fi):
    # rare slow path; kept out of line so the fast path stays small
    if idx == 0:
        while True:
            xx = -math.log1p(-_next_double(st)) / _ZR
            yy = -math.log1p(-_next_double(st))
            if yy + yy > xx * xx:
                return -(_ZR + xx) if (rabs >> 8) & 1 else _ZR + xx
    if (fi[idx - 1] - fi[idx]) * _next_double(st) + fi[idx] < math.exp(-0.5 * x * x):
        return x
    return np.nan


@nb.njit(inline="always", cache=True)
def stream_normal(st, ki, wi, fi):
    """One standard normal by the 256-layer ziggurat (numpy's layer layout)."""
    while True:
        r = stream_next(st)
        idx = np.int64(r & _FF)
        sign = np.int64((r >> _S8) & _S1)
        rabs = np.int64((r >> np.uint64(9)) & _B52)
        x = rabs * wi[idx]
        if sign:
            x = -x
        if rabs < ki[idx]:
            return x
        y = _zig_tail(st, idx, rabs, x, fi)
        if not math.isnan(y):
            return y


@nb.njit(cache=True)
def _fill_normals(seed, path, out, ki, wi, fi):
    st = stream_init(seed, path)
    for i in range(out.shape[0]):
        out[i] = stream_normal(st, ki, wi, fi)


@nb.njit(parallel=True, cache=True)
def _increments_batch(seed, first, count, steps, d, dt, ki, wi, fi):
    out = np.empty((count, steps, d))
    sq = math.sqrt(dt)
    for p in nb.prange(count):
        st = stream_init(seed, first + p)
        for k in range(steps):
            for j in range(d):
                out[p, k, j] = sq * stream_normal(st, ki, wi, fi)
    return out


def _check_seed(seed: int):
    if not 0 <= int(seed) < SEED_LIMIT:
        raise ValueError(f"seed must lie in [0, 2**63), got {seed}")


def path_normals(seed: int, path_index: int, count: int) -> np.ndarray:
    """The first ``count`` standard normals of substream (seed, path_index)."""
    _check_seed(seed)
    out = np.empty(count)
    _fill_normals(seed, path_index, out, _KI, _WI, _FI)
    return out


def sample_increments(seed: int, first: int, count: int, steps: int, n: int) -> np.ndarray:
    """Brownian increments of paths ``first .. first+count-1``: shape (count, steps, 2n)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_seed(seed)
    return _increments_batch(seed, first, count, steps, 2 * n, 1.0 / steps, _KI, _WI, _FI)


@dataclass(frozen=True)
class PathGrid:
    """One discretised 2n-dimensional Brownian path on [0, 1]."""

    increments: np.ndarray = field(repr=False)
    seed: int = 0
    path_index: int = 0

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def n(self) -> int:
        return self.increments.shape[1] // 2

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def W(self) -> np.ndarray:
        """Path values at the grid points, shape (steps+1, 2n), W_0 = 0."""
        out = np.zeros((self.steps + 1, self.increments.shape[1]))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


def sample_path(seed: int, path_index: int, steps: int, n: int) -> PathGrid:
    """Deterministic path for (seed, path_index, steps, n)."""
    inc = sample_increments(seed, path_index, 1, steps, n)[0]
    return PathGrid(inc, seed, path_index)


# ---------------------------------------------------------------------------
# iterated integrals


class IteratedTable:
    """Lazily filled table of B^J on the grid for a batch of paths.

    ``increments`` has shape (paths, steps, 2n) or (steps, 2n).  Values are
    arrays over (paths, steps+1); a single path yields 1-d arrays.  Entries
    are built from their prefixes, so the table is prefix-closed.
    """

    def __init__(self, increments: np.ndarray, max_norm: int):
        if max_norm < 1:
            raise ValueError("max_norm must be >= 1")
        inc = np.asarray(increments, dtype=float)
        self.single = inc.ndim == 2
        if self.single:
            inc = inc[None]
        self.increments = inc
        self.paths, self.steps, d = inc.shape
        self.n = d // 2
        self.max_norm = max_norm
        self.dt = 1.0 / self.steps
        self._cache: dict = {}
        self._dW = {0: np.full((self.paths, self.steps), self.dt)}
        for j in range(d):
            self._dW[j + 1] = inc[:, :, j]

    @classmethod
    def from_path(cls, path: PathGrid, max_norm: int) -> "IteratedTable":
        return cls(path.increments, max_norm)

    def _out(self, arr):
        return arr[0] if self.single else arr

    def _check_driver(self, k: int):
        if not 0 <= k <= 2 * self.n:
            raise KeyError(f"driver index {k} outside 0..{2 * self.n}")

    def integrate(self, Y: np.ndarray, k: int) -> np.ndarray:
        """Cumulative Stratonovich (trapezoid) integral of process Y against driver k."""
        self._check_driver(k)
        Y = np.asarray(Y)
        if Y.ndim == 1:
            Y = Y[None]
        out = np.zeros((self.paths, self.steps + 1))
        np.cumsum(0.5 * (Y[:, :-1] + Y[:, 1:]) * self._dW[k], axis=1, out=out[:, 1:])
        return out

    def _raw(self, J: tuple) -> np.ndarray:
        if J in self._cache:
            return self._cache[J]
        if len(J) == 1:
            k = J[0]
            self._check_driver(k)
            out = np.zeros((self.paths, self.steps + 1))
            np.cumsum(self._dW[k], axis=1, out=out[:, 1:])
        else:
            out = self.integrate(self._raw(J[:-1]), J[-1])
        self._cache[J] = out
        return out

    def path(self, J) -> np.ndarray:
        """B^J at every grid point."""
        J = tuple(int(j) for j in J)
        if not J:
            raise KeyError("empty multi-index")
        if index_norm(J) > self.max_norm:
            raise KeyError(f"index {J} has norm {index_norm(J)} > table bound {self.max_norm}")
        return self._out(self._raw(J))

    def __getitem__(self, J) -> np.ndarray:
        """B^J_1."""
        return self.path(J)[..., -1]

    def __contains__(self, J) -> bool:
        return tuple(J) in self._cache

    def materialize(self) -> list[tuple]:
        """Fill every index with norm <= max_norm; returns them in enumeration order."""
        idx = multi_indices_upto(2 * self.n, self.max_norm)
        for J in idx:
            self._raw(J)
        return idx

    # helpers on processes
    def time_integral(self, Y: np.ndarray) -> np.ndarray:
        return self._out(self.integrate(Y, 0))

    def W(self, j: int) -> np.ndarray:
        return self.path((j,))


def levy_area(table: IteratedTable, alpha: int):
    """S^alpha = B^(alpha, n+alpha) - B^(n+alpha, alpha); returns (path, endpoint)."""
    n = table.n
    if not 1 <= alpha <= n:
        raise KeyError(f"alpha must be in 1..{n}")
    s = table.path((alpha, n + alpha)) - table.path((n + alpha, alpha))
    return s, s[..., -1]


# ---------------------------------------------------------------------------
# Phi functionals


class DegeneratePathError(ValueError):
    """The kappa_3 denominator vanished (e.g. an all-zero path)."""


def sigma(i: int, n: int) -> int:
    return 1 if i <= n else -1


def partner(i: int, n: int) -> int:
    """The index written sigma(i) n + i: i+n for i <= n and i-n for i > n."""
    return i + n if i <= n else i - n


@dataclass
class PhiRecord:
    n: int
    sigma: dict
    kappa1: dict
    kappa2: dict
    kappa3: np.ndarray
    kappa4: np.ndarray
    terms: dict          # (i, J) -> Phi^i_J (1-based i, J over 0..2n)
    aggregate: np.ndarray | None
    degenerate: np.ndarray


KAPPA4_READINGS = ("homogeneous", "literal")
WEIGHT_FORMS = ("closed-form", "derived")
DENOM_FLOOR = 1e-12


class PhiEvaluator:
    """Evaluates kappa's and Phi^i_J on an iterated table (batched over paths).

    ``weights="closed-form"`` uses the published closed forms for a fixed set
    of index shapes.  ``weights="derived"`` builds the weight for any word J
    from the Malliavin dual directions: with v = grad S projected off the
    horizontal endpoints (hS below),

        Phi^i_J       = -D_{e_i t} B^J + k1 k3 D_hS B^J + (k1 k4 + k2 k3) B^J
        Phi^{2n+1}_J  = -k3 D_hS B^J - k4 B^J

    on {X_1 = 0}, where D_hS replaces each dB^j by
    (-2 sigma(j) B^{partner} + 2 sigma(j) int_0^1 B^{partner}) dt and
    k4 = <grad k3, hS>.  It satisfies the integration-by-parts identity
    term by term; the closed forms do not (they drop the constant part of
    hS and the -B^(0,0) term of Phi^i_(i,0)).
    """

    def __init__(self, table: IteratedTable, kappa4: str = "homogeneous",
                 weights: str = "closed-form"):
        if table.max_norm < 6:
            raise ValueError("Phi functionals need a table of norm >= 6")
        if kappa4 not in KAPPA4_READINGS:
            raise ValueError(f"kappa4 reading must be one of {KAPPA4_READINGS}")
        if weights not in WEIGHT_FORMS:
            raise ValueError(f"weights must be one of {WEIGHT_FORMS}")
        self.weights = weights
        self.t = table
        self.n = table.n
        n, t = self.n, table
        d = 2 * n
        self.B = {i: t._raw((i,)) for i in range(1, d + 1)}
        denom = 4 * sum(t.integrate(self.B[i] ** 2, 0)[:, -1] - t._raw((i, 0))[:, -1] ** 2
                        for i in range(1, d + 1))
        self.degenerate = ~(np.abs(denom) > DENOM_FLOOR)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.kappa3 = np.where(self.degenerate, np.nan, 1.0 / np.where(self.degenerate, 1.0, denom))
        self.kappa1 = {i: -2 * sigma(i, n) * t._raw((partner(i, n), 0))[:, -1] for i in range(1, d + 1)}
        self.kappa2 = {i: 2 * t._raw((i, 0))[:, -1] - 4 * t._raw((i, 0, 0))[:, -1]
                       for i in range(1, d + 1)}
        A = np.zeros(t.paths)
        Bsum = np.zeros(t.paths)
        for a in range(1, n + 1):
            A += (-2 * t.integrate(t._raw((n + a, 0)) * self.B[a], 0)[:, -1]
                  + 2 * t.integrate(t._raw((a, 0)) * self.B[n + a], 0)[:, -1])
            Bsum += (t._raw((a, 0))[:, -1] * t._raw((n + a, 0, 0))[:, -1]
                     - t._raw((n + a, 0))[:, -1] * t._raw((a, 0, 0))[:, -1])
        k3sq = self.kappa3 ** 2
        if weights == "derived":
            self.I = {i: t._raw((i, 0))[:, -1] for i in range(1, d + 1)}
            dN = np.zeros(t.paths)
            for i in range(1, d + 1):
                p = partner(i, n)
                h = sigma(i, n) * (-2 * t._raw((p, 0)) + 2 * np.linspace(0.0, 1.0, t.steps + 1)[None, :] * self.I[p][:, None])
                dN += t.integrate((self.B[i] - self.I[i][:, None]) * h, 0)[:, -1]
            self.kappa4 = -8 * k3sq * dN
        elif kappa4 == "homogeneous":
            self.kappa4 = -8 * k3sq * (A + 2 * Bsum)
        else:
            self.kappa4 = -8 * k3sq * A + 2 * Bsum

    def _end(self, J):
        return self.t._raw(tuple(J))[:, -1]

    def _proc(self, J):
        return self.t._raw(tuple(J))

    def phi_horizontal(self, i: int, J: tuple) -> np.ndarray:
        """Phi^i_J for horizontal i and J = (j, k, l) or J = (i, 0)."""
        n, t = self.n, self.t
        k1, k2, k3, k4 = self.kappa1[i], self.kappa2[i], self.kappa3, self.kappa4
        if len(J) == 2 and J[1] == 0:
            if J[0] != i:
                raise KeyError(f"no formula for Phi^{i}_{J}")
            return (k1 * k4 + k2 * k3) * self._end((i, 0)) \
                - 2 * sigma(i, n) * k1 * k3 * self._end((partner(i, n), 0))
        if len(J) != 3 or 0 in J:
            raise KeyError(f"no formula for Phi^{i}_{J}")
        j, k, l = J
        out = (k1 * k4 + k2 * k3) * self._end(J)
        if i == j:
            out = out - self._end((0, k, l))
        if i == k:
            out = out - self._end((j, 0, l))
        if i == l:
            out = out - self._end((j, k, 0))
        inner = sigma(j, n) * self._end((partner(j, n), 0, k, l))
        m1 = t.integrate(t.integrate(self.B[j] * self.B[partner(k, n)], 0), l)[:, -1]
        inner = inner + sigma(k, n) * m1
        m2 = t.integrate(self._proc((j, k)) * self.B[partner(l, n)], 0)[:, -1]
        inner = inner + sigma(l, n) * m2
        return out - 2 * k1 * k3 * inner

    def phi_vertical(self, J: tuple) -> np.ndarray:
        """Phi^{2n+1}_J for J = (i, j, k, l) or J = (i, 0, j)."""
        n, t, k3, k4 = self.n, self.t, self.kappa3, self.kappa4
        if len(J) == 3 and J[1] == 0 and J[0] and J[2]:
            i, _, j = J
            inner = sigma(i, n) * self._end((partner(i, n), 0, 0, j))
            inner = inner + sigma(j, n) * t.integrate(self._proc((i, 0)) * self.B[partner(j, n)], 0)[:, -1]
            return -k4 * self._end(J) + 2 * k3 * inner
        if len(J) != 4 or 0 in J:
            raise KeyError(f"no formula for Phi^{2 * n + 1}_{J}")
        i, j, k, l = J
        inner = sigma(i, n) * self._end((partner(i, n), 0, j, k, l))
        y = t.integrate(t.integrate(t.integrate(self.B[i] * self.B[partner(j, n)], 0), k), l)
        inner = inner + sigma(j, n) * y[:, -1]
        y = t.integrate(t.integrate(self._proc((i, j)) * self.B[partner(k, n)], 0), l)
        inner = inner + sigma(k, n) * y[:, -1]
        inner = inner + sigma(l, n) * t.integrate(self._proc((i, j, k)) * self.B[partner(l, n)], 0)[:, -1]
        return -k4 * self._end(J) + 2 * k3 * inner

    def _word_path(self, J: tuple, b):
        """B^J on the grid with letter b (or none) replaced by B^{partner} dt; memoised on prefixes."""
        if b is None or b >= len(J):
            return self.t._raw(J)
        key = (J, b)
        memo = self.__dict__.setdefault("_words", {})
        if key not in memo:
            t = self.t
            prev = self._word_path(J[:-1], b) if len(J) > 1 else np.ones((t.paths, t.steps + 1))
            if b == len(J) - 1:
                memo[key] = t.integrate(prev * self.B[partner(J[-1], self.n)], 0)
            else:
                memo[key] = t.integrate(prev, J[-1])
        return memo[key]

    def _word(self, J, b=None):
        """B^J_1, with letter b (if given) replaced by B^{partner} dt."""
        return self._word_path(tuple(J), b)[:, -1]

    def shift_derivative(self, J: tuple) -> np.ndarray:
        """D_hS B^J_1: derivative of B^J along the projected gradient of S."""
        n = self.n
        out = np.zeros(self.t.paths)
        for b, j in enumerate(J):
            if j == 0:
                continue
            s = sigma(j, n)
            zeroed = tuple(0 if pos == b else x for pos, x in enumerate(J))
            out += -2 * s * self._word(J, b) + 2 * s * self.I[partner(j, n)] * self._word(zeroed)
        return out

    def time_derivative(self, i: int, J: tuple) -> np.ndarray:
        """D_{e_i t} B^J_1: every dB^i replaced in turn by dt."""
        out = np.zeros(self.t.paths)
        for b, j in enumerate(J):
            if j == i:
                out += self._word(tuple(0 if pos == b else x for pos, x in enumerate(J)))
        return out

    def phi_derived(self, i: int, J: tuple) -> np.ndarray:
        J = tuple(J)
        BJ = self._word(J)
        D = self.shift_derivative(J)
        if i == 2 * self.n + 1:
            return -self.kappa3 * D - self.kappa4 * BJ
        k1, k2 = self.kappa1[i], self.kappa2[i]
        return (-self.time_derivative(i, J) + k1 * self.kappa3 * D
                + (k1 * self.kappa4 + k2 * self.kappa3) * BJ)

    def phi(self, i: int, J: tuple) -> np.ndarray:
        if self.weights == "derived":
            return self.phi_derived(i, J)
        if i == 2 * self.n + 1:
            return self.phi_vertical(J)
        return self.phi_horizontal(i, J)

    def aggregate(self, coefficients: dict) -> np.ndarray:
        """sum_i sum_J c^i_J Phi^i_J for a coefficient map {i: {J: c}} (1-based i)."""
        out = np.zeros(self.t.paths)
        for i, row in coefficients.items():
            for J, c in row.items():
                if c:
                    out += float(c) * self.phi(i, J)
        return out


def phi_functionals(table: IteratedTable, n: int, coefficients: dict | None = None,
                    kappa4: str = "homogeneous") -> PhiRecord:
    """kappa_1..kappa_4 and every Phi^i_J named in ``coefficients`` (plus their aggregate).

    A single-path table whose kappa_3 denominator vanishes raises
    :class:`DegeneratePathError`; batched tables flag such paths instead.
    """
    if table.n != n:
        raise ValueError("n does not match the table")
    ev = PhiEvaluator(table, kappa4)
    if table.single and ev.degenerate[0]:
        raise DegeneratePathError("kappa_3 denominator vanishes on this path")
    terms, agg = {}, None
    if coefficients is not None:
        for i, row in coefficients.items():
            for J in row:
                terms[(i, J)] = table._out(ev.phi(i, J))
        agg = table._out(ev.aggregate(coefficients))
    sq = {i: sigma(i, n) for i in range(1, 2 * n + 1)}
    return PhiRecord(n, sq, {i: table._out(v) for i, v in ev.kappa1.items()},
                     {i: table._out(v) for i, v in ev.kappa2.items()},
                     table._out(ev.kappa3), table._out(ev.kappa4), terms, agg,
                     table._out(ev.degenerate))


# ---------------------------------------------------------------------------
# moments


def iterated_moments(seed: int, paths: int, steps: int, n: int, max_norm: int,
                     batch: int = 2048) -> tuple[list[tuple], np.ndarray, np.ndarray]:
    """Per-index mean and variance of B^J_1 over ``paths`` paths.

    Batches are reduced in path order with fixed chunking, so the result does
    not depend on the thread count.
    """
    idx = multi_indices_upto(2 * n, max_norm)
    s1 = np.zeros(len(idx))
    s2 = np.zeros(len(idx))
    for start in range(0, paths, batch):
        cnt = min(batch, paths - start)
        tab = IteratedTable(sample_increments(seed, start, cnt, steps, n), max_norm)
        vals = np.stack([tab._raw(J)[:, -1] for J in idx])
        s1 += vals.sum(axis=1)
        s2 += (vals ** 2).sum(axis=1)
    mean = s1 / paths
    var = (s2 - paths * mean ** 2) / max(paths - 1, 1)
    return idx, mean, var
