"""Truncated Fock space on a momentum lattice.

Level-n kernels are symmetric functions on Lambda^n stored on sorted index
tuples.  The inner product is

    <f, g> = sum_n n! sum_{p in Lambda^n} prod_i w(p_i) f(p) conj g(p),
    w(p) = Theta_tau(p) dp^2,

so a canonical tuple carries the weight n! * multiplicity * prod w.  Operator
applications expand kernels to dense symmetric tensors, contract with sparse
lattice-summation matrices and read back the canonical entries.
"""

from dataclasses import dataclass, field
from itertools import combinations, combinations_with_replacement, permutations
import math
import warnings

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .noise import ScaleParams, build_mollifier, theta_tau

MAX_LEVEL = 4
MAX_DENSE = 3_000_000


def _runs_product(t):
    """prod of factorials of repeated entries for each sorted row of t."""
    out = np.ones(len(t))
    run = np.ones(len(t))
    for i in range(1, t.shape[1]):
        run = np.where(t[:, i] == t[:, i - 1], run + 1, 1)
        out *= run
    return out


def _ravel(cols, P):
    flat = np.zeros(cols.shape[0], dtype=np.int64)
    for k in range(cols.shape[1]):
        flat = flat * P + cols[:, k]
    return flat


class FockGrid:
    """Lattice Lambda = {(2 pi / ell) k : |k|_inf <= K} with chaos levels 0..n_max."""

    def __init__(self, K=3, n_max=3, tau=10.0, ell=2 * math.pi, mol=None):
        if K < 1:
            raise ValueError("K must be >= 1")
        if not 0 <= n_max <= MAX_LEVEL:
            raise ValueError(f"n_max must lie in 0..{MAX_LEVEL}")
        self.scale = tau if isinstance(tau, ScaleParams) else ScaleParams(float(tau))
        if self.scale.infinite:
            raise ValueError("the lattice needs a finite tau")
        self.K = int(K)
        self.n_max = int(n_max)
        self.ell = float(ell)
        self.mol = mol if mol is not None else build_mollifier()
        self.dp = 2 * math.pi / self.ell
        r = np.arange(-K, K + 1)
        self.coords = np.stack(np.meshgrid(r, r, indexing="ij"), -1).reshape(-1, 2)
        self.points = self.dp * self.coords
        self.P = len(self.coords)
        if self.P ** min(n_max, 3) > MAX_DENSE:
            raise ValueError("lattice too large for dense level tensors")
        self.theta = theta_tau(self.points[:, 0], self.points[:, 1], self.scale, self.mol)
        self.w = self.theta * self.dp**2
        if not np.all(self.w > 0):
            raise ValueError("Xi weights must be strictly positive on the lattice")
        self.e1 = self.points[:, 0].copy()
        self.e2 = self.points[:, 1].copy()
        self.rn2 = self.scale.rnorm2(self.e1, self.e2)

        self.tuples = []
        self.mult = []
        self.tweight = []
        self.norm_weight = []
        for n in range(n_max + 1):
            t = np.array(list(combinations_with_replacement(range(self.P), n)), dtype=np.int64)
            t = t.reshape(len(t), n)
            mult = math.factorial(n) / _runs_product(t)
            tw = np.prod(self.w[t], axis=1)
            self.tuples.append(t)
            self.mult.append(mult)
            self.tweight.append(tw)
            self.norm_weight.append(math.factorial(n) * mult * tw)
        self._cache = {}

    @property
    def tau(self):
        return self.scale.tau

    @property
    def nu(self):
        return self.scale.nu

    def level_size(self, n):
        return len(self.tuples[n])

    @property
    def size(self):
        return sum(self.level_size(n) for n in range(self.n_max + 1))

    def describe(self):
        return {"K": self.K, "n_max": self.n_max, "ell": self.ell, "tau": self.tau,
                "dp": self.dp, "points": self.P}

    def level_sum(self, f, n):
        """sum_i f(p_i) for each canonical tuple of level n."""
        return np.asarray(f)[self.tuples[n]].sum(axis=1)

    # dense <-> canonical

    def canon_index(self, n):
        key = ("canon", n)
        if key not in self._cache:
            t = self.tuples[n]
            idx = np.empty(self.P**n, dtype=np.int64)
            ids = np.arange(len(t))
            for perm in set(permutations(range(n))):
                idx[_ravel(t[:, list(perm)], self.P)] = ids
            self._cache[key] = idx
        return self._cache[key]

    def canonical_flat(self, n):
        key = ("flat", n)
        if key not in self._cache:
            self._cache[key] = _ravel(self.tuples[n], self.P)
        return self._cache[key]

    def to_dense(self, values, n):
        return np.asarray(values)[self.canon_index(n)].reshape((self.P,) * n)

    def from_dense(self, dense, n):
        return np.asarray(dense).reshape(-1)[self.canonical_flat(n)]

    # lattice sums

    def ext_coords(self, R):
        r = np.arange(-R, R + 1)
        return np.stack(np.meshgrid(r, r, indexing="ij"), -1).reshape(-1, 2)

    def ext_index(self, c, R):
        """Index of integer vectors c (..., 2) in the radius-R square, -1 outside."""
        c = np.asarray(c)
        inside = np.all(np.abs(c) <= R, axis=-1)
        idx = (c[..., 0] + R) * (2 * R + 1) + (c[..., 1] + R)
        return np.where(inside, idx, -1)

    def tuple_coord_sum(self, s):
        """Integer coordinates of p_1 + ... + p_s over ordered s-tuples, shape (P^s, 2)."""
        key = ("csum", s)
        if key not in self._cache:
            total = np.zeros((1, 2), dtype=np.int64)
            for _ in range(s):
                total = (total[:, None, :] + self.coords[None, :, :]).reshape(-1, 2)
            self._cache[key] = total
        return self._cache[key]

    def sum_index(self, s, R):
        key = ("sidx", s, R)
        if key not in self._cache:
            self._cache[key] = self.ext_index(self.tuple_coord_sum(s), R)
        return self._cache[key]

    def sum_matrix(self, s, R):
        """Sparse 0/1 matrix mapping ordered s-tuples to the index of their sum."""
        key = ("smat", s, R)
        if key not in self._cache:
            idx = self.sum_index(s, R)
            cols = np.flatnonzero(idx >= 0)
            M = sparse.csr_matrix((np.ones(len(cols)), (idx[cols], cols)),
                                  shape=((2 * R + 1) ** 2, self.P**s))
            self._cache[key] = M
        return self._cache[key]

    def theta_product(self, s):
        key = ("thprod", s)
        if key not in self._cache:
            out = np.ones(1)
            for _ in range(s):
                out = np.multiply.outer(out, self.theta).reshape(-1)
            self._cache[key] = out
        return self._cache[key]

    def weight_product(self, s):
        key = ("wprod", s)
        if key not in self._cache:
            out = np.ones(1)
            for _ in range(s):
                out = np.multiply.outer(out, self.w).reshape(-1)
            self._cache[key] = out
        return self._cache[key]

    def rn2_sum(self, s):
        """|sqrt(R) p_{1:s}|^2 over ordered s-tuples."""
        out = np.zeros(1)
        for _ in range(s):
            out = np.add.outer(out, self.rn2).reshape(-1)
        return out


class ChaosVector:
    """Element of the truncated Fock space; levels[n] lives on grid.tuples[n]."""

    def __init__(self, grid: FockGrid, levels=None, support=None):
        self.grid = grid
        if levels is None:
            levels = [np.zeros(grid.level_size(n), dtype=complex) for n in range(grid.n_max + 1)]
        else:
            levels = [np.asarray(v, dtype=complex) for v in levels]
            if len(levels) != grid.n_max + 1:
                raise ValueError("one array per level 0..n_max is required")
            for n, v in enumerate(levels):
                if v.shape != (grid.level_size(n),):
                    raise ValueError(f"level {n} has shape {v.shape}")
        self.levels = levels
        self.support = dict(support or {})

    @classmethod
    def zeros(cls, grid):
        return cls(grid)

    @classmethod
    def pure(cls, grid, n, values, support=None):
        v = cls(grid)
        v.levels[n] = np.asarray(values, dtype=complex).copy()
        if support is not None:
            v.support[n] = support
        return v

    @classmethod
    def random(cls, grid, levels, rng, radius=None):
        """Independent complex Gaussian kernel values on the chosen levels.

        With a radius, kernels vanish unless every |p_i| <= radius.
        """
        v = cls(grid)
        for n in levels:
            size = grid.level_size(n)
            vals = rng.standard_normal(size) + 1j * rng.standard_normal(size)
            if radius is not None and n > 0:
                ok = np.all(np.hypot(grid.e1, grid.e2)[grid.tuples[n]] <= radius + 1e-12, axis=1)
                vals = vals * ok
                v.support[n] = radius
            v.levels[n] = vals
        return v

    def copy(self):
        return ChaosVector(self.grid, [v.copy() for v in self.levels], self.support)

    def _check(self, other):
        if other.grid is not self.grid:
            raise ValueError("vectors live on different grids")

    def __add__(self, other):
        self._check(other)
        return ChaosVector(self.grid, [a + b for a, b in zip(self.levels, other.levels)])

    def __sub__(self, other):
        self._check(other)
        return ChaosVector(self.grid, [a - b for a, b in zip(self.levels, other.levels)])

    def __mul__(self, c):
        return ChaosVector(self.grid, [c * a for a in self.levels], self.support)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def active_levels(self):
        return [n for n, v in enumerate(self.levels) if np.any(v != 0)]

    def inner(self, other):
        self._check(other)
        return complex(sum(np.sum(w * a * np.conj(b)) for w, a, b in
                           zip(self.grid.norm_weight, self.levels, other.levels)))

    def norm(self):
        return math.sqrt(max(self.inner(self).real, 0.0))

    def weighted_norm(self, kernel):
        """sqrt(sum n! w |v|^2 k) for a nonnegative diagonal kernel k."""
        tot = 0.0
        for n, (wt, a) in enumerate(zip(self.grid.norm_weight, self.levels)):
            tot += float(np.sum(wt * np.abs(a) ** 2 * kernel.values(self.grid, n)))
        return math.sqrt(tot)

    def level(self, n):
        return ChaosVector.pure(self.grid, n, self.levels[n], self.support.get(n))

    def to_iso(self):
        """Flat coordinates in which the Fock inner product is Euclidean."""
        return np.concatenate([np.sqrt(w) * a for w, a in zip(self.grid.norm_weight, self.levels)])

    @classmethod
    def from_iso(cls, grid, x):
        out, start = [], 0
        for w in grid.norm_weight:
            out.append(x[start:start + len(w)] / np.sqrt(w))
            start += len(w)
        return cls(grid, out)


# diagonal operators


@dataclass(frozen=True)
class DiagonalKernel:
    """Per-level scalar multiplier; fn(grid, n) returns values on canonical tuples."""

    name: str
    fn: object = field(repr=False, compare=False)

    def values(self, grid, n):
        return np.broadcast_to(np.asarray(self.fn(grid, n), dtype=float), (grid.level_size(n),))


def apply_diagonal(kernel: DiagonalKernel, v: ChaosVector) -> ChaosVector:
    return ChaosVector(v.grid, [kernel.values(v.grid, n) * a for n, a in enumerate(v.levels)], v.support)


def _minus_S(grid, n):
    # -S kernel = 1/2 |sqrt(R) p_{1:n}|^2
    return 0.5 * grid.level_sum(grid.rn2, n)


S_TAU = DiagonalKernel("S", lambda g, n: -_minus_S(g, n))
NUMBER = DiagonalKernel("N", lambda g, n: np.full(g.level_size(n), float(n)))
H1 = DiagonalKernel("H1", lambda g, n: 1.0 + _minus_S(g, n))
H_MINUS1 = DiagonalKernel("H-1", lambda g, n: 1.0 / (1.0 + _minus_S(g, n)))


def l0_kernel(axis):
    """L0^{e_i}: multiplier -1/2 sum_k (e_i . p_k)^2."""
    if axis not in (1, 2):
        raise ValueError("axis is 1 or 2")
    return DiagonalKernel(f"L0^e{axis}",
                          lambda g, n: -0.5 * g.level_sum((g.e1 if axis == 1 else g.e2) ** 2, n))


L0_E1 = l0_kernel(1)
L0_E2 = l0_kernel(2)


def nu_l0_e1():
    """-nu L0^{e1}, whose square root gives the anisotropic energy norm."""
    return DiagonalKernel("-nu L0^e1", lambda g, n: -g.nu * L0_E1.values(g, n))


def diag_g(x, s: ScaleParams, M: float, c2: float):
    """(g(x), g_M(x), L(x)) for x >= 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("x must be >= 0")
    nu = s.nu
    g = (1.5 * x + nu**1.5) ** (2.0 / 3.0) - nu
    gM = np.maximum(M * nu, g)
    L = c2 * c2 * nu**1.5 / math.pi * np.log1p(s.tau / (1.0 + x))
    return g, gM, L


def g_kernel(c2, M):
    """The diagonal operator -g_M(L(-S)) L0^{e1} >= 0."""

    def fn(grid, n):
        x = _minus_S(grid, n)
        _, _, L = diag_g(x, grid.scale, M, c2)
        _, gM, _ = diag_g(L, grid.scale, M, c2)
        return gM * 0.5 * grid.level_sum(grid.e1**2, n)

    return DiagonalKernel(f"g(M={M})", fn)


def G_kernel(c2, M):
    """G_M = (1 - S + g-term)^{-1}, with values in (0, 1]."""
    gk = g_kernel(c2, M)
    return DiagonalKernel(f"G(M={M})", lambda grid, n: 1.0 / (1.0 + _minus_S(grid, n) + gk.values(grid, n)))


def pi_low(c=0.3):
    """Pi: indicator of n <= -(1/c) log nu and |sqrt(R) p_{1:n}|^2 <= tau exp(-exp(c n))."""
    if not c > 0:
        raise ValueError("c must be positive")

    def fn(grid, n):
        nu = grid.nu
        level_ok = n <= -math.log(nu) / c if nu < 1 else n == 0
        if not level_ok:
            return np.zeros(grid.level_size(n))
        bound = grid.tau * math.exp(-math.exp(c * n))
        return (2 * _minus_S(grid, n) <= bound).astype(float)

    return DiagonalKernel(f"Pi_low(c={c})", fn)


def pi_high(c=0.3):
    low = pi_low(c)
    return DiagonalKernel(f"Pi_high(c={c})", lambda grid, n: 1.0 - low.values(grid, n))


def effective_kernel(d11):
    """D11 L0^{e1} + L0^{e2}."""
    return DiagonalKernel("D11 L0^e1 + L0^e2",
                          lambda g, n: d11 * L0_E1.values(g, n) + L0_E2.values(g, n))


# off-diagonal generator pieces


@dataclass
class Applied:
    """Result of an operator application plus the levels lost to truncation."""

    vector: ChaosVector
    dropped: list = field(default_factory=list)


def coupling_constant(m, s: ScaleParams):
    """tau^{1 - m/2} nu^{(1+m)/4} / (2 pi)^{m-1}."""
    return s.tau ** (1 - m / 2) * s.nu ** ((1 + m) / 4) / (2 * math.pi) ** (m - 1)


def valid_shifts(m):
    return list(range(-(m - 1), m, 2))


def _contraction_index(m, a):
    if m < 1 or a not in valid_shifts(m):
        raise ValueError(f"level shift {a} is not valid for degree {m}")
    return (m - 1 - a) // 2


def _contracted(grid, n, values, j):
    """G(S; rest) = dp^{2j} sum_{r_1+..+r_{j+1} = S} prod Theta(r_i) psi(r, rest).

    Rows index the sum S on the radius (j+1)K square, columns the ordered rest tuple.
    """
    P = grid.P
    rest = n - j - 1
    D = grid.to_dense(values, n).reshape(P ** (j + 1), P**rest)
    Dw = D * grid.theta_product(j + 1)[:, None]
    return (grid.sum_matrix(j + 1, (j + 1) * grid.K) @ Dw) * grid.dp ** (2 * j)


def _gather_sum(grid, G, u, R):
    """H(p_{1:u}; rest) = (e1 . sum p) G(sum p; rest), zero when the sum leaves radius R."""
    idx = grid.sum_index(u, R)
    ok = idx >= 0
    e = grid.dp * grid.tuple_coord_sum(u)[:, 0]
    H = np.zeros((len(idx), G.shape[1]), dtype=complex)
    H[ok] = G[idx[ok]] * e[ok, None]
    return H


def _scatter_subsets(grid, H, u, n_out):
    """sum over position subsets I of size u of H[p_I, p_{I^c}] on canonical tuples."""
    t = grid.tuples[n_out]
    P = grid.P
    out = np.zeros(len(t), dtype=complex)
    for I in combinations(range(n_out), u):
        comp = [k for k in range(n_out) if k not in I]
        out += H[_ravel(t[:, list(I)], P), _ravel(t[:, comp], P)]
    return out


def _apply_level(grid, m, j, n, values):
    n_out = n + m - 2 * j - 1
    u = m - j
    G = _contracted(grid, n, values, j)
    H = _gather_sum(grid, G, u, (j + 1) * grid.K)
    pref = -1j * coupling_constant(m, grid.scale) * math.factorial(n) / (
        math.factorial(n_out) * math.factorial(j + 1))
    return pref * _scatter_subsets(grid, H, u, n_out)


def a1_kernel():
    """Diagonal A^{tau,1}_0 multiplier divided by -i."""
    return DiagonalKernel("A1/(-i)", lambda g, n: g.scale.a_lin * g.level_sum(g.e1 * (g.theta - 1.0), n))


def apply_A(m: int, a: int, v: ChaosVector) -> Applied:
    """A^{tau,m}_a on the truncated space; results above n_max are dropped and listed."""
    j = _contraction_index(m, a)
    grid = v.grid
    out = ChaosVector(grid)
    dropped = []
    if m == 1:
        k = a1_kernel()
        for n, vals in enumerate(v.levels):
            out.levels[n] = -1j * k.values(grid, n) * vals
        return Applied(out, dropped)
    for n in v.active_levels():
        if j + 1 > n:
            continue
        n_out = n + a
        if n_out > grid.n_max:
            dropped.append(n_out)
            continue
        out.levels[n_out] += _apply_level(grid, m, j, n, v.levels[n])
    return Applied(out, dropped)


def apply_A_full(m: int, v: ChaosVector) -> Applied:
    """A^{tau,m} = sum over valid shifts."""
    out = ChaosVector(v.grid)
    dropped = []
    for a in valid_shifts(m):
        r = apply_A(m, a, v)
        out = out + r.vector
        dropped += r.dropped
    return Applied(out, sorted(set(dropped)))


def _chi(grid, rest):
    """1{min(|sqrt R a|, |sqrt R b|) > 2 |sqrt R (a+b, rest)|} on (P^2, P^rest)."""
    idx = grid.sum_index(2, grid.K)
    ok = idx >= 0
    rn_ab = np.where(ok, grid.rn2[np.where(ok, idx, 0)], np.inf)
    pair_min = np.minimum.outer(grid.rn2, grid.rn2).reshape(-1)
    total = rn_ab[:, None] + grid.rn2_sum(rest)[None, :]
    return (pair_min[:, None] > 4 * total) & ok[:, None]


def _sharp_constant(grid, n, pair_factor):
    # A^{tau,2}_{+1} restricted by chi, on level n -> n+1
    return -1j * grid.nu**0.75 / (2 * math.pi) * pair_factor / (n + 1)


def _sharp_up(grid, n, values, pair_factor):
    rest = n - 1
    G = _contracted(grid, n, values, 0)
    H = _gather_sum(grid, G, 2, grid.K) * _chi(grid, rest)
    return _sharp_constant(grid, n, pair_factor) * _scatter_subsets(grid, H, 2, n + 1)


def _sharp_down(grid, n, values, pair_factor):
    """-(A#_{+1})^* from level n+1 to level n, built from the adjoint relation."""
    P = grid.P
    rest = n - 1
    Phi = grid.to_dense(values, n + 1).reshape(P * P, P**rest)
    V = Phi * _chi(grid, rest) * grid.weight_product(2)[:, None]
    X = (grid.sum_matrix(2, grid.K) @ V) * grid.e1[:, None]
    c = np.conj(_sharp_constant(grid, n, pair_factor))
    X *= (n + 1) * math.comb(n + 1, 2) * c / grid.dp**2
    t = grid.tuples[n]
    out = np.zeros(len(t), dtype=complex)
    for i in range(n):
        comp = [k for k in range(n) if k != i]
        out += X[t[:, i], _ravel(t[:, comp], P)]
    return -out / n


def apply_sharp(direction: int, v: ChaosVector, pair_factor=1.0) -> Applied:
    """A#_{+1} (direction +1) or A#_{-1} = -(A#_{+1})^* (direction -1)."""
    if direction not in (1, -1):
        raise ValueError("direction is +1 or -1")
    grid = v.grid
    out = ChaosVector(grid)
    dropped = []
    for n in v.active_levels():
        if direction == 1:
            if n < 1:
                continue
            if n + 1 > grid.n_max:
                dropped.append(n + 1)
                continue
            out.levels[n + 1] += _sharp_up(grid, n, v.levels[n], pair_factor)
        else:
            if n < 2:
                continue
            out.levels[n - 1] += _sharp_down(grid, n - 1, v.levels[n], pair_factor)
    return Applied(out, dropped)


def apply_flat(direction: int, v: ChaosVector, pair_factor=1.0) -> Applied:
    full = apply_A(2, direction, v)
    sh = apply_sharp(direction, v, pair_factor)
    return Applied(full.vector - sh.vector, full.dropped)


def apply_L2(v: ChaosVector, c2: float) -> ChaosVector:
    """L^{tau,2} = S + c2 (A^{tau,2}_{+1} + A^{tau,2}_{-1}) on the truncated space."""
    out = apply_diagonal(S_TAU, v)
    if c2 != 0:
        out = out + c2 * (apply_A(2, 1, v).vector + apply_A(2, -1, v).vector)
    return out


# Hermite-weighted assembly


@dataclass
class Assembly:
    vector: ChaosVector
    degrees: list
    tail: float
    envelope_constant: float
    dropped: list


def assemble_A(table, v: ChaosVector, M_A: int, envelope_constant=None, exclude=()) -> Assembly:
    """sum_{m <= M_A} c_m A^{tau,m} v with an envelope bound on the m > M_A tail.

    The tail is sum_{m > M_A} |c_hat_m| C m^{n/2} ||v_n|| over levels, where C is the
    measured Sigma-bound constant of v's levels over m <= min(M_A, 5) unless given.
    """
    if table.m_max < M_A:
        raise ValueError("Hermite table is shorter than the truncation")
    out = ChaosVector(v.grid)
    used, dropped = [], []
    # quadrature round-off of vanishing coefficients is not a degree
    floor = 1e-13 * np.max(np.abs(table.c_hat[1:M_A + 1]))
    for m in range(1, M_A + 1):
        cm = table.c[m]
        if m in exclude or abs(table.c_hat[m]) <= floor:
            continue
        r = apply_A_full(m, v)
        out = out + cm * r.vector
        used.append(m)
        dropped += r.dropped
    if envelope_constant is None:
        envelope_constant = 0.0
        for n in v.active_levels():
            if n == 0:
                continue
            for m in range(1, min(M_A, 5) + 1):
                envelope_constant = max(envelope_constant,
                                        sigma_ratio(v.grid, m, n, v.levels[n]) / m ** (n / 2))
    tail = 0.0
    for n in v.active_levels():
        nv = v.level(n).norm()
        for m in range(M_A + 1, table.m_max + 1):
            tail += abs(table.c_hat[m]) * envelope_constant * m ** (n / 2) * nv
    return Assembly(out, used, tail, envelope_constant, sorted(set(dropped)))


def assemble_A_neq2(table, v, M_A, envelope_constant=None):
    """A^tau - c2 A^{tau,2}, truncated at degree M_A."""
    return assemble_A(table, v, M_A, envelope_constant, exclude=(2,))


# untruncated norms of A^{tau,m} psi


def _mu(grid, s):
    """s-fold lattice convolution of the weights w, on the radius sK square."""
    K = grid.K
    side = 2 * K + 1
    wsq = grid.w.reshape(side, side)
    cur = np.ones((1, 1))
    for _ in range(s):
        r = cur.shape[0]
        nxt = np.zeros((r + side - 1, r + side - 1))
        for a in range(side):
            for b in range(side):
                nxt[a:a + r, b:b + r] += wsq[a, b] * cur
        cur = nxt
    return cur.reshape(-1)


def a_norm_sq(grid: FockGrid, m: int, n: int, values) -> list:
    """||A^{tau,m}_a psi||^2 for psi on level n, per contraction index j, untruncated.

    The squared norm of sum_I H(p_I; p_{I^c}) is expanded over ordered subset pairs
    (I, J); the summand depends only on t = |J \\ I|.  With A = I n J, B = I \\ J,
    C = J \\ I, D the remainder, the A-slots enter through the convolution power
    mu_{u-t} of the weights and the B, C slots through their sums beta, gamma:

        T_t = sum_S mu(S) sum_{beta,gamma,D} w_D e(S+beta) e(S+gamma)
              V(S+beta; gamma, D) conj V(S+gamma; beta, D),

    V being G with its first t rest slots contracted to their sum.
    """
    if m == 1:
        k = a1_kernel().values(grid, n)
        return [float(np.sum(grid.norm_weight[n] * np.abs(k * values) ** 2))]
    P, K = grid.P, grid.K
    out = []
    for j in range(min(n, m)):
        u = m - j
        r = n - j - 1
        n_out = u + r
        RG = (j + 1) * K
        G = _contracted(grid, n, values, j)
        pref2 = (coupling_constant(m, grid.scale) * math.factorial(n) /
                 (math.factorial(n_out) * math.factorial(j + 1))) ** 2
        total = 0.0
        for t in range(min(u, r) + 1):
            count = math.comb(n_out, u) * math.comb(u, t) * math.comb(r, t)
            Gr = G.reshape(G.shape[0], P**t, P ** (r - t))
            if t == 0:
                V = Gr
            else:
                Mt = grid.sum_matrix(t, t * K).multiply(grid.weight_product(t)[None, :]).tocsr()
                flat = Gr.transpose(1, 0, 2).reshape(P**t, -1)
                V = (Mt @ flat).reshape(Mt.shape[0], G.shape[0], -1).transpose(1, 0, 2)
            wD = grid.weight_product(r - t)
            RS = min((u - t) * K, RG + t * K)
            side = 2 * (u - t) * K + 1
            cut = (u - t) * K - RS
            mu = _mu(grid, u - t).reshape(side, side)[cut:side - cut, cut:side - cut].reshape(-1)
            Sc = grid.ext_coords(RS)
            Bc = grid.ext_coords(t * K)
            T = 0.0
            for s_i in np.flatnonzero(mu):
                S = Sc[s_i]
                idx = grid.ext_index(S[None, :] + Bc, RG)
                ok = idx >= 0
                if not ok.any():
                    continue
                e = grid.dp * (S[0] + Bc[:, 0])
                A = np.zeros((len(Bc), V.shape[1], V.shape[2]), dtype=complex)
                A[ok] = V[idx[ok]] * e[ok, None, None]
                T += mu[s_i] * float(np.real(np.einsum("bgd,gbd,d->", A, np.conj(A), wD)))
            total += count * T
        out.append(pref2 * math.factorial(n_out) * total)
    return out


def sigma_ratio(grid: FockGrid, m: int, n: int, values) -> float:
    """||sqrt(m!) A^{tau,m} psi|| / ||psi|| for psi on level n, untruncated."""
    psi = ChaosVector.pure(grid, n, values)
    return math.sqrt(math.factorial(m) * sum(a_norm_sq(grid, m, n, values))) / psi.norm()


# norms


def norms(v: ChaosVector) -> dict:
    return {"L2": v.norm(), "H1": v.weighted_norm(H1), "H-1": v.weighted_norm(H_MINUS1),
            "energy_e1": v.weighted_norm(nu_l0_e1())}


# resolvent


class SolverError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


@dataclass
class SolveResult:
    x: ChaosVector
    residual: float
    iterations: int
    history: list


def _minus_S_iso(grid):
    return np.concatenate([_minus_S(grid, n) for n in range(grid.n_max + 1)])


def resolvent_solve(rhs: ChaosVector, c2: float, tol=1e-10, maxiter=400, restart=80) -> SolveResult:
    """Solve (1 - L^{tau,2}) x = rhs by GMRES, right-preconditioned with (1 - S)^{-1}."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    grid = rhs.grid
    d = 1.0 / (1.0 + _minus_S_iso(grid))

    def apply(x_iso):
        x = ChaosVector.from_iso(grid, x_iso)
        return (x - apply_L2(x, c2)).to_iso()

    op = spla.LinearOperator((grid.size, grid.size), matvec=lambda y: apply(d * y), dtype=complex)
    b = rhs.to_iso()
    bn = np.linalg.norm(b)
    if bn == 0:
        return SolveResult(ChaosVector(grid), 0.0, 0, [])
    history = []
    y, _ = spla.gmres(op, b, rtol=0.5 * tol, atol=0.0, restart=restart, maxiter=maxiter,
                      callback=history.append, callback_type="pr_norm")
    x_iso = d * y
    res = float(np.linalg.norm(b - apply(x_iso)) / bn)
    if res > tol:
        raise SolverError(f"GMRES stopped at relative residual {res:.3g} > {tol:.3g}", history)
    return SolveResult(ChaosVector.from_iso(grid, x_iso), res, len(history), history)


def dense_generator_matrix(grid: FockGrid, c2: float) -> np.ndarray:
    """1 - L^{tau,2} in iso coordinates, one basis vector at a time (small grids only)."""
    size = grid.size
    if size > 4000:
        raise ValueError("dense assembly is meant for small lattices")
    A = np.empty((size, size), dtype=complex)
    for k in range(size):
        e = np.zeros(size, dtype=complex)
        e[k] = 1.0
        x = ChaosVector.from_iso(grid, e)
        A[:, k] = (x - apply_L2(x, c2)).to_iso()
    return A


# ansatz


@dataclass
class Ansatz:
    tilde: ChaosVector
    amended: ChaosVector
    level: int
    K_terms: int
    M: float
    c: float
    truncated: bool

    @property
    def levels(self):
        """Chaos levels the construction writes to; deep terms can vanish on a small lattice."""
        return list(range(self.level, self.level + self.K_terms + 1))

    def describe(self):
        return {"level": self.level, "K_terms": self.K_terms, "M": self.M, "c": self.c,
                "truncated": self.truncated}


def build_ansatz(phi: ChaosVector, c2: float, K_terms: int, M=1.0, c=0.3, pair_factor=1.0) -> Ansatz:
    """s~ = sum_{k <= K_terms} c2^k (G_M A#_{+1})^k G_M phi and s = Pi_low s~."""
    levels = phi.active_levels()
    if len(levels) != 1:
        raise ValueError("phi must live on a single chaos level")
    n0 = levels[0]
    grid = phi.grid
    truncated = False
    if K_terms > grid.n_max - n0:
        warnings.warn(f"K_terms={K_terms} exceeds n_max - n0; truncated to {grid.n_max - n0}")
        K_terms = grid.n_max - n0
        truncated = True
    G = G_kernel(c2, M)
    term = apply_diagonal(G, phi)
    total = term.copy()
    for k in range(1, K_terms + 1):
        term = apply_diagonal(G, apply_sharp(1, term, pair_factor).vector)
        total = total + (c2**k) * term
    amended = apply_diagonal(pi_low(c), total)
    return Ansatz(total, amended, n0, K_terms, M, c, truncated)


@dataclass
class ResidualReport:
    """||(1 - L^{tau,2}) s - phi||_{H^{-1}} / ||phi|| with the share of the g-term.

    g_term is ||g G_M phi||_{H^{-1}} / ||phi||, the level-n0 piece that only the
    chaos sum over momenta up to sqrt(tau) can cancel.
    """

    tau: float
    residual: float
    g_term: float
    remainder: float
    ansatz: Ansatz = field(repr=False)

    def as_dict(self):
        return {"tau": self.tau, "residual": self.residual, "g_term": self.g_term,
                "remainder": self.remainder, **self.ansatz.describe()}


def ansatz_residual(phi: ChaosVector, c2: float, K_terms: int, M=1.0, c=0.3, amended=False,
                    pair_factor=1.0) -> ResidualReport:
    ans = build_ansatz(phi, c2, K_terms, M, c, pair_factor)
    s = ans.amended if amended else ans.tilde
    r = s - apply_L2(s, c2) - phi
    pn = phi.norm()
    gterm = apply_diagonal(g_kernel(c2, M), apply_diagonal(G_kernel(c2, M), phi))
    return ResidualReport(phi.grid.tau, r.weighted_norm(H_MINUS1) / pn,
                          gterm.weighted_norm(H_MINUS1) / pn,
                          (r + gterm).weighted_norm(H_MINUS1) / pn, ans)


# Wiener-Ito products


def _negate_index(grid):
    # the lattice is symmetric and ordered, so -p sits at the mirrored index
    return grid.P - 1 - np.arange(grid.P)


def _symmetrize_read(grid, dense, n):
    """Canonical entries of the symmetrization of a dense level-n tensor."""
    t = grid.tuples[n]
    perms = list(permutations(range(n)))
    flat = dense.reshape(-1)
    out = np.zeros(len(t), dtype=complex)
    for perm in perms:
        out += flat[_ravel(t[:, list(perm)], grid.P)]
    return out / len(perms)


def contraction(grid, f, n1, g, n2, k):
    """(f (x)_k g)(p, q) = sum_r prod w(r) f(p, r) g(q, -r) as a dense tensor."""
    P = grid.P
    F = grid.to_dense(f, n1).reshape(P ** (n1 - k), P**k)
    Gd = grid.to_dense(g, n2)
    if k:
        neg = _negate_index(grid)
        Gd = Gd[(slice(None),) * (n2 - k) + np.ix_(*([neg] * k))]
    Gd = Gd.reshape(P ** (n2 - k), P**k)
    return (F * grid.weight_product(k)[None, :]) @ Gd.T


def wick_product(grid: FockGrid, f, n1, g, n2) -> Applied:
    """Chaos expansion of I_{n1}(f) I_{n2}(g) by the contraction formula."""
    out = ChaosVector(grid)
    dropped = []
    for k in range(min(n1, n2) + 1):
        n = n1 + n2 - 2 * k
        if n > grid.n_max:
            dropped.append(n)
            continue
        coef = math.factorial(k) * math.comb(n1, k) * math.comb(n2, k)
        out.levels[n] += coef * _symmetrize_read(grid, contraction(grid, f, n1, g, n2, k), n)
    return Applied(out, dropped)


def _cross_matchings(groups):
    """Perfect matchings of the labelled slots with no pair inside one group."""
    slots = list(range(len(groups)))

    def rec(free):
        if not free:
            yield []
            return
        a = free[0]
        for b in free[1:]:
            if groups[a] != groups[b]:
                rest = [s for s in free if s not in (a, b)]
                for m in rec(rest):
                    yield [(a, b)] + m

    return list(rec(slots))


def isserlis_moment(grid: FockGrid, kernels) -> complex:
    """E[prod_i I_{n_i}(f_i)] by summing Gaussian pairings across different factors.

    kernels is a list of (values, n).  Modes Z(p) satisfy E[Z(p) Z(q)] = 1{p+q=0}/w(p),
    and pairings inside one Wick product are excluded.
    """
    groups, dense = [], []
    for i, (vals, n) in enumerate(kernels):
        groups += [i] * n
        dense.append(grid.to_dense(vals, n))
    neg = _negate_index(grid)
    total = 0.0 + 0.0j
    for matching in _cross_matchings(groups):
        n_pairs = len(matching)
        shape = (grid.P,) * n_pairs
        grids = np.indices(shape).reshape(n_pairs, -1) if n_pairs else np.zeros((0, 1), dtype=int)
        slot_idx = [None] * len(groups)
        for q, (a, b) in enumerate(matching):
            slot_idx[a] = grids[q]
            slot_idx[b] = neg[grids[q]]
        weight = np.ones(grids.shape[1])
        for q in range(n_pairs):
            weight *= grid.w[grids[q]]
        pos = 0
        for i, (vals, n) in enumerate(kernels):
            idx = tuple(slot_idx[pos:pos + n])
            weight = weight * (dense[i][idx] if n else dense[i])
            pos += n
        total += weight.sum()
    return complex(total)


def reflect_conj(grid, values, n):
    """Kernel of conj(I_n(h)), namely conj h(-p)."""
    neg = _negate_index(grid)
    t = grid.tuples[n]
    D = grid.to_dense(values, n)
    if n == 0:
        return np.conj(np.asarray(values, dtype=complex)).reshape(1)
    return np.conj(D[tuple(neg[t[:, i]] for i in range(n))])


# support-sensitive estimate


def support_envelope(n, m, chi):
    """n^3 m^3 + chi 4^n m^n."""
    return n**3 * m**3 + chi * 4.0**n * m**n


def support_measurements(phi: ChaosVector, n: int, degrees, chi) -> list:
    """(m, ||sqrt(m!) A^{tau,m} Phi||_{H^{-1}}, envelope) for degrees whose output fits."""
    grid = phi.grid
    rows = []
    for m in degrees:
        if n + m - 1 > grid.n_max:
            continue
        out = apply_A_full(m, phi).vector
        val = math.sqrt(math.factorial(m)) * out.weighted_norm(H_MINUS1)
        rows.append((m, val, support_envelope(n, m, chi)))
    return rows
