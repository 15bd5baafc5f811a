"""Mollifier, the multiplier Theta_tau, chaos weights and noise sampling."""

from dataclasses import dataclass, field
from functools import lru_cache
import io
import math
import struct

import numpy as np
from scipy import integrate, interpolate, optimize, special

from .spectral import spectral_white, to_real


@dataclass(frozen=True)
class ScaleParams:
    """tau together with nu_tau = 1/(1 v (log tau)^{2/3}) and R_tau = diag(nu, 1)."""

    tau: float

    def __post_init__(self):
        if not self.tau >= 1:
            raise ValueError("tau must be >= 1")

    @property
    def infinite(self):
        return math.isinf(self.tau)

    @property
    def nu(self):
        if self.infinite:
            return 0.0
        return 1.0 / max(1.0, math.log(self.tau) ** (2.0 / 3.0))

    @property
    def R(self):
        return np.diag([self.nu, 1.0])

    @property
    def a_pre(self):
        return self.tau * self.nu**0.25

    @property
    def a_arg(self):
        return self.tau**-0.5 * self.nu**0.25

    @property
    def a_lin(self):
        return self.tau**0.5 * self.nu**0.5

    def rnorm2(self, p1, p2):
        """|sqrt(R) p|^2."""
        return self.nu * p1 * p1 + p2 * p2


def _bump(s, k=1.0):
    inside = np.abs(s) < 1.0
    out = np.zeros_like(np.asarray(s, dtype=float))
    ss = np.asarray(s, dtype=float)[inside]
    out[inside] = np.exp(-k / (1.0 - ss * ss))
    return out


def _radial_integral(k):
    # int_{|y|<1} exp(-k / (1 - |y|^2)) dy
    val, _ = integrate.quad(lambda r: 2 * math.pi * r * math.exp(-k / (1 - r * r)), 0.0, 1.0,
                            epsabs=1e-15, epsrel=1e-13)
    return val


K_TABLE_MAX_SCALED = 300.0
TABLE_POINTS = 30001
RADIAL_NODES = 1200


@dataclass(frozen=True)
class Mollifier:
    """rho(x) = (c/a^2) exp(-1/(1 - |x/a|^2)) on |x| < a, mass 1 and unit L^2 norm."""

    radius: float
    amplitude: float
    k_table: np.ndarray = field(repr=False, compare=False)
    g_table: np.ndarray = field(repr=False, compare=False)
    _spline: object = field(repr=False, compare=False)

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        return self.amplitude / self.radius**2 * _bump(r / self.radius)

    def __call__(self, x1, x2):
        return self.profile(np.hypot(x1, x2))

    def transform(self, k):
        """2 pi rho_hat(k) = int rho(x) e^{-i k.x} dx, a real even function of |k|."""
        k = np.abs(np.asarray(k, dtype=float))
        out = np.zeros_like(k)
        inside = k <= self.k_table[-1]
        out[inside] = self._spline(k[inside])
        return out

    def transform_direct(self, k):
        """Quadrature evaluation of the transform, independent of the table."""
        r, w = special.roots_legendre(RADIAL_NODES)
        r = (r + 1) * self.radius / 2
        w = w * self.radius / 2
        k = np.atleast_1d(np.asarray(k, dtype=float))
        vals = 2 * math.pi * (special.j0(np.outer(k, r)) @ (w * r * self.profile(r)))
        return vals

    def theta(self, k):
        return self.transform(k) ** 2

    def header(self):
        return {"mollifier": "bump", "radius": self.radius, "amplitude": self.amplitude}


def build_mollifier(target_radius_hint=1.0):
    """Bump mollifier with mass 1 whose radius is tuned to give unit L^2 norm."""
    if not target_radius_hint > 0:
        raise ValueError("radius hint must be positive")
    mass_int = _radial_integral(1.0)
    amp = 1.0 / mass_int
    sq_int = _radial_integral(2.0)

    def l2_minus_one(a):
        # ||rho_a||^2 = amp^2 / a^2 * int exp(-2/(1-|y|^2)) dy
        return amp**2 * sq_int / a**2 - 1.0

    lo, hi = target_radius_hint, target_radius_hint
    for _ in range(200):
        if l2_minus_one(lo) > 0:
            break
        lo /= 2
    for _ in range(200):
        if l2_minus_one(hi) < 0:
            break
        hi *= 2
    try:
        a = optimize.brentq(l2_minus_one, lo, hi, xtol=1e-15, rtol=1e-15)
    except ValueError as exc:
        raise RuntimeError("mollifier radius root-find failed") from exc

    return _tabulated(round(a, 13), amp)


@lru_cache(maxsize=4)
def _tabulated(a, amp):
    k_max = K_TABLE_MAX_SCALED / a
    k_table = np.linspace(0.0, k_max, TABLE_POINTS)
    shell = Mollifier(a, amp, k_table, k_table, None)
    g_table = np.concatenate([shell.transform_direct(chunk) for chunk in np.array_split(k_table, 30)])
    spline = interpolate.CubicSpline(k_table, g_table, bc_type=((1, 0.0), "not-a-knot"))
    return Mollifier(a, amp, k_table, g_table, spline)


def scaled_argument(p1, p2, s):
    """|tau^{-1/2} R^{1/2} p|."""
    return np.sqrt(s.rnorm2(p1, p2) / s.tau)


def transform_tau(p1, p2, s, mol):
    """2 pi rho_hat_tau(p) = (2 pi rho_hat)(tau^{-1/2} R^{1/2} p)."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if s.infinite:
        return np.ones(np.broadcast(p1, p2).shape)
    return mol.transform(scaled_argument(p1, p2, s))


def theta_tau(p1, p2, s, mol):
    """Theta_tau(p) = (2 pi rho_hat(tau^{-1/2} R^{1/2} p))^2; identically 1 at tau = inf."""
    return transform_tau(p1, p2, s, mol) ** 2


def xi_weights(points, n, s, mol, spacing):
    """Per-point factor Theta_tau(p) (dp)^2 whose n-fold product weighs a tuple.

    points has shape (P, 2); returns (w, tuple_weight) where tuple_weight maps
    an index array of shape (..., n) to the product of the factors.
    """
    if n < 1:
        raise ValueError("chaos weights need n >= 1")
    w = theta_tau(points[:, 0], points[:, 1], s, mol) * spacing**2

    def tuple_weight(idx):
        idx = np.asarray(idx)
        return np.prod(w[idx], axis=-1)

    return w, tuple_weight


def spectral_noise(grid, s, mol, rng, mask=None):
    """Normalized coefficients of one sample of rho_tau * eta on the torus."""
    k1, k2 = grid.wavenumbers()
    g = transform_tau(k1, k2, s, mol)
    v = g * spectral_white(rng, grid)
    if mask is not None:
        v = v * mask
    return v


def member_generators(seed, count):
    """Independent generators for ensemble members, derived from one seed."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


def sample_mollified_noise(grid, s, mol, seed, count=None, mask=None):
    """Real samples of the mollified white noise; shape (N, N) or (count, N, N)."""
    if count is None:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        return to_real(spectral_noise(grid, s, mol, rng, mask), grid)
    gens = member_generators(seed, count)
    v = np.stack([spectral_noise(grid, s, mol, g, mask) for g in gens])
    return to_real(v, grid)


def periodize(field_values, copies=1):
    """Periodic extension of a field on one cell [-M, M]^2 to copies x copies cells.

    The shifted restrictions sum to the tiled field; on a torus simulation the
    operation with copies = 1 is the identity.
    """
    if copies < 1:
        raise ValueError("copies must be >= 1")
    return np.tile(np.asarray(field_values), (copies, copies))


def fold(field_values, cells):
    """Sum of the shifted restrictions of a field on cells x cells blocks onto one cell."""
    f = np.asarray(field_values)
    n = f.shape[0] // cells
    if f.shape[0] != n * cells or f.shape[1] != n * cells:
        raise ValueError("field shape must be a multiple of the cell count")
    return f.reshape(cells, n, cells, n).sum(axis=(0, 2))


HEADER = struct.Struct("<4sIdIddqd")
MAGIC = b"SBEF"


def write_field(path, values, L, tau, seed, mol_radius):
    """Little-endian float64 row-major field after a fixed header.

    Header: magic, version, L, N, tau, nu, seed, mollifier radius.
    """
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError("field must be square")
    n = values.shape[0]
    nu = ScaleParams(tau).nu
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, 1, float(L), n, float(tau), nu, int(seed), float(mol_radius)))
        fh.write(values.tobytes(order="C"))


def read_field(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, L, n, tau, nu, seed, radius = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError("not a field file")
    values = np.frombuffer(raw, dtype="<f8", offset=HEADER.size).reshape(n, n).copy()
    meta = {"version": version, "L": L, "N": n, "tau": tau, "nu": nu, "seed": seed, "radius": radius}
    return values, meta


def field_to_csv(values, L, tau, seed, mol_radius):
    values = np.asarray(values)
    if values.shape[0] > 128:
        raise ValueError("CSV export is meant for grids up to 128 x 128")
    buf = io.StringIO()
    buf.write(f"# L={L!r} N={values.shape[0]} tau={tau!r} seed={seed} radius={mol_radius!r}\n")
    np.savetxt(buf, values, delimiter=",", fmt="%.17g")
    return buf.getvalue()
