"""Hermite expansions of the nonlinearity F.

Polynomials follow the normalization with leading coefficient 1/m!, i.e.
H_m = He_m / m! where He_m are the probabilists' Hermite polynomials. With
this choice ``sqrt(m!) H_m`` is orthonormal in L^2 of the standard Gaussian
measure pi_1, and the coefficients are

    c_m = m! * E[F(Z) H_m(Z)] = E[F(Z) He_m(Z)],      c_hat_m = c_m / sqrt(m!).
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import special


M_EVAL_MAX = 500
SUP_HALF_WIDTH = 40.0
SUP_POINTS = 100_000


class UnsupportedDerivative(ValueError):
    """Raised when a derivative-based quantity is requested for |x|."""


@dataclass(frozen=True)
class NonlinearitySpec:
    """A member of one of the built-in families of nonlinearities.

    family is one of ``polynomial`` (params = ascending coefficients),
    ``sqrt_shift`` (params = (a,), F = sqrt(a + x^2)), ``exp_real``
    (params = (omega,), F = Re exp(omega x)) or ``abs`` (F = |x|).
    """

    family: str
    params: tuple = ()
    kappa: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.kappa < 0.25:
            raise ValueError(f"kappa must lie in (0, 1/4), got {self.kappa}")
        if self.family == "polynomial":
            if len(self.params) == 0:
                raise ValueError("polynomial family needs at least one coefficient")
        elif self.family == "sqrt_shift":
            if len(self.params) != 1 or not self.params[0] > 0:
                raise ValueError("sqrt_shift needs a single parameter a > 0")
        elif self.family == "exp_real":
            if len(self.params) != 1:
                raise ValueError("exp_real needs a single complex parameter")
        elif self.family == "abs":
            if self.params:
                raise ValueError("abs takes no parameters")
        else:
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def smooth(self):
        return self.family != "abs"

    @property
    def violates_assumption(self):
        # |x| is not smooth, so it is only admitted to coefficient computations
        return self.family == "abs"

    def __call__(self, x):
        return self.derivative(x, 0)

    def derivative(self, x, order=1):
        x = np.asarray(x, dtype=float)
        if self.family == "polynomial":
            coef = np.polynomial.polynomial.polyder(np.asarray(self.params, float), order)
            # Horner, in place
            out = np.full(x.shape, coef[-1])
            for c in coef[-2::-1]:
                out *= x
                out += c
            return out
        if self.family == "sqrt_shift":
            a = float(self.params[0])
            s = np.sqrt(a + x * x)
            if order == 0:
                return s
            if order == 1:
                return x / s
            if order == 2:
                return a / s**3
            if order == 3:
                return -3.0 * a * x / s**5
            raise UnsupportedDerivative("sqrt_shift derivatives implemented up to order 3")
        if self.family == "exp_real":
            w = complex(self.params[0])
            return np.real(w**order * np.exp(w * x))
        # abs
        if order == 0:
            return np.abs(x)
        if order == 1:
            return np.sign(x)
        raise UnsupportedDerivative("|x| has no second derivative as a function")

    def describe(self):
        if self.family == "polynomial":
            return f"polynomial{tuple(float(c) for c in self.params)}"
        if self.family == "exp_real":
            return f"exp_real({complex(self.params[0])})"
        if self.family == "sqrt_shift":
            return f"sqrt_shift({float(self.params[0])})"
        return "abs"


def polynomial(coeffs, kappa=0.2):
    return NonlinearitySpec("polynomial", tuple(float(c) for c in coeffs), kappa)


def sqrt_shift(a=1.0, kappa=0.2):
    return NonlinearitySpec("sqrt_shift", (float(a),), kappa)


def exp_real(omega=1.0, kappa=0.2):
    return NonlinearitySpec("exp_real", (complex(omega),), kappa)


def abs_value(kappa=0.2):
    return NonlinearitySpec("abs", (), kappa)


def quadratic(c2, c1=0.0, kappa=0.2):
    """F(x) = c1 x + c2 x^2 / 2, whose first two coefficients are (c1, c2)."""
    return polynomial([0.0, c1, 0.5 * c2], kappa)


def hermite_eval(m, x):
    """H_m(x) with leading coefficient 1/m!, by (m+1)H_{m+1} = x H_m - H_{m-1}."""
    if not (0 <= m <= M_EVAL_MAX) or int(m) != m:
        raise ValueError(f"m must be an integer in [0, {M_EVAL_MAX}], got {m}")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if m == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = x.copy()
    for k in range(1, m):
        h_prev, h = h, (x * h - h_prev) / (k + 1)
    return h if h.ndim else float(h)


def orthonormal_hermite(m_max, x):
    """Rows h_m(x) = sqrt(m!) H_m(x), m = 0..m_max, orthonormal under pi_1."""
    x = np.asarray(x, dtype=float)
    out = np.empty((m_max + 1,) + x.shape)
    out[0] = 1.0
    if m_max >= 1:
        out[1] = x
    for m in range(1, m_max):
        out[m + 1] = (x * out[m] - math.sqrt(m) * out[m - 1]) / math.sqrt(m + 1)
    return out


def gauss_rule(n):
    """Gauss-Hermite nodes and weights for the standard Gaussian measure."""
    x, w = special.roots_hermitenorm(n)
    w = w / math.sqrt(2.0 * math.pi)
    keep = w > 1e-300
    return x[keep], w[keep]


def abs_rule(n):
    """Nodes and weights with sum w_i g(x_i) = E[|Z| g(Z)] for even polynomials g.

    With y = x^2/2 the half-line integral 2 * int_0^inf |x| g(x) phi(x) dx
    becomes sqrt(2/pi) * int_0^inf g(sqrt(2y)) e^{-y} dy, a Gauss-Laguerre
    integral of a polynomial in y, so the kink of |x| never meets a node.
    n >= deg(g)/2 + 1 nodes make the rule exact; n must stay below ~280
    where the library weights lose finiteness.
    """
    if n > 280:
        raise ValueError("half-line rule limited to 280 nodes")
    y, w = special.roots_laguerre(n)
    keep = w > 1e-300
    return np.sqrt(2.0 * y[keep]), w[keep] * math.sqrt(2.0 / math.pi)


@dataclass
class HermiteTable:
    family: str
    m_max: int
    c: np.ndarray
    c_hat: np.ndarray
    log_abs_c: np.ndarray
    c1: float
    c2: float | None
    quad_nodes: np.ndarray = field(repr=False)
    quad_weights: np.ndarray = field(repr=False)
    l2_norm_sq: float = float("nan")
    flags: tuple = ()


def _signed_from_log(c_hat):
    """c_m = c_hat_m * sqrt(m!), assembled in log-space."""
    m = np.arange(len(c_hat))
    half_lfact = 0.5 * special.gammaln(m + 1.0)
    with np.errstate(divide="ignore"):
        log_abs = np.log(np.abs(c_hat)) + half_lfact
    with np.errstate(over="ignore"):
        c = np.sign(c_hat) * np.exp(log_abs)
    return c, log_abs


def default_nodes(m_max, polynomial=False):
    """2*m_max + 64 nodes, raised to 600 for non-polynomial integrands.

    Polynomials of degree <= m_max are integrated exactly by the former;
    functions with complex singularities (sqrt(a + x^2)) need the latter to
    reach ~1e-14 absolute accuracy on c_hat_m.
    """
    n = 2 * m_max + 64
    return n if polynomial else max(n, 600)


def coefficients_of(fun, m_max, n_quad=None):
    """Normalized coefficients c_hat_m of an arbitrary smooth callable."""
    n_quad = default_nodes(m_max) if n_quad is None else n_quad
    x, w = gauss_rule(n_quad)
    h = orthonormal_hermite(m_max, x)
    return h @ (w * fun(x))


def hermite_coeffs(F, m_max, n_quad=None):
    if n_quad is None:
        n_quad = default_nodes(m_max, F.family == "polynomial")
    if n_quad < 2 * m_max:
        raise ValueError("n_quad must be at least 2*m_max")
    flags = []
    if F.family == "abs":
        # even symmetry: odd coefficients vanish, even ones use the half-line rule
        x, w = abs_rule(m_max // 2 + 32)
        h = orthonormal_hermite(m_max, x)
        c_hat = h @ w
        c_hat[1::2] = 0.0
        c1, c2 = 0.0, None
        l2 = 1.0
        flags.append("violates smoothness assumption")
        flags.append("c2 unavailable")
    else:
        x, w = gauss_rule(n_quad)
        h = orthonormal_hermite(m_max, x)
        fx = F(x)
        c_hat = h @ (w * fx)
        c1 = float(np.dot(w, F.derivative(x, 1)))
        c2 = float(np.dot(w, F.derivative(x, 2)))
        l2 = float(np.dot(w, fx * fx))
    if F.family == "polynomial":
        deg = len(F.params) - 1
        c_hat[deg + 1:] = 0.0
    c, log_abs = _signed_from_log(c_hat)
    return HermiteTable(F.family, m_max, c, c_hat, log_abs, c1, c2, x, w, l2, tuple(flags))


def require_c2(table):
    if table.c2 is None:
        raise UnsupportedDerivative("c2 needs F'' which does not exist for |x|")
    return table.c2


@dataclass
class DecayReport:
    sup_moments: dict
    slope: float
    intercept: float
    r2: float
    n_fit: int
    underflow: bool = False

    def as_dict(self):
        return {
            "sup_moments": {str(k): v for k, v in self.sup_moments.items()},
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "n_fit": self.n_fit,
            "underflow": self.underflow,
        }


def decay_profile(table, m_fit_max=None, m_fit_min=2):
    """Moment sups and a fit of log|c_hat_m| against sqrt(m) over even m."""
    if table.m_max < 40:
        raise ValueError("decay_profile needs m_max >= 40")
    m = np.arange(table.m_max + 1)
    a = np.abs(table.c_hat)
    if np.all(a < 1e-300):
        nan = float("nan")
        return DecayReport({k: 0.0 for k in range(1, 6)}, nan, nan, nan, 0, True)
    tail = m >= 10
    sups = {k: float(np.max(m[tail] ** k * a[tail])) for k in range(1, 6)}
    hi = table.m_max if m_fit_max is None else min(m_fit_max, table.m_max)
    sel = (m % 2 == 0) & (m >= m_fit_min) & (m <= hi) & (a > 1e-300)
    if sel.sum() < 3:
        nan = float("nan")
        return DecayReport(sups, nan, nan, nan, int(sel.sum()), True)
    xs = np.sqrt(m[sel])
    ys = np.log(a[sel])
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = np.sum((ys - ys.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return DecayReport(sups, float(slope), float(intercept), float(r2), int(sel.sum()))


def sup_grid():
    """Uniform grid on [-40, 40] merged with a geometric refinement near 0."""
    half = SUP_POINTS // 4
    uniform = np.linspace(-SUP_HALF_WIDTH, SUP_HALF_WIDTH, SUP_POINTS // 2 + 1)
    geo = np.geomspace(1e-8, SUP_HALF_WIDTH, half)
    return np.unique(np.concatenate([uniform, geo, -geo]))


@dataclass
class PolyApprox:
    sigma: float
    coeffs: np.ndarray
    error: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        h = orthonormal_hermite(len(self.coeffs) - 1, x / self.sigma)
        return np.tensordot(self.coeffs, h, axes=1)


def poly_approx(F, M, kappa, n_quad=None):
    """Projection of F onto sigma-scaled Hermite polynomials of degree <= M.

    sigma^2 = 1/(2 kappa); the error is the grid sup of |F - P_M| e^{-kappa x^2}.
    """
    if not F.smooth:
        raise UnsupportedDerivative("polynomial approximation needs a smooth F")
    if not 0.0 < kappa < 0.25:
        raise ValueError("kappa must lie in (0, 1/4)")
    sigma = math.sqrt(1.0 / (2.0 * kappa))
    n_quad = 2 * M + 128 if n_quad is None else n_quad
    x, w = gauss_rule(n_quad)
    coeffs = orthonormal_hermite(M, x) @ (w * F(sigma * x))
    approx = PolyApprox(sigma, coeffs, float("nan"))
    grid = sup_grid()
    approx.error = float(np.max(np.abs(F(grid) - approx(grid)) * np.exp(-kappa * grid**2)))
    return approx


def exp_norm(F, kappa):
    """Grid approximation of sup (|F| v |F'|) e^{-kappa x^2} over |x| <= 40."""
    grid = sup_grid()
    val = np.maximum(np.abs(F(grid)), np.abs(F.derivative(grid, 1)))
    return float(np.max(val * np.exp(-kappa * grid**2)))
