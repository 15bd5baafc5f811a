"""Limiting anisotropic stochastic heat equation and covariance comparisons.

The limit is the Ornstein-Uhlenbeck field du = 1/2 div(D grad u) dt + div(sqrt(D) xi)
with D = diag(D11, 1); white noise is invariant and each Fourier mode
decorrelates at rate (D11 p1^2 + p2^2)/2.  Nothing here is time-stepped.
"""

from dataclasses import dataclass
import math

import numpy as np

from .stats import bootstrap_ci, gaussianity, mean_se, MIN_KURTOSIS_SAMPLES

D11_CONSTANT = 3 ** (2 / 3) / (2 * math.pi ** (2 / 3))


class ConfigurationError(ValueError):
    pass


def d11(c2: float) -> float:
    if c2 == 0:
        raise ValueError("c2(F) = 0: the superdiffusive limit assumes a nonzero second Hermite coefficient")
    return D11_CONSTANT * abs(c2) ** (4 / 3)


def d_eff(c2: float) -> np.ndarray:
    """diag(3^{2/3} / (2 pi^{2/3}) |c2|^{4/3}, 1)."""
    return np.diag([d11(c2), 1.0])


@dataclass(frozen=True)
class EffectiveModel:
    """OU limit with D = diag(D11, 1); L and N optionally pin the comparison grid."""

    D11: float
    label: str = "effective"
    L: float | None = None
    N: int | None = None

    def __post_init__(self):
        if not self.D11 > 0:
            raise ValueError("D11 must be positive")

    @classmethod
    def from_c2(cls, c2, **kw):
        return cls(d11(c2), label=f"D_eff(c2={c2})", **kw)

    @classmethod
    def linear(cls, nu, **kw):
        """The F = 0 dynamics, whose diffusion matrix is diag(nu, 1)."""
        return cls(nu, label=f"OU(nu={nu})", **kw)

    @property
    def D(self):
        return np.diag([self.D11, 1.0])

    def rate(self, p1, p2):
        return 0.5 * (self.D11 * np.asarray(p1, dtype=float) ** 2 + np.asarray(p2, dtype=float) ** 2)

    def generator_multiplier(self, p1, p2):
        """Fourier multiplier of the generator on linear functionals, -rate."""
        return -self.rate(p1, p2)

    def covariance(self, t, p1, p2, density=1.0):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("t must be >= 0")
        return density * np.exp(-self.rate(p1, p2) * t)


def she_covariance(t, p, model: EffectiveModel):
    """Stationary covariance E[v_t(p) conj v_0(p)] with unit spectral density."""
    return model.covariance(t, p[0], p[1])


def level_one_generator(model: EffectiveModel, grid, values):
    """Generator applied to a level-1 Fock kernel on a fock.FockGrid."""
    return model.generator_multiplier(grid.e1, grid.e2) * np.asarray(values)


@dataclass(frozen=True)
class ComparisonRow:
    mode_a: tuple
    time_a: float
    mode_b: tuple
    time_b: float
    simulated: float
    se: float
    lo: float
    hi: float
    predicted: float

    @property
    def sigma(self):
        if self.se == 0:
            return 0.0 if self.simulated == self.predicted else math.inf
        return (self.simulated - self.predicted) / self.se

    def as_dict(self):
        return {"mode_a": list(self.mode_a), "t_a": self.time_a, "mode_b": list(self.mode_b),
                "t_b": self.time_b, "simulated": self.simulated, "se": self.se, "ci_lo": self.lo,
                "ci_hi": self.hi, "predicted": self.predicted, "sigma": self.sigma}


@dataclass
class ComparisonReport:
    model: EffectiveModel
    rows: list
    kurtosis: dict
    qualitative: bool = True

    @property
    def max_sigma(self):
        return max((abs(r.sigma) for r in self.rows), default=0.0)

    def within(self, n_sigma=3.0):
        return self.max_sigma <= n_sigma

    def as_dict(self):
        return {"model": {"D11": self.model.D11, "label": self.model.label},
                "qualitative": self.qualitative,
                "note": "the true limit needs tau beyond desk scale; compare trends, not values",
                "max_sigma": self.max_sigma, "rows": [r.as_dict() for r in self.rows],
                "kurtosis": self.kurtosis}


def _check_grid(sim, model):
    L, N = sim.meta.get("L"), sim.meta.get("N")
    if model.L is not None and (L is None or not math.isclose(L, model.L)):
        raise ConfigurationError(f"model grid L={model.L} does not match simulation L={L}")
    if model.N is not None and N != model.N:
        raise ConfigurationError(f"model grid N={model.N} does not match simulation N={N}")


def compare_fdd(sim, model: EffectiveModel, modes=None, time_indices=None, resamples=400, seed=0):
    """Cov(u_{t_i}(phi_i), u_{t_j}(phi_j)) from the ensemble against the Gaussian prediction.

    Test functions are the real Fourier modes of sim.modes; the covariance of
    two recorded mode values is E Re[v_a conj v_b], predicted as
    1{p_a = p_b} e^{-rate |t_a - t_b|} Theta_tau(p), Theta_tau(p) being the
    stationary spectral density of the simulated field.
    """
    _check_grid(sim, model)
    dk = 2 * math.pi / sim.meta["L"]
    modes = list(sim.modes) if modes is None else [tuple(m) for m in modes]
    pos = {tuple(m): j for j, m in enumerate(sim.modes)}
    missing = [m for m in modes if m not in pos]
    if missing:
        raise ConfigurationError(f"modes {missing} were not recorded")
    times = range(len(sim.times)) if time_indices is None else list(time_indices)
    rows = []
    # pairs with the initial time give the two-time functions; equal modes only
    # is enough for translation invariant laws, mixed pairs check the zeros
    pairs = [(ja, jb) for ja in modes for jb in modes]
    for ma, mb in pairs:
        a, b = pos[ma], pos[mb]
        for r in times:
            x = np.real(sim.mode_values[:, r, a] * np.conj(sim.mode_values[:, 0, b]))
            est, se = mean_se(x)
            if len(x) >= 8:
                ci = bootstrap_ci(x, resamples=resamples, seed=seed)
                lo, hi = ci.lo, ci.hi
            else:
                lo = hi = math.nan
            t = float(sim.times[r] - sim.times[0])
            if ma == mb:
                pred = float(model.covariance(t, dk * ma[0], dk * ma[1], sim.reference_theta[a]))
            else:
                pred = 0.0
            rows.append(ComparisonRow(ma, float(sim.times[r]), mb, float(sim.times[0]),
                                      float(est), float(se), lo, hi, pred))
    kurt = {}
    if sim.n_samples >= MIN_KURTOSIS_SAMPLES:
        for m in modes:
            x = np.real(sim.mode_values[:, -1, pos[m]])
            kurt[str(list(m))] = gaussianity(x, resamples=resamples, seed=seed).as_dict()
    return ComparisonReport(model, rows, kurt)


def compare_table(table, model: EffectiveModel, L: float):
    """Comparison from a statistics CSV (columns t, n1, n2, C, C_se, theta).

    Only the two-time functions against time 0 are available in that form.
    """
    dk = 2 * math.pi / L
    t0 = float(np.min(table["t"]))
    rows = []
    for t, n1, n2, c, se, th in zip(table["t"], table["n1"], table["n2"], table["C"], table["C_se"],
                                    table["theta"]):
        mode = (int(n1), int(n2))
        pred = float(model.covariance(float(t) - t0, dk * mode[0], dk * mode[1], float(th)))
        rows.append(ComparisonRow(mode, float(t), mode, t0, float(c), float(se), math.nan, math.nan, pred))
    return ComparisonReport(model, rows, {})


def trend(rows):
    """Monotonicity summary of a correlation-rate sweep (simulator.TrendRow list)."""
    ratios = [r.ratio for r in rows]
    increasing = all(b > a for a, b in zip(ratios, ratios[1:]))
    return {"taus": [r.tau for r in rows], "ratios": ratios, "increasing": increasing,
            "qualitative": True}
