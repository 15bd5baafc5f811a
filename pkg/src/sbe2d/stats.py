"""Ensemble estimators: bootstrap intervals, correlation-time fits, Gaussianity."""

from dataclasses import dataclass, field
import math

import numpy as np


MIN_BOOTSTRAP_SAMPLES = 8
MIN_RESAMPLES = 200
MIN_KURTOSIS_SAMPLES = 64


@dataclass(frozen=True)
class Interval:
    estimate: float
    lo: float
    hi: float

    @property
    def width(self):
        return self.hi - self.lo

    def covers(self, value):
        return self.lo <= value <= self.hi

    def as_dict(self):
        return {"estimate": self.estimate, "lo": self.lo, "hi": self.hi}


def mean_se(samples, axis=0):
    """Sample mean and its standard error along axis."""
    x = np.asarray(samples)
    n = x.shape[axis]
    mean = x.mean(axis=axis)
    if n < 2:
        return mean, np.full(np.shape(mean), np.nan)
    return mean, x.std(axis=axis, ddof=1) / math.sqrt(n)


def bootstrap_ci(samples, statistic=np.mean, resamples=1000, seed=0, level=0.95):
    """Percentile bootstrap interval for statistic over the first axis of samples."""
    x = np.asarray(samples)
    n = x.shape[0]
    if n < MIN_BOOTSTRAP_SAMPLES:
        raise ValueError(f"bootstrap needs at least {MIN_BOOTSTRAP_SAMPLES} samples, got {n}")
    if resamples < MIN_RESAMPLES:
        raise ValueError(f"use at least {MIN_RESAMPLES} resamples")
    rng = np.random.default_rng(seed)
    est = float(statistic(x))
    reps = np.empty(resamples)
    for r in range(resamples):
        reps[r] = statistic(x[rng.integers(0, n, n)])
    alpha = (1 - level) / 2
    lo, hi = np.quantile(reps, [alpha, 1 - alpha])
    return Interval(est, float(min(lo, est)), float(max(hi, est)))


@dataclass(frozen=True)
class RateFit:
    rate: float
    ci: Interval | None
    window: int
    inconclusive: bool

    def as_dict(self):
        return {"rate": self.rate, "ci": None if self.ci is None else self.ci.as_dict(),
                "window": self.window, "inconclusive": self.inconclusive}


def _fit_rate(t, c, threshold):
    if not c[0] > 0:
        raise ValueError("C(0) must be positive")
    keep = np.flatnonzero(c <= threshold * c[0])
    stop = keep[0] if len(keep) else len(c)
    stop = max(stop, 2)
    tt, cc = t[:stop], c[:stop]
    if np.any(cc <= 0):
        return math.nan, stop
    # least squares for log C = log C0 - rate * t
    A = np.vstack([np.ones_like(tt), -tt]).T
    coef, *_ = np.linalg.lstsq(A, np.log(cc), rcond=None)
    return float(coef[1]), stop


def correlation_time(times, C, samples=None, threshold=0.2, resamples=400, seed=0):
    """Exponential-rate fit of C(t) over the window where C > threshold * C(0).

    If samples (members x times) are given, C is their mean and a bootstrap
    interval over members is attached.
    """
    t = np.asarray(times, dtype=float)
    if samples is not None:
        samples = np.asarray(samples, dtype=float)
        c = samples.mean(axis=0)
    else:
        c = np.asarray(C, dtype=float)
    rate, stop = _fit_rate(t, c, threshold)
    inconclusive = not np.isfinite(rate)
    ci = None
    if samples is not None:
        _, se = mean_se(samples)
        # an increase larger than 3 standard errors inside the window is not noise
        rises = np.diff(c[:stop]) > 3 * np.hypot(se[1:stop], se[:stop - 1])
        inconclusive = inconclusive or bool(np.any(rises))
        if samples.shape[0] >= MIN_BOOTSTRAP_SAMPLES and np.isfinite(rate):
            stop_fixed = stop

            def stat(x):
                cc = x.mean(axis=0)[:stop_fixed]
                if np.any(cc <= 0):
                    return np.nan
                A = np.vstack([np.ones(stop_fixed), -t[:stop_fixed]]).T
                return np.linalg.lstsq(A, np.log(cc), rcond=None)[0][1]

            rng = np.random.default_rng(seed)
            n = samples.shape[0]
            reps = np.array([stat(samples[rng.integers(0, n, n)]) for _ in range(resamples)])
            reps = reps[np.isfinite(reps)]
            if len(reps) >= resamples // 2:
                lo, hi = np.quantile(reps, [0.025, 0.975])
                ci = Interval(rate, float(min(lo, rate)), float(max(hi, rate)))
            else:
                inconclusive = True
    return RateFit(rate, ci, stop, inconclusive)


def excess_kurtosis(x):
    x = np.asarray(x, dtype=float)
    d = x - x.mean(axis=0)
    m2 = np.mean(d * d, axis=0)
    return np.mean(d**4, axis=0) / m2**2 - 3.0


def gaussianity(samples, resamples=1000, seed=0):
    """Excess kurtosis of the samples with a percentile bootstrap interval."""
    x = np.asarray(samples, dtype=float)
    if x.shape[0] < MIN_KURTOSIS_SAMPLES:
        raise ValueError(f"gaussianity needs at least {MIN_KURTOSIS_SAMPLES} samples")
    return bootstrap_ci(x, excess_kurtosis, resamples=resamples, seed=seed)


@dataclass
class EnsembleStats:
    """Recorded ensemble data of a stationary run.

    mode_values[e, r, j] is the normalized Fourier coefficient of member e at
    times[r] for modes[j]; onepoint[e, r] is the spatial mean of u^2;
    profile[e, r, :] is the translation-averaged cross-correlation
    (1/L^2) int u_t(x + y e1 + z e2) u_0(x) dx integrated over z, as a function
    of y on the grid.
    """

    times: np.ndarray
    modes: list
    mode_values: np.ndarray
    onepoint: np.ndarray
    reference_theta: np.ndarray
    reference_var: float
    rates: np.ndarray
    seeds: list = field(default_factory=list)
    profile: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.mode_values.shape[0]

    @property
    def reliable(self):
        return self.n_samples >= 2

    def mode_variance(self):
        return mean_se(np.abs(self.mode_values) ** 2)

    def mode_mean(self):
        return mean_se(self.mode_values)

    def correlation(self):
        """C(t, p) = E Re[v_t(p) conj v_0(p)] with standard errors, shape (times, modes)."""
        prod = np.real(self.mode_values * np.conj(self.mode_values[:, :1, :]))
        return mean_se(prod)

    def correlation_samples(self, j):
        return np.real(self.mode_values[:, :, j] * np.conj(self.mode_values[:, 0, j]))

    def onepoint_variance(self):
        return mean_se(self.onepoint)

    def halves(self):
        """Two disjoint halves of the ensemble, for the SE-scaling check."""
        h = self.n_samples // 2
        sl = [slice(0, h), slice(h, 2 * h)]
        return [EnsembleStats(self.times, self.modes, self.mode_values[s], self.onepoint[s],
                              self.reference_theta, self.reference_var, self.rates,
                              self.seeds[s] if self.seeds else [],
                              None if self.profile is None else self.profile[s], dict(self.meta))
                for s in sl]

    def rows(self):
        """Flat rows (time, n1, n2, C, C_se, var, var_se, theta, rate) for CSV output."""
        c, c_se = self.correlation()
        v, v_se = self.mode_variance()
        out = []
        for r, t in enumerate(self.times):
            for j, (n1, n2) in enumerate(self.modes):
                out.append((float(t), int(n1), int(n2), float(c[r, j]), float(c_se[r, j]),
                            float(v[r, j]), float(v_se[r, j]), float(self.reference_theta[j]),
                            float(self.rates[j])))
        return out


CSV_COLUMNS = ("t", "n1", "n2", "C", "C_se", "var", "var_se", "theta", "rate")


def write_stats_csv(path, stats):
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in stats.rows():
            fh.write(",".join(repr(x) if isinstance(x, float) else str(x) for x in row) + "\n")


def read_stats_csv(path):
    """Rows of a statistics CSV as a dict of column arrays."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    return {name: np.asarray(data[name]) for name in data.dtype.names}
