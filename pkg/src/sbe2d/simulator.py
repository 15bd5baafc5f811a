"""Pseudospectral exponential-Euler integrator for the mollified Burgers equation.

The rescaled equation is

    du = 1/2 div(R grad u) dt + N_F[u] dt + div(sqrt(R) xi)

with N_F[u] = a_pre d_1 rho_tau^{*2} * F(a_arg u) - c1 a_lin d_1 u.  In the
microscopic mode (tau = 1) the transport subtraction is absent, so that the
equation is the plain regularized one.  Fourier coefficients follow the
normalization of ``spectral``; the stationary law has E|v_p|^2 = Theta_tau(p)
on the kept modes.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np

from .hermite import NonlinearitySpec, hermite_coeffs, quadratic
from .noise import ScaleParams, build_mollifier, member_generators, theta_tau
from .spectral import GridSpec, to_real
from .stats import EnsembleStats, Interval, bootstrap_ci, correlation_time, mean_se

__all__ = ["GridSpec", "BlowUpError", "Integrator", "SimState", "SimConfig", "run_stationary",
           "skew_reversibility_check", "galilean_drift", "weak_form_check",
           "mode_autocorrelation", "correlation_rate_sweep"]

MAX_STIFFNESS = 20.0


class BlowUpError(FloatingPointError):
    def __init__(self, message, diagnostics):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


def phi1(z):
    """(1 - e^{-z}) / z with the removable singularity at 0."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = z > 1e-12
    out[nz] = -np.expm1(-z[nz]) / z[nz]
    return out


@dataclass
class SimState:
    v: np.ndarray
    t: float
    rngs: list
    steps: int = 0


class Integrator:
    """Precomputed multipliers for one (grid, tau, F, coupling) combination."""

    def __init__(self, grid: GridSpec, scale: ScaleParams, mol=None, F: NonlinearitySpec | None = None,
                 coupling: float = 1.0, microscopic: bool = False, padding: int = 2, c1: float | None = None):
        if F is not None and F.violates_assumption:
            raise ValueError("F = |x| is not smooth and is not admitted to the simulator")
        if microscopic and scale.tau != 1:
            raise ValueError("the microscopic equation is the tau = 1 equation")
        if scale.infinite:
            raise ValueError("the simulator needs a finite tau")
        if padding not in (1, 2, 3):
            raise ValueError("padding must be 1, 2 or 3")
        self.grid = grid
        self.scale = scale
        self.mol = mol if mol is not None else build_mollifier()
        self.F = F
        self.coupling = float(coupling)
        self.microscopic = microscopic
        self.padding = padding

        k1, k2 = grid.wavenumbers()
        self.mask = grid.mask()
        shape = self.mask.shape
        self.k1 = np.broadcast_to(k1, shape)
        self.lam = np.broadcast_to(0.5 * scale.rnorm2(k1, k2), shape) * self.mask
        self.theta = theta_tau(k1, k2, scale, self.mol) * self.mask
        dt = grid.dt
        stiff = float(np.max(self.lam) * dt)
        if stiff > MAX_STIFFNESS:
            raise ValueError(f"dt * max lambda = {stiff:.3g} exceeds {MAX_STIFFNESS}")
        self.decay = np.exp(-self.lam * dt) * self.mask
        self.phi1dt = phi1(self.lam * dt) * dt * self.mask
        self.noise_amp = np.sqrt(self.theta * -np.expm1(-2 * self.lam * dt))
        self.cut = min(int(math.floor(grid.K_cut * grid.N / 2)), grid.N // 2 - 1)

        active = F is not None and self.coupling != 0.0
        self.active = active
        if active:
            if c1 is None:
                c1 = hermite_coeffs(F, 8).c1
            self.c1 = float(c1)
            if microscopic:
                a_pre, self.a_arg = 1.0, 1.0
                lin = 0.0
            else:
                a_pre, self.a_arg = scale.a_pre, scale.a_arg
                lin = self.c1 * scale.a_lin
            self.nl_mult = self.coupling * a_pre * 1j * self.k1 * self.theta
            self.lin_mult = -self.coupling * lin * 1j * self.k1 * self.mask if lin else None
        else:
            self.c1 = 0.0 if c1 is None else float(c1)

    # transforms on the (possibly padded) evaluation grid
    def _real_padded(self, v):
        N, L = self.grid.N, self.grid.L
        if self.padding == 1:
            return to_real(v, self.grid)
        Np = self.padding * N
        h = N // 2
        vp = np.zeros(v.shape[:-2] + (Np, Np // 2 + 1), dtype=complex)
        vp[..., :h, :h + 1] = v[..., :h, :]
        vp[..., Np - h:, :h + 1] = v[..., h:, :]
        return np.fft.irfft2(vp, s=(Np, Np), axes=(-2, -1)) * (Np**2 / L)

    def _spectral_truncated(self, y):
        N, L = self.grid.N, self.grid.L
        Np = self.padding * N
        h = N // 2
        full = np.fft.rfft2(y, axes=(-2, -1)) * (L / Np**2)
        if self.padding == 1:
            return full
        out = np.empty(y.shape[:-2] + (N, h + 1), dtype=complex)
        out[..., :h, :] = full[..., :h, :h + 1]
        out[..., h:, :] = full[..., Np - h:, :h + 1]
        return out

    def nonlinearity(self, v):
        """Fourier coefficients of N_F[u] on the kept modes."""
        if not self.active:
            return np.zeros_like(v)
        u = self._real_padded(v)
        out = self.nl_mult * self._spectral_truncated(self.F(self.a_arg * u))
        if self.lin_mult is not None:
            out = out + self.lin_mult * v
        return out

    def white(self, rng, out=None):
        """Hermitian complex Gaussians with E|z|^2 = 1 on the kept block, zero elsewhere."""
        N, c = self.grid.N, self.cut
        z = rng.standard_normal((2 * c + 1, c + 1, 2)).view(np.complex128)[..., 0]
        z *= math.sqrt(0.5)
        # rows ordered n1 = 0..c, -c..-1 ; the n2 = 0 column must be Hermitian in n1
        z[c + 1:, 0] = np.conj(z[c:0:-1, 0])
        z[0, 0] = z[0, 0].real * math.sqrt(2.0)
        if out is None:
            out = np.zeros((N, N // 2 + 1), dtype=complex)
        out[:c + 1, :c + 1] = z[:c + 1]
        out[N - c:, :c + 1] = z[c + 1:]
        return out

    def white_ensemble(self, rngs):
        out = np.zeros((len(rngs), self.grid.N, self.grid.N // 2 + 1), dtype=complex)
        for e, g in enumerate(rngs):
            self.white(g, out[e])
        return out

    def initial_state(self, seed, ensemble):
        """Ensemble started from the (Galerkin-truncated) stationary law eta^tau."""
        rngs = member_generators(seed, ensemble)
        v = self.white_ensemble(rngs) * np.sqrt(self.theta)
        return SimState(v, 0.0, rngs, 0)

    def step(self, state):
        """One exponential-Euler step: exact linear flow and noise, explicit nonlinearity."""
        v = state.v
        new = self.white_ensemble(state.rngs)
        new *= self.noise_amp
        # non-finite values are caught below and reported with diagnostics
        with np.errstate(invalid="ignore", over="ignore"):
            new += self.decay * v
            if self.active:
                new += self.phi1dt * self.nonlinearity(v)
        if not np.all(np.isfinite(new)):
            bad = np.flatnonzero(~np.all(np.isfinite(new.reshape(len(new), -1)), axis=1))
            finite = np.abs(v[np.isfinite(v)])
            raise BlowUpError("non-finite state", {
                "t": state.t, "step": state.steps, "members": bad.tolist(),
                "max_abs_before": float(finite.max()) if finite.size else math.nan})
        return SimState(new, state.t + self.grid.dt, state.rngs, state.steps + 1)

    def advance(self, state, n_steps):
        for _ in range(n_steps):
            state = self.step(state)
        return state

    def real_field(self, v):
        return to_real(v, self.grid)

    def hermitian_defect(self, v):
        """Largest violation of v(-n1, 0) = conj v(n1, 0) on the stored column."""
        col = v[..., :, 0]
        mirrored = np.conj(np.roll(col[..., ::-1], 1, axis=-1))
        return float(np.max(np.abs(col - mirrored)))

    def stationary_variance(self):
        """Pointwise variance of the truncated stationary field, (1/L^2) sum Theta."""
        return float(np.sum(self.grid.weights() * self.theta) / self.grid.L**2)


@dataclass(frozen=True)
class SimConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    tau: float = 1.0
    F: NonlinearitySpec | None = None
    coupling: float = 1.0
    ensemble: int = 16
    horizon: float = 1.0
    n_records: int = 10
    seed: int = 0
    microscopic: bool = False
    padding: int = 2
    modes: tuple = ((1, 0), (0, 1), (1, 1), (2, 0), (0, 2))
    profile: bool = False

    def integrator(self, mol=None, sign=1.0):
        return Integrator(self.grid, ScaleParams(self.tau), mol, self.F, sign * self.coupling,
                          self.microscopic, self.padding)

    def record_every(self):
        return max(1, int(round(self.horizon / (self.n_records * self.grid.dt))))


def _mode_index(grid, modes):
    idx = [grid.index_of(n1, n2) for n1, n2 in modes]
    return tuple(np.array(a) for a in zip(*idx))


def run_stationary(config: SimConfig, mol=None, sign=1.0, on_record=None):
    """Evolve an ensemble from the stationary law and record mode values and marginals.

    on_record(r, state, integrator), if given, is called at every recorded slice.
    """
    integ = config.integrator(mol, sign)
    grid = config.grid
    idx = _mode_index(grid, config.modes)
    state = integ.initial_state(config.seed, config.ensemble)
    every = config.record_every()
    v0 = state.v
    times, vals, onep, prof = [], [], [], []

    def record(st):
        times.append(st.t)
        vals.append(st.v[:, idx[0], idx[1]])
        u = integ.real_field(st.v)
        onep.append(np.mean(u * u, axis=(-2, -1)))
        if config.profile:
            w = st.v[:, :, 0] * np.conj(v0[:, :, 0])
            prof.append(np.fft.ifft(w, axis=-1).real * grid.N / grid.L)
        if on_record is not None:
            on_record(len(times) - 1, st, integ)

    record(state)
    for _ in range(config.n_records):
        state = integ.advance(state, every)
        record(state)
    return EnsembleStats(
        times=np.array(times),
        modes=list(config.modes),
        mode_values=np.stack(vals, axis=1),
        onepoint=np.stack(onep, axis=1),
        reference_theta=integ.theta[idx],
        reference_var=integ.stationary_variance(),
        rates=integ.lam[idx],
        seeds=[config.seed],
        profile=np.stack(prof, axis=1) if config.profile else None,
        meta={"tau": config.tau, "nu": ScaleParams(config.tau).nu, "dt": grid.dt, "L": grid.L,
              "N": grid.N, "coupling": sign * config.coupling,
              "F": None if config.F is None else config.F.describe(),
              "microscopic": config.microscopic, "padding": config.padding,
              "reliable": config.ensemble >= 2},
    )


def _smoother(grid, width, shift=0.0):
    """Multiplier of u -> int u(y) g(y - x - shift e1) dy for a unit-mass Gaussian g."""
    k1, k2 = grid.wavenumbers()
    return np.exp(-0.5 * width**2 * (k1**2 + k2**2) + 1j * k1 * shift)


def hermite2(y, var):
    return y * y - var


@dataclass(frozen=True)
class ReversalReport:
    names: tuple
    forward: np.ndarray
    forward_se: np.ndarray
    reversed: np.ndarray
    reversed_se: np.ndarray
    discrepancy: np.ndarray
    control: np.ndarray
    control_se: np.ndarray
    control_sigma: np.ndarray

    def as_dict(self):
        return {n: {"forward": float(self.forward[i]), "forward_se": float(self.forward_se[i]),
                    "reversed": float(self.reversed[i]), "reversed_se": float(self.reversed_se[i]),
                    "discrepancy_sigma": float(self.discrepancy[i]),
                    "control_difference": float(self.control[i]),
                    "control_sigma": float(self.control_sigma[i])}
                for i, n in enumerate(self.names)}


STATISTICS = ("odd(x,H2)", "odd(H2,x)", "even(x,x)", "even(H2,H2)")


def _pair_statistics(integ, v_a, v_b, width, shift, var):
    """Translation-averaged g(u_a(phi)) h(u_b(psi)) for each statistic, per member."""
    grid = integ.grid
    a = to_real(v_a * _smoother(grid, width, shift), grid)
    b = to_real(v_b * _smoother(grid, width), grid)
    ha, hb = hermite2(a, var), hermite2(b, var)
    ax = (-2, -1)
    return np.stack([np.mean(a * hb, axis=ax), np.mean(ha * b, axis=ax),
                     np.mean(a * b, axis=ax), np.mean(ha * hb, axis=ax)], axis=-1)


def skew_reversibility_check(config: SimConfig, width=1.0, shift=1.0, mol=None):
    """Compare E[g(u_T phi) h(u_0 psi)] under F with E[g(u_0 phi) h(u_T psi)] under -F.

    The control compares the same forward statistic with the reversed pairing
    under +F, which differs at first order in the coupling for the odd
    statistics.
    """
    T_steps = max(1, int(round(config.horizon / config.grid.dt)))
    out = {}
    for sign in (1.0, -1.0):
        integ = config.integrator(mol, sign)
        seed = config.seed if sign > 0 else config.seed + 1_000_003
        st0 = integ.initial_state(seed, config.ensemble)
        stT = integ.advance(st0, T_steps)
        G = _smoother(config.grid, width)
        var = float(np.sum(config.grid.weights() * integ.theta * np.abs(G) ** 2) / config.grid.L**2)
        fwd = _pair_statistics(integ, stT.v, st0.v, width, shift, var)
        rev = _pair_statistics(integ, st0.v, stT.v, width, shift, var)
        out[sign] = (fwd, rev)
    fwd_p, rev_p = out[1.0]
    _, rev_m = out[-1.0]
    f, f_se = mean_se(fwd_p)
    r, r_se = mean_se(rev_m)
    disc = (f - r) / np.hypot(f_se, r_se)
    d, d_se = mean_se(fwd_p - rev_p)
    return ReversalReport(STATISTICS, f, f_se, r, r_se, disc, d, d_se, d / d_se)


@dataclass(frozen=True)
class DriftReport:
    velocity: float
    ci: Interval | None
    phase_velocity: float
    times: np.ndarray
    peaks: np.ndarray
    inconclusive: bool

    def as_dict(self):
        return {"velocity": self.velocity, "ci": None if self.ci is None else self.ci.as_dict(),
                "phase_velocity": self.phase_velocity, "times": self.times.tolist(),
                "peaks": self.peaks.tolist(), "inconclusive": self.inconclusive}


def _peak(profile, dx):
    """Sub-grid location of the maximum of a periodic profile, in (-L/2, L/2]."""
    n = len(profile)
    j = int(np.argmax(profile))
    ym, y0, yp = profile[(j - 1) % n], profile[j], profile[(j + 1) % n]
    den = ym - 2 * y0 + yp
    off = 0.5 * (ym - yp) / den if den < 0 else 0.0
    if abs(off) > 1:
        return math.nan
    x = (j + off) * dx
    L = n * dx
    return x - L if x > L / 2 else x


def _drift_from_profiles(prof, times, dx, lam1):
    """Peak velocity from ensemble profiles (members x times x N).

    Each mean profile is passed through the symmetric matched filter
    e^{-lambda(k1) t} before locating its peak; a symmetric filter leaves the
    peak of a symmetric profile in place while suppressing modes that have
    already decorrelated.
    """
    mean = prof.mean(axis=0)
    filt = np.exp(-np.outer(times, lam1))
    smooth = np.fft.ifft(np.fft.fft(mean, axis=-1) * filt, axis=-1).real
    peaks = np.array([_peak(p, dx) for p in smooth])
    if not np.all(np.isfinite(peaks)):
        return math.nan, peaks
    # unwrap against the torus and fit a line through the origin of time
    L = prof.shape[-1] * dx
    peaks = np.unwrap(peaks * 2 * math.pi / L) * L / (2 * math.pi)
    t = times[1:]
    disp = peaks[1:] - peaks[0]
    vel = -float(np.dot(t, disp) / np.dot(t, t))
    return vel, peaks


def galilean_drift(config: SimConfig, mol=None, resamples=400):
    """Drift speed of the peak of the e1 cross-correlation profile.

    Transport by +c d_1 u moves the correlation peak toward -e1; the returned
    velocity is minus the peak displacement per unit time, so that it
    estimates eps * c1(F).
    """
    if not config.microscopic:
        raise ValueError("the drift harness runs the microscopic (tau = 1) equation")
    stats = run_stationary(replace(config, profile=True, modes=((1, 0),)), mol)
    dx = config.grid.dx
    lam1 = 0.5 * (np.fft.fftfreq(config.grid.N, 1.0 / config.grid.N) * config.grid.dk) ** 2
    vel, peaks = _drift_from_profiles(stats.profile, stats.times, dx, lam1)
    inconclusive = not np.isfinite(vel)
    ci = None
    if not inconclusive and stats.n_samples >= 8:
        members = np.arange(stats.n_samples)

        def stat(ix):
            return _drift_from_profiles(stats.profile[ix], stats.times, dx, lam1)[0]

        ci = bootstrap_ci(members, stat, resamples=resamples, seed=config.seed)
        if not np.isfinite(ci.lo) or not np.isfinite(ci.hi):
            inconclusive = True
    # phase of the lowest e1 mode, an independent route to the same speed
    c = np.mean(stats.mode_values[:, :, 0] * np.conj(stats.mode_values[:, :1, 0]), axis=0)
    k1 = config.grid.dk
    ph = np.unwrap(np.angle(c))
    t = stats.times
    phase_vel = float(np.dot(t, ph) / np.dot(t, t) / k1)
    return DriftReport(vel, ci, phase_vel, stats.times, peaks, inconclusive)


@dataclass(frozen=True)
class WeakFormReport:
    mode: tuple
    mean: complex
    mean_se: float
    variance: float
    variance_se: float
    expected_variance: float

    def as_dict(self):
        return {"mode": list(self.mode), "mean_re": self.mean.real, "mean_im": self.mean.imag,
                "mean_se": self.mean_se, "variance": self.variance, "variance_se": self.variance_se,
                "expected_variance": self.expected_variance}


def weak_form_check(config: SimConfig, mode=(1, 0), mol=None):
    """Residual of the weak formulation tested against a single lattice mode.

    X = v_T - v_0 + int lambda v dt - int N dt should be the accumulated noise
    pairing: mean 0 and E|X|^2 = T |sqrt(R) p|^2 Theta_tau(p).
    """
    integ = config.integrator(mol)
    i, j = config.grid.index_of(*mode)
    n_steps = max(1, int(round(config.horizon / config.grid.dt)))
    st = integ.initial_state(config.seed, config.ensemble)
    v0 = st.v[:, i, j].copy()
    acc = np.zeros(config.ensemble, dtype=complex)
    dt = config.grid.dt
    lam = integ.lam[i, j]
    for _ in range(n_steps):
        nl = integ.nonlinearity(st.v)[:, i, j]
        acc += dt * (lam * st.v[:, i, j] - nl)
        st = integ.step(st)
    X = st.v[:, i, j] - v0 + acc
    m, m_se = mean_se(X)
    a2 = np.abs(X) ** 2
    var, var_se = mean_se(a2)
    T = n_steps * dt
    expected = T * 2 * lam * integ.theta[i, j]
    return WeakFormReport(tuple(mode), complex(m), float(np.abs(m_se)), float(var), float(var_se), float(expected))


def mode_autocorrelation(integ: Integrator, mode, seed, ensemble, horizon, sample_dt, max_lag):
    """Sliding-time-origin autocorrelation of one mode, per member.

    Returns (lags, C) with C[e, l] = mean_t Re v(t + lag_l) conj v(t) along the
    trajectory of member e, started from the stationary law.
    """
    i, j = integ.grid.index_of(*mode)
    every = max(1, int(round(sample_dt / integ.grid.dt)))
    n_samples = int(horizon / (every * integ.grid.dt)) + 1
    n_lag = min(int(max_lag / (every * integ.grid.dt)) + 1, n_samples - 1)
    if n_lag < 2:
        raise ValueError("horizon too short for the requested lags")
    st = integ.initial_state(seed, ensemble)
    xs = [st.v[:, i, j].copy()]
    for _ in range(n_samples - 1):
        st = integ.advance(st, every)
        xs.append(st.v[:, i, j].copy())
    x = np.array(xs).T
    R = x.shape[1]
    C = np.stack([np.mean(np.real(x[:, l:] * np.conj(x[:, :R - l])), axis=1) for l in range(n_lag)], axis=1)
    return np.arange(n_lag) * every * integ.grid.dt, C


def advective_dt(grid: GridSpec, scale: ScaleParams, c2, variance, cfl=0.3):
    """Time step from the advective speed nu^{3/4} |c2| sd(u), capped by the stiffness guard."""
    k1, k2 = grid.wavenumbers()
    lam_max = float(np.max(0.5 * scale.rnorm2(k1, k2) * grid.mask()))
    speed = scale.nu**0.75 * abs(c2) * math.sqrt(variance)
    dt = cfl * grid.dx / speed if speed > 0 else math.inf
    return min(dt, 0.75 * MAX_STIFFNESS / lam_max)


@dataclass(frozen=True)
class TrendRow:
    tau: float
    c2: float
    dt: float
    ou_rate: float
    rate: float
    ci: Interval | None
    inconclusive: bool

    @property
    def ratio(self):
        return self.rate / self.ou_rate

    def as_dict(self):
        ci = None if self.ci is None else {"lo": self.ci.lo / self.ou_rate, "hi": self.ci.hi / self.ou_rate}
        return {"tau": self.tau, "c2": self.c2, "dt": self.dt, "ou_rate": self.ou_rate, "rate": self.rate,
                "ratio": self.ratio, "ratio_ci": ci, "inconclusive": self.inconclusive}


def correlation_rate_sweep(taus, c2, p0=20.0, N=32, ensemble=64, n_corr=16.0, cfl=0.3, seed=11,
                           mode=(1, 0), mol=None, F=None):
    """Fitted decorrelation rate of one e1 mode across tau, relative to its OU rate.

    The torus has side 2 pi / p0 so that the tested mode sits at |p| = p0.  The
    F = 0 baseline is the exact OU rate lambda_p; padding 1 with the 2/3 mask
    dealiases the quadratic nonlinearity exactly.
    """
    F = quadratic(c2) if F is None else F
    mol = mol if mol is not None else build_mollifier()
    rows = []
    for tau in taus:
        scale = ScaleParams(tau)
        probe = Integrator(GridSpec(L=2 * math.pi / p0, N=N, dt=1e-12), scale, mol, None, padding=1)
        dt = advective_dt(probe.grid, scale, c2, probe.stationary_variance(), cfl)
        integ = Integrator(GridSpec(L=2 * math.pi / p0, N=N, dt=dt), scale, mol, F, padding=1)
        lam = float(integ.lam[integ.grid.index_of(*mode)])
        lags, C = mode_autocorrelation(integ, mode, seed, ensemble, n_corr / lam, 0.05 / lam, 3.0 / lam)
        fit = correlation_time(lags, None, samples=C, seed=seed)
        rows.append(TrendRow(float(tau), float(c2), float(dt), lam, fit.rate, fit.ci, fit.inconclusive))
    return rows
