"""Strict key = value run configuration.

One ``key = value`` per line; ``#`` starts a comment.  Lists are comma
separated, mode lists are ``n1:n2`` pairs.  Unknown or repeated keys are
errors, and every error names the key.
"""

from dataclasses import dataclass, field, fields
import math
from pathlib import Path

from . import hermite as H
from .spectral import GridSpec


class ConfigError(ValueError):
    pass


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _modes(s):
    out = []
    for item in s.split(","):
        a, b = item.split(":")
        out.append((int(a), int(b)))
    return tuple(out)


def _float_expr(s):
    # allow "2pi", "2pi*4" style lengths
    t = s.strip().lower().replace(" ", "")
    if "pi" in t:
        head, _, tail = t.partition("pi")
        mult = float(head) if head else 1.0
        if tail.startswith("*"):
            mult *= float(tail[1:])
        elif tail:
            raise ValueError(f"cannot parse {s!r}")
        return mult * math.pi
    return float(t)


FAMILIES = ("polynomial", "sqrt_shift", "exp_real", "abs")
COMMANDS = ("hermite", "simulate", "compare-effective", "fock-verify", "ansatz-residual", "sweep")

# key: (parser, default, help)
SCHEMA = {
    "subcommand": (str, "simulate", f"one of {', '.join(COMMANDS)}"),
    "L": (_float_expr, 2 * math.pi * 4, "torus side length; accepts forms like 2pi*4"),
    "N": (int, 32, "grid points per direction"),
    "dt": (float, 0.05, "time step"),
    "K_cut": (float, 2 / 3, "fraction of the Nyquist index kept by the square mask"),
    "tau": (_floats, (100.0,), "comma separated tau values (the first is used by single runs)"),
    "family": (str, "polynomial", f"nonlinearity family: {', '.join(FAMILIES)}"),
    "params": (_floats, (0.0, 0.0, 0.5), "family parameters (polynomial coefficients, shift a, or omega)"),
    "kappa": (float, 0.2, "Gaussian weight exponent, must lie in (0, 1/4)"),
    "coupling": (float, 1.0, "multiplies the nonlinearity; 0 gives the linear dynamics"),
    "ensemble": (int, 16, "ensemble members"),
    "horizon": (float, 1.0, "simulated time"),
    "n_records": (int, 10, "recorded time slices after t = 0"),
    "seed": (int, 0, "master seed; member streams are spawned from it"),
    "padding": (int, 2, "zero-padding factor for the nonlinearity (1, 2 or 3)"),
    "microscopic": (_bool, False, "simulate the tau = 1 regularized equation without rescaling"),
    "modes": (_modes, ((1, 0), (0, 1), (1, 1), (2, 0), (0, 2)), "recorded modes as n1:n2 pairs"),
    "snapshots": (_bool, True, "write the final field of member 0 in the binary layout"),
    "output": (str, "out", "output directory"),
    "m_max": (int, 40, "Hermite table length"),
    "quad": (int, 0, "quadrature nodes for Hermite coefficients (0 = automatic)"),
    "fock_K": (int, 3, "Fock lattice half-width (lattice is (2K+1)^2)"),
    "fock_ell": (_float_expr, 2 * math.pi, "Fock lattice period; spacing is 2 pi / ell"),
    "n_max": (int, 3, "highest chaos level"),
    "K_terms": (int, 2, "terms of the ansatz series"),
    "c": (float, 0.3, "constant of the chaos/frequency cut-off projection"),
    "M": (float, 1.0, "floor multiplier in g_M = max(M nu, g)"),
    "c2": (float, 1.0, "coupling c2 for the Fock generator and the ansatz"),
    "fock_pairs": (int, 20, "random vector pairs in the Fock invariant suite"),
    "sweep_kind": (str, "trend", "sweep content: trend (correlation rates) or ansatz (residuals)"),
    "p0": (float, 20.0, "momentum of the tested mode in trend sweeps (torus side 2 pi / p0)"),
    "cfl": (float, 0.3, "advective CFL number for trend sweeps"),
    "n_corr": (float, 16.0, "trend-sweep horizon in units of the OU correlation time"),
}


@dataclass(frozen=True)
class RunConfig:
    subcommand: str = "simulate"
    L: float = 2 * math.pi * 4
    N: int = 32
    dt: float = 0.05
    K_cut: float = 2 / 3
    tau: tuple = (100.0,)
    family: str = "polynomial"
    params: tuple = (0.0, 0.0, 0.5)
    kappa: float = 0.2
    coupling: float = 1.0
    ensemble: int = 16
    horizon: float = 1.0
    n_records: int = 10
    seed: int = 0
    padding: int = 2
    microscopic: bool = False
    modes: tuple = ((1, 0), (0, 1), (1, 1), (2, 0), (0, 2))
    snapshots: bool = True
    output: str = "out"
    m_max: int = 40
    quad: int = 0
    fock_K: int = 3
    fock_ell: float = 2 * math.pi
    n_max: int = 3
    K_terms: int = 2
    c: float = 0.3
    M: float = 1.0
    c2: float = 1.0
    fock_pairs: int = 20
    sweep_kind: str = "trend"
    p0: float = 20.0
    cfl: float = 0.3
    n_corr: float = 16.0
    explicit: frozenset = field(default=frozenset(), compare=False)

    def grid(self):
        return GridSpec(L=self.L, N=self.N, dt=self.dt, K_cut=self.K_cut)

    def nonlinearity(self):
        if self.family == "polynomial":
            return H.polynomial(self.params, self.kappa)
        if self.family == "sqrt_shift":
            return H.sqrt_shift(*(self.params[:1] or (1.0,)), kappa=self.kappa)
        if self.family == "exp_real":
            return H.exp_real(*(self.params[:1] or (1.0,)), kappa=self.kappa)
        return H.abs_value(self.kappa)

    def resolved(self):
        out = {}
        for f in fields(self):
            if f.name == "explicit":
                continue
            v = getattr(self, f.name)
            out[f.name] = [list(x) for x in v] if f.name == "modes" else (list(v) if isinstance(v, tuple) else v)
        out["defaulted"] = sorted(set(SCHEMA) - set(self.explicit))
        return out


def _validate(cfg: RunConfig):
    def bad(key, msg):
        raise ConfigError(f"{key}: {msg}")

    if cfg.subcommand not in COMMANDS:
        bad("subcommand", f"unknown subcommand {cfg.subcommand!r}")
    if cfg.family not in FAMILIES:
        bad("family", f"unknown family {cfg.family!r}")
    if not 0 < cfg.kappa < 0.25:
        bad("kappa", f"must lie in (0, 1/4), got {cfg.kappa}")
    if cfg.N < 4 or cfg.N % 2:
        bad("N", "must be an even integer >= 4")
    if not cfg.L > 0:
        bad("L", "must be positive")
    if not cfg.dt > 0:
        bad("dt", "must be positive")
    if not 0 < cfg.K_cut <= 1:
        bad("K_cut", "must lie in (0, 1]")
    if not cfg.tau or any(not t >= 1 for t in cfg.tau):
        bad("tau", "needs at least one value, all >= 1")
    if cfg.ensemble < 1:
        bad("ensemble", "must be >= 1")
    if not cfg.horizon > 0:
        bad("horizon", "must be positive")
    if cfg.n_records < 1:
        bad("n_records", "must be >= 1")
    if cfg.padding not in (1, 2, 3):
        bad("padding", "must be 1, 2 or 3")
    if cfg.microscopic and cfg.tau[0] != 1:
        bad("microscopic", "the microscopic equation runs at tau = 1")
    if cfg.m_max < 2:
        bad("m_max", "must be >= 2")
    if cfg.fock_K < 1:
        bad("fock_K", "must be >= 1")
    if not 1 <= cfg.n_max <= 4:
        bad("n_max", "must lie in 1..4")
    if cfg.K_terms < 0:
        bad("K_terms", "must be >= 0")
    if not cfg.c > 0:
        bad("c", "must be positive")
    if not cfg.M > 0:
        bad("M", "must be positive")
    if cfg.sweep_kind not in ("trend", "ansatz"):
        bad("sweep_kind", "must be trend or ansatz")
    if cfg.fock_pairs < 1:
        bad("fock_pairs", "must be >= 1")
    if cfg.family == "polynomial" and not cfg.params:
        bad("params", "polynomial needs coefficients")
    try:
        cfg.nonlinearity()
    except ValueError as exc:
        bad("params", str(exc))


def parse_text(text: str, overrides=None) -> RunConfig:
    values, seen = {}, set()

    def put(key, raw, where):
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown key ({where})")
        if key in seen:
            raise ConfigError(f"{key}: duplicate key ({where})")
        seen.add(key)
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(raw.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{key}: cannot parse {raw.strip()!r} ({exc})") from None

    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = body.split("=", 1)
        put(key.strip(), raw, f"line {lineno}")
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        seen.discard(key)
        put(key, raw, "command line")
    cfg = RunConfig(**values, explicit=frozenset(values))
    _validate(cfg)
    return cfg


def parse_config(path, overrides=None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: no such file {p}")
    return parse_text(p.read_text(), overrides)


def schema_help():
    lines = ["Configuration keys (key = value, one per line):"]
    for key, (_, default, doc) in SCHEMA.items():
        lines.append(f"  {key:<12} {doc} [default: {default!r}]")
    return "\n".join(lines)
