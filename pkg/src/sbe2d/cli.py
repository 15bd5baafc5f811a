"""Command line entry point: sbe2d <subcommand> [--config FILE] [--set key=value ...].

Every run writes manifest.json with the resolved configuration and the code
version.  Exit status is 0 when every check in scope passes, 1 when a check
fails or a run breaks, and 2 for configuration errors.
"""

import argparse
import csv
import io
import json
import math
from pathlib import Path
import sys

import numpy as np
import scipy

from . import __version__
from . import checks
from . import effective as E
from . import fock as Fk
from . import hermite as H
from .config import COMMANDS, ConfigError, parse_config, parse_text, schema_help
from .noise import build_mollifier, write_field
from .plotting import Series, write_plot
from .simulator import BlowUpError, SimConfig, correlation_rate_sweep, run_stationary
from .stats import read_stats_csv, write_stats_csv


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, complex):
        return {"re": x.real, "im": x.imag}
    if isinstance(x, (tuple, set, frozenset)):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)
    Path(path).write_text(text + "\n")


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue())


def versions():
    return {"sbe2d": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(out, command, cfg, outputs, checks_=None, status="ok", extra=None):
    doc = {"command": command, "version": versions(), "config": cfg.resolved(),
           "outputs": sorted(str(p) for p in outputs), "status": status}
    if checks_ is not None:
        doc["checks"] = checks_
    if extra:
        doc.update(extra)
    write_json(Path(out) / "manifest.json", doc)


def _out_dir(cfg):
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scaled_nonlinearity(cfg):
    """F scaled by the coupling, for routines that take F alone."""
    F = cfg.nonlinearity()
    if cfg.coupling == 1.0:
        return F
    if cfg.family != "polynomial":
        raise ConfigError("coupling: only polynomial families can be rescaled for this subcommand")
    return H.polynomial([cfg.coupling * a for a in cfg.params], cfg.kappa)


# subcommands


def run_hermite(cfg):
    out = _out_dir(cfg)
    F = cfg.nonlinearity()
    table = H.hermite_coeffs(F, cfg.m_max, cfg.quad or None)
    write_csv(out / "hermite.csv", ["m", "c_m", "c_hat_m"],
              [(m, table.c[m], table.c_hat[m]) for m in range(cfg.m_max + 1)])
    report = {"family": F.describe(), "kappa": cfg.kappa, "c1": table.c1, "c2": table.c2,
              "flags": list(table.flags)}
    if cfg.m_max >= 40:
        report["decay"] = H.decay_profile(table).as_dict()
    else:
        report["decay"] = {"skipped": "decay fit needs m_max >= 40"}
    suite = {"finite": {"pass": bool(np.all(np.isfinite(table.c_hat)))}}
    if F.smooth:
        m_top = min(20, cfg.m_max - 1)
        deriv = H.coefficients_of(lambda x: F.derivative(x, 1), m_top)
        m = np.arange(m_top + 1)
        expected = np.sqrt(m + 1.0) * table.c_hat[1:m_top + 2]
        gap = np.abs(deriv - expected)
        ok = bool(np.all(gap <= 1e-7 * np.abs(expected) + 1e-12))
        suite["derivative_identity"] = {"m_max": int(m_top), "max_abs_gap": float(gap.max()), "pass": ok}
    report["checks"] = suite
    write_json(out / "decay.json", report)
    passed = all(c["pass"] for c in suite.values())
    write_manifest(out, "hermite", cfg, ["hermite.csv", "decay.json"], suite, "pass" if passed else "fail")
    return 0 if passed else 1


def _sim_config(cfg):
    F = None if cfg.coupling == 0 else cfg.nonlinearity()
    if F is not None and F.family == "polynomial" and not any(cfg.params[1:]):
        F = None  # constant F has no effect
    return SimConfig(grid=cfg.grid(), tau=cfg.tau[0], F=F, coupling=cfg.coupling if F else 1.0,
                     ensemble=cfg.ensemble, horizon=cfg.horizon, n_records=cfg.n_records, seed=cfg.seed,
                     microscopic=cfg.microscopic, padding=cfg.padding, modes=tuple(cfg.modes))


def run_simulate(cfg, mol=None):
    out = _out_dir(cfg)
    sc = _sim_config(cfg)
    mol = mol if mol is not None else build_mollifier()
    outputs, defects = [], []

    def on_record(r, st, integ):
        defects.append(integ.hermitian_defect(st.v))
        if cfg.snapshots:
            name = f"snapshot_{r:04d}.bin"
            write_field(out / name, integ.real_field(st.v[0]), sc.grid.L, sc.tau, cfg.seed, mol.radius)
            outputs.append(name)

    try:
        stats = run_stationary(sc, mol, on_record=on_record)
    except BlowUpError as exc:
        write_manifest(out, "simulate", cfg, outputs, {"blow_up": {"pass": False, **exc.diagnostics}},
                       "failed", {"error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_stats_csv(out / "stats.csv", stats)
    c, se = stats.correlation()
    series = []
    for j, mode in enumerate(stats.modes):
        yerr = None if not stats.reliable else se[:, j]
        series.append(Series(stats.times, c[:, j], yerr, label=f"p = {mode}"))
    write_plot(out / "correlation.svg", series, title="C(t, p)", xlabel="t", ylabel="E Re v_t conj v_0")
    outputs += ["stats.csv", "correlation.svg"]
    suite = {
        "finite": {"pass": bool(np.all(np.isfinite(stats.mode_values)))},
        "real_field": {"max_hermitian_defect": max(defects), "pass": max(defects) <= 1e-10},
    }
    passed = all(v["pass"] for v in suite.values())
    write_manifest(out, "simulate", cfg, outputs, suite, "pass" if passed else "fail",
                   {"meta": stats.meta, "reliable": stats.reliable})
    return 0 if passed else 1


def run_compare(cfg, stats_path, model_kind="auto"):
    stats_path = Path(stats_path)
    if not stats_path.is_file():
        raise ConfigError(f"stats: no such file {stats_path}")
    sim_manifest = stats_path.parent / "manifest.json"
    if not sim_manifest.is_file():
        raise ConfigError(f"stats: expected the simulate manifest next to {stats_path}")
    sim = json.loads(sim_manifest.read_text())
    meta = sim.get("meta", {})
    table = read_stats_csv(stats_path)
    linear = meta.get("F") is None
    if model_kind == "linear" or (model_kind == "auto" and linear):
        model = E.EffectiveModel.linear(meta["nu"])
    else:
        if linear:
            raise ConfigError("model: the simulation has F = 0, so no effective coefficient exists")
        simcfg = sim["config"]
        text = "\n".join(f"{k} = {_format_value(k, v)}" for k, v in simcfg.items()
                         if k in ("family", "params", "kappa"))
        c2 = H.hermite_coeffs(parse_text(text).nonlinearity(), 8).c2 * meta["coupling"]
        try:
            model = E.EffectiveModel.from_c2(c2)
        except ValueError as exc:
            raise E.ConfigurationError(str(exc)) from None
    rep = E.compare_table(table, model, meta["L"])
    rep.qualitative = not (model_kind != "effective" and linear)
    out = _out_dir(cfg)
    doc = rep.as_dict()
    if not rep.qualitative:
        doc["note"] = "F = 0: the OU law is exact, so discrepancies are Monte Carlo noise"
    write_json(out / "comparison.json", doc)
    series = []
    modes = sorted({r.mode_a for r in rep.rows})
    for mode in modes:
        rows = [r for r in rep.rows if r.mode_a == mode]
        t = [r.time_a for r in rows]
        series.append(Series(t, [r.simulated for r in rows], [r.se for r in rows], label=f"sim {mode}"))
        series.append(Series(t, [r.predicted for r in rows], None, label=f"model {mode}", style="--"))
    write_plot(out / "comparison.svg", series, title=model.label, xlabel="t", ylabel="C(t, p)")
    suite = {}
    if not rep.qualitative:
        suite["within_3_sigma"] = {"max_sigma": rep.max_sigma, "pass": rep.within(3.0)}
    passed = all(v["pass"] for v in suite.values())
    write_manifest(out, "compare-effective", cfg, ["comparison.json", "comparison.svg"], suite,
                   "pass" if passed else "fail", {"stats": str(stats_path)})
    return 0 if passed else 1


def _format_value(key, v):
    if key == "modes":
        return ", ".join(f"{a}:{b}" for a, b in v)
    if isinstance(v, list):
        return ", ".join(repr(x) for x in v)
    return str(v)


def run_fock_verify(cfg, mol=None):
    out = _out_dir(cfg)
    res = checks.fock_suite(cfg.fock_K, cfg.n_max, cfg.tau[0], cfg.c2, cfg.fock_pairs, cfg.seed,
                            cfg.fock_ell, mol)
    write_json(out / "fock_verify.json", res)
    suite = {k: {"pass": v["pass"]} for k, v in res.items() if isinstance(v, dict) and "pass" in v}
    write_manifest(out, "fock-verify", cfg, ["fock_verify.json"], suite, "pass" if res["pass"] else "fail")
    return 0 if res["pass"] else 1


def _residual_rows(cfg, taus, mol):
    reps = checks.residual_sweep(taus, cfg.c2, cfg.fock_K, cfg.n_max, cfg.K_terms, cfg.M, cfg.c,
                                 seed=cfg.seed, ell=cfg.fock_ell, mol=mol)
    return [(r.tau, r.residual, r.g_term, r.remainder) for r in reps]


RESIDUAL_HEADER = ["tau", "residual", "g_term", "remainder"]


def _residual_plot(path, rows):
    t = [r[0] for r in rows]
    write_plot(path, [Series(t, [r[1] for r in rows], label="residual"),
                      Series(t, [r[2] for r in rows], label="g term", style="s--")],
               title="ansatz residual", xlabel="tau", ylabel="relative H^-1 residual", logx=True, logy=True)


def run_ansatz_residual(cfg, mol=None):
    out = _out_dir(cfg)
    rows = _residual_rows(cfg, cfg.tau, mol)
    write_csv(out / "residual.csv", RESIDUAL_HEADER, rows)
    _residual_plot(out / "residual.svg", rows)
    dec = checks.strictly_decreasing([r[1] for r in rows])
    suite = {"strictly_decreasing": {"residuals": [r[1] for r in rows], "pass": dec}}
    write_manifest(out, "ansatz-residual", cfg, ["residual.csv", "residual.svg"], suite,
                   "pass" if dec else "fail")
    return 0 if dec else 1


TREND_HEADER = ["tau", "dt", "ou_rate", "rate", "ratio", "ratio_lo", "ratio_hi", "inconclusive"]


def _trend_row(cfg, tau, mol):
    F = _scaled_nonlinearity(cfg)
    c2 = H.hermite_coeffs(F, 8).c2
    row = correlation_rate_sweep([tau], c2, p0=cfg.p0, N=cfg.N, ensemble=cfg.ensemble, n_corr=cfg.n_corr,
                                 cfl=cfg.cfl, seed=cfg.seed, mol=mol, F=F)[0]
    lo = hi = math.nan
    if row.ci is not None:
        lo, hi = row.ci.lo / row.ou_rate, row.ci.hi / row.ou_rate
    return (row.tau, row.dt, row.ou_rate, row.rate, row.ratio, lo, hi, int(row.inconclusive))


def run_sweep(cfg, mol=None):
    out = _out_dir(cfg)
    mol = mol if mol is not None else build_mollifier()
    rows, failures = [], []
    for tau in cfg.tau:
        sub = out / f"tau_{tau:g}"
        sub.mkdir(exist_ok=True)
        try:
            if cfg.sweep_kind == "trend":
                row = _trend_row(cfg, tau, mol)
                header = TREND_HEADER
            else:
                row = _residual_rows(cfg, [tau], mol)[0]
                header = RESIDUAL_HEADER
        except (BlowUpError, Fk.SolverError, FloatingPointError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            failures.append({"tau": tau, "error": str(exc)})
            write_manifest(sub, "sweep", cfg, [], {"run": {"pass": False}}, "failed",
                           {"tau": tau, "error": str(exc)})
            continue
        write_csv(sub / "row.csv", header, [row])
        write_manifest(sub, "sweep", cfg, ["row.csv"], {"run": {"pass": True}}, "ok", {"tau": tau})
        rows.append(row)

    header = TREND_HEADER if cfg.sweep_kind == "trend" else RESIDUAL_HEADER
    write_csv(out / "aggregate.csv", header, rows)
    summary = {"kind": cfg.sweep_kind, "partial": bool(failures), "failures": failures,
               "rows": [dict(zip(header, r)) for r in rows], "config": cfg.resolved(), "version": versions()}
    passed = not failures
    if rows and cfg.sweep_kind == "trend":
        ratios = [r[4] for r in rows]
        summary["increasing"] = all(b > a for a, b in zip(ratios, ratios[1:]))
        summary["note"] = "qualitative trend; no numeric tolerance is claimed"
        errs = np.array([[r[4] - r[5] for r in rows], [r[6] - r[4] for r in rows]])
        write_plot(out / "aggregate.svg", [Series([r[0] for r in rows], ratios, np.nan_to_num(errs),
                                                  label="fitted / OU rate")],
                   title="correlation rate", xlabel="tau", ylabel="rate ratio", logx=True)
    elif rows:
        summary["strictly_decreasing"] = checks.strictly_decreasing([r[1] for r in rows])
        passed = passed and summary["strictly_decreasing"]
        _residual_plot(out / "aggregate.svg", rows)
    write_json(out / "aggregate.json", summary)
    return 0 if passed else 1


# argument handling


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    keys = schema_help()
    p = argparse.ArgumentParser(prog="sbe2d", description=__doc__, epilog=keys, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"sbe2d {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "hermite": "Hermite coefficient table (CSV) and decay report (JSON)",
        "simulate": "stationary ensemble run: snapshots, statistics CSV and correlation SVG",
        "compare-effective": "compare a statistics CSV with the OU or effective-diffusion law",
        "fock-verify": "Fock-space invariant suite as JSON pass/fail with measured constants",
        "ansatz-residual": "ansatz residual over the tau list: CSV and SVG",
        "sweep": "per-tau runs plus an aggregate trend table (CSV, JSON, SVG)",
    }
    for name in COMMANDS:
        s = sub.add_parser(name, help=helps[name], description=helps[name], epilog=keys, formatter_class=fmt)
        s.add_argument("--config", help="key = value configuration file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        s.add_argument("--output", help="output directory (same as the output key)")
        if name == "hermite":
            s.add_argument("--family", help="polynomial, sqrt_shift, exp_real or abs")
            s.add_argument("--param", action="append", type=float, help="family parameter (repeatable)")
            s.add_argument("--kappa", type=float, help="Gaussian weight exponent in (0, 1/4)")
            s.add_argument("--m-max", type=int, help="largest Hermite index")
            s.add_argument("--quad", type=int, help="quadrature nodes")
        if name == "compare-effective":
            s.add_argument("--stats", required=True, help="stats.csv written by simulate")
            s.add_argument("--model", choices=["auto", "linear", "effective"], default="auto")
    return p


def _overrides(args):
    items = list(args.set)
    if args.output:
        items.append(f"output={args.output}")
    if args.command == "hermite":
        if args.family:
            items.append(f"family={args.family}")
        if args.param:
            items.append("params=" + ",".join(repr(x) for x in args.param))
        if args.kappa is not None:
            items.append(f"kappa={args.kappa!r}")
        if args.m_max is not None:
            items.append(f"m_max={args.m_max}")
        if args.quad is not None:
            items.append(f"quad={args.quad}")
    items.append(f"subcommand={args.command}")
    return items


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        over = _overrides(args)
        cfg = parse_config(args.config, over) if args.config else parse_text("", over)
        if args.command == "hermite":
            return run_hermite(cfg)
        if args.command == "simulate":
            return run_simulate(cfg)
        if args.command == "compare-effective":
            return run_compare(cfg, args.stats, args.model)
        if args.command == "fock-verify":
            return run_fock_verify(cfg)
        if args.command == "ansatz-residual":
            return run_ansatz_residual(cfg)
        return run_sweep(cfg)
    except (ConfigError, E.ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
