"""Command-line interface: ``srkmax {tableau,run,diagnose,converge}``.

Exit codes: 0 pass, 1 acceptance-band failure, 2 usage or input error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    DiagnosticError,
    divergence_drift,
    energy_law_residual,
    field_scale,
    holder_probe,
    moment_probe,
    resolvent_bound_probe,
    symplectic_residual,
    tangent_run,
    verdict,
    write_series_csv,
    write_summary_json,
)
from .harness import (
    RunConfig,
    convergence_studies,
    default_config,
    default_workers,
    load_config,
    mc_run,
    write_report,
)
from .integrator import NumericalFailure, StepperConfigError
from .model import ConfigError
from .spatial import Maxwell2DTM, SpectralOperator, write_state_binary
from .tableau import TableauError, analyze, is_symplectic, load_tableau

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3
SEED_ENV = "SRKMAX_SEED"
MAX_PROBE_DIM = 4000


class UsageError(Exception):
    pass


def _metadata() -> dict:
    return {"version": __version__, "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}


def _emit(args, human: str, payload: dict):
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(human)


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# tableau


def cmd_tableau(args) -> int:
    tab = load_tableau(args.name)
    rep = analyze(tab)
    d = rep.to_dict()
    coer = rep.coercivity
    lines = [f"tableau {tab.name} (s={tab.s})", "stability matrix:"]
    lines += ["  " + "  ".join(f"{v: .6g}" for v in row) for row in rep.stability_matrix]
    lines += [
        f"algebraically stable: {str(rep.algebraically_stable).lower()}",
        f"symplectic: {str(rep.symplectic).lower()}",
        f"coercivity: {coer.status}" + (f" (alpha={coer.alpha:.6g}, K={list(coer.K)})" if coer.coercive else ""),
        f"consistent weights: {str(rep.consistent_weights).lower()}",
    ]
    _emit(args, "\n".join(lines), d)
    return EXIT_OK


# ---------------------------------------------------------------------------
# config-driven commands


def _config(args) -> RunConfig:
    if args.config == "default":
        cfg = RunConfig(default_config())
    else:
        cfg = load_config(args.config)
    raw = cfg.raw
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    for section in ("run", "study", "diagnostics"):
        raw.setdefault(section, {})
        if seed is not None:
            raw[section]["seed"] = seed
        if args.replicas is not None:
            raw[section]["replicas"] = args.replicas
    return cfg


def _outdir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _workers(args) -> int:
    return args.workers if args.workers is not None else default_workers()


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    problem = cfg.problem()
    scfg = cfg.stepper_config()
    run = cfg.section("run")
    seed, replicas, thin = int(run.get("seed", 0)), int(run.get("replicas", 1)), int(run.get("thin", 1))
    mc = mc_run(problem, scfg, replicas, seed, workers=_workers(args), thin=thin, keep_states=args.snapshots)
    mean, se = mc.mean_energy(), mc.energy_stderr()
    with open(out / "energy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "mean_energy", "stderr"])
        for row in zip(mc.times, mean, se):
            w.writerow([repr(float(v)) for v in row])
    if args.snapshots:
        write_state_binary(problem.op.state(mc.states[0, -1]), out / "final_state.bin")
    summary = {
        "command": "run",
        "tableau": scfg.tableau.name,
        "tau": scfg.tau,
        "steps": int(round(problem.T / scfg.tau)),
        "replicas": replicas,
        "seed": seed,
        "initial_energy": float(mean[0]),
        "final_mean_energy": float(mean[-1]),
        "final_stderr": None if not np.isfinite(se[-1]) else float(se[-1]),
        "metadata": _metadata(),
    }
    _write_json(out / "summary.json", summary)
    human = (f"{scfg.tableau.name}: {summary['steps']} steps of tau={scfg.tau:g}, {replicas} replica(s)\n"
             f"mean energy {mean[0]:.6g} -> {mean[-1]:.6g}\nwrote {out / 'energy.csv'}")
    _emit(args, human, summary)
    return EXIT_OK


def _energy_check(problem, scfg, mc) -> dict:
    series = energy_law_residual(mc, problem)
    h0 = problem.op.norm_sq(problem.u0)
    hs = 0.0 if problem.noise_free else problem.diffusion.hs_norm_sq(0.0)
    scale = max(h0 + problem.T * hs, 1e-300)
    conservative = problem.noise_free and problem.drift.kind == "zero"
    if conservative and is_symplectic(scfg.tableau):
        return series, verdict("energy_conservation", series.worst / scale, 1e-10)
    if conservative or (problem.noise_free and problem.drift.damping() is not None):
        # algebraically stable schemes may only lose energy here
        return series, verdict("energy_nonincrease", float(np.max(series.values)) / scale, 1e-10)
    se = np.nan_to_num(series.stderr, nan=0.0)
    tol = 3.0 * se + 1e-10 * scale + scfg.tau * scale
    return series, verdict("energy_law", float(np.max(np.abs(series.values) / tol)), 1.0,
                           flags=series.flags)


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    problem = cfg.problem()
    scfg = cfg.stepper_config()
    dg = cfg.section("diagnostics")
    seed, replicas = int(dg.get("seed", 0)), int(dg.get("replicas", 30))
    mc = mc_run(problem, scfg, replicas, seed, workers=_workers(args), keep_states=True)
    results = []
    series, v = _energy_check(problem, scfg, mc)
    write_series_csv(series, out / "energy_law.csv")
    results.append(v)
    op = problem.op
    if isinstance(op, Maxwell2DTM):
        ds = divergence_drift(mc, problem)
        write_series_csv(ds, out / "divergence.csv")
        results.append(verdict("divergence_drift", ds.worst / ds.meta["scale"], 1e-12))
    if isinstance(op, SpectralOperator) and (problem.drift.kind == "zero" or getattr(problem.drift, "hamiltonian", False)):
        steps = int(round(problem.T / scfg.tau))
        frame, _ = tangent_run(problem, scfg, steps, seed)
        res = symplectic_residual(frame, op=op)
        if is_symplectic(scfg.tableau):
            results.append(verdict("symplectic_residual", res, 1e-8))
        else:
            results.append({"name": "symplectic_residual", "verdict": "INFO", "worst_value": res,
                            "tolerance": None})
    if op.dim * scfg.tableau.s <= MAX_PROBE_DIM:
        try:
            probe = resolvent_bound_probe(op, scfg.tableau, [1e-3, 1e-2, 1e-1, 1.0], seed=seed)
            results.append(verdict("resolvent_norm", probe["max_resolvent_norm"], 1.0 + 1e-10))
        except DiagnosticError as exc:
            results.append({"name": "resolvent_norm", "verdict": "SKIP", "reason": str(exc)})
    if replicas >= 30:
        mom = moment_probe(mc, 2.0)
        write_series_csv(mom, out / "moment_p2.csv")
        results.append({"name": "moment_p2", "verdict": "INFO", "worst_value": mom.worst, "tolerance": None})
        results.append({"name": "holder", "verdict": "INFO", "worst_value": holder_probe(mc, op),
                        "tolerance": None})
    write_summary_json(results, out / "summary.json")
    _write_json(out / "metadata.json", _metadata())
    passed = all(r["verdict"] != "FAIL" for r in results)
    human = "\n".join(
        f"{r['verdict']:5s} {r['name']}" + (f"  worst={r['worst_value']:.3e}" if "worst_value" in r else "")
        + (f"  tol={r['tolerance']:.3e}" if r.get("tolerance") is not None else "")
        for r in results
    )
    _emit(args, human, {"command": "diagnose", "pass": passed, "results": results})
    return EXIT_OK if passed else EXIT_FAIL


def cmd_converge(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    problem = cfg.problem()
    st = cfg.section("study")
    tabs = cfg.study_tableaux()
    reports = convergence_studies(
        problem, tabs, st.get("tau_levels", [2.0**-k for k in range(4, 9)]),
        ref_refinement=int(st.get("ref_refinement", 64)), replicas=int(st.get("replicas", 200)),
        seed=int(st.get("seed", 0)), workers=_workers(args), reference=st.get("reference", "midpoint"),
        band=tuple(st.get("slope_band", (0.85, 1.15))),
    )
    summaries = []
    for rep in reports:
        stem = rep.tableau if len(reports) > 1 else "report"
        write_report(rep, out, stem=stem)
        summaries.append(rep.summary())
    passed = all(r.passed for r in reports)
    failed_levels = any(r.failures for r in reports)
    payload = {"command": "converge", "pass": passed, "studies": summaries}
    _write_json(out / "summary.json", {**payload, "metadata": _metadata()})
    lines = []
    for rep in reports:
        lines.append(f"{'PASS' if rep.passed else 'FAIL'} {rep.tableau}: slope {rep.slope:.4f} "
                     f"(band {rep.band[0]}..{rep.band[1]}), max-first slope {rep.slope_maxfirst:.4f}")
        for tau, e, s in zip(rep.taus, rep.errors, rep.stderrs):
            lines.append(f"    tau={tau:<12g} error={e:.6e} +- {s:.1e}")
        for tau, msg in rep.failures.items():
            lines.append(f"    tau={tau:<12g} FAILED: {msg}")
    _emit(args, "\n".join(lines), payload)
    if failed_levels:
        return EXIT_NUMERICAL
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# entry point


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srkmax", description="Stochastic Runge-Kutta Maxwell integrators")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tableau", help="classify a builtin or JSON tableau")
    t.add_argument("name", help="builtin name or path to a JSON tableau")
    t.add_argument("--json", action="store_true", help="machine-readable output")
    t.set_defaults(func=cmd_tableau)

    for name, func, hlp in (
        ("run", cmd_run, "integrate Monte Carlo replicas and write energy statistics"),
        ("diagnose", cmd_diagnose, "run the diagnostics suite"),
        ("converge", cmd_converge, "mean-square convergence study"),
    ):
        c = sub.add_parser(name, help=hlp)
        c.add_argument("--config", required=True, help="JSON config path, or 'default'")
        c.add_argument("--out", default="out", help="output directory (default: ./out)")
        c.add_argument("--seed", type=_seed, default=None, help=f"RNG seed override (env {SEED_ENV})")
        c.add_argument("--replicas", type=_positive_int, default=None)
        c.add_argument("--workers", type=_positive_int, default=None, help="default: available CPUs")
        c.add_argument("--json", action="store_true", help="machine-readable output")
        c.add_argument("-v", "--verbose", action="store_true")
        if name == "run":
            c.add_argument("--snapshots", action="store_true", help="also write the final state of replica 0")
        c.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, TableauError, StepperConfigError, DiagnosticError) as exc:
        print(f"srkmax {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"srkmax {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        print(f"srkmax {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
