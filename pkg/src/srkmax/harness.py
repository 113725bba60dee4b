"""Monte Carlo driver, strong-coupling convergence studies and report files.

Replicas are processed in fixed-size blocks (``BLOCK`` columns advanced
together).  Block boundaries depend only on the replica count, never on the
number of workers, and every block's noise comes from the per-replica
streams, so results are bitwise identical for any ``workers`` value.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .integrator import (
    NumericalFailure,
    Stepper,
    StepperConfig,
    StepperConfigError,
    integrate_increments,
)
from .model import ConfigError, Problem, problem_from_config
from .noise import sample_increments
from .spatial import SpectralOperator
from .tableau import ButcherTableau, builtin, consistency_check, load_tableau

__all__ = [
    "BLOCK",
    "MCResult",
    "ConvergenceReport",
    "RunConfig",
    "mc_run",
    "convergence_study",
    "convergence_studies",
    "fit_slope",
    "write_report",
    "read_report_csv",
    "load_config",
    "save_config",
    "default_config",
]

BLOCK = 25


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def _blocks(replicas: int, block: int) -> list[tuple[int, int]]:
    return [(a, min(a + block, replicas)) for a in range(0, replicas, block)]


def _map_blocks(fn, blocks, workers: int):
    if workers <= 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, blocks))


def block_increments(problem: Problem, seed: int, lo: int, hi: int, N: int, tau: float):
    """``(N, J, hi - lo)`` increments of replicas ``lo..hi-1`` (``None`` if noise-free)."""
    if problem.noise_free:
        return None
    lam = problem.covariance.lambdas
    return np.stack([sample_increments(seed, r, N, tau, lam) for r in range(lo, hi)], axis=-1)


@dataclass
class MCResult:
    """Per-replica energies (``R x n_t``) and optionally states (``R x n_t x dim``)."""

    times: np.ndarray
    energies: np.ndarray
    states: np.ndarray | None
    seed: int
    tau: float

    @property
    def replicas(self) -> int:
        return self.energies.shape[0]

    def mean_energy(self) -> np.ndarray:
        return self.energies.mean(axis=0)

    def energy_stderr(self) -> np.ndarray:
        R = self.replicas
        if R < 2:
            return np.full(self.energies.shape[1], np.nan)
        return self.energies.std(axis=0, ddof=1) / np.sqrt(R)


def mc_run(problem: Problem, cfg: StepperConfig, replicas: int, seed: int, workers: int = 1,
           thin: int = 1, keep_states: bool = False, block: int = BLOCK) -> MCResult:
    """Integrate ``replicas`` independent noise realizations over ``[0, T]``."""
    if replicas < 1:
        raise ValueError("need at least one replica")
    N = int(round(problem.T / cfg.tau))
    if abs(N * cfg.tau - problem.T) > 1e-12:
        raise StepperConfigError(
            f"N*tau == T violated: tau={cfg.tau!r} does not divide T={problem.T!r} (N*tau = {N * cfg.tau!r})"
        )

    def run(bounds):
        lo, hi = bounds
        stepper = Stepper(cfg, problem)
        xi = block_increments(problem, seed, lo, hi, N, cfg.tau)
        u0 = np.repeat(problem.u0[:, None], hi - lo, axis=1)
        try:
            traj = integrate_increments(stepper, u0, xi, N, thin=thin)
        except NumericalFailure as exc:
            exc.replica = lo
            raise
        # traj.states: (n_t, dim, Rb)
        en = np.stack([problem.op.norm_sq(x) for x in traj.states], axis=1)
        st = np.transpose(traj.states, (2, 0, 1)) if keep_states else None
        return traj.times, en, st

    parts = _map_blocks(run, _blocks(replicas, block), workers)
    times = parts[0][0]
    energies = np.concatenate([p[1] for p in parts], axis=0)
    states = np.concatenate([p[2] for p in parts], axis=0) if keep_states else None
    return MCResult(times, energies, states, seed, cfg.tau)


def fit_slope(taus, errors) -> tuple[float, float]:
    """Least-squares line through ``(log2 tau, log2 error)``: ``(slope, intercept)``."""
    x, y = np.log2(np.asarray(taus, dtype=float)), np.log2(np.asarray(errors, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


@dataclass
class ConvergenceReport:
    """Strong errors per step size.

    ``errors`` is ``max_n sqrt(E ||u(t_n) - u^n||^2)`` (maximum of the
    per-time RMS; this one gates the slope band) and ``errors_maxfirst`` is
    ``sqrt(E max_n ||u(t_n) - u^n||^2)``.
    """

    tableau: str
    taus: list[float]
    errors: list[float]
    stderrs: list[float]
    errors_maxfirst: list[float]
    stderrs_maxfirst: list[float]
    slope: float
    intercept: float
    slope_maxfirst: float
    replicas: int
    seed: int
    ref_tau: float
    reference: str
    band: tuple[float, float] = (0.85, 1.15)
    failures: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(not self.failures and self.band[0] <= self.slope <= self.band[1])

    def summary(self) -> dict:
        return {
            "tableau": self.tableau,
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_maxfirst": self.slope_maxfirst,
            "band": list(self.band),
            "pass": self.passed,
            "replicas": self.replicas,
            "seed": self.seed,
            "ref_tau": self.ref_tau,
            "reference": self.reference,
            "failures": {str(k): v for k, v in self.failures.items()},
        }


def _check_levels(problem: Problem, tau_levels, ref_refinement: int):
    taus = [float(t) for t in tau_levels]
    if len(taus) < 3:
        raise ValueError("a slope needs at least 3 step sizes")
    if any(b >= a for a, b in zip(taus, taus[1:])):
        raise ValueError("tau levels must be strictly decreasing")
    tau_min = taus[-1]
    ref_tau = tau_min / ref_refinement
    N_ref = int(round(problem.T / ref_tau))
    if abs(N_ref * ref_tau - problem.T) > 1e-9 * problem.T:
        raise ValueError("reference step does not divide T")
    factors = []
    for t in taus:
        r = t / ref_tau
        if abs(r - round(r)) > 1e-9 or round(r) < 1:
            raise ValueError(f"tau={t} is not a multiple of the reference step {ref_tau}")
        if N_ref % int(round(r)):
            raise ValueError(f"tau={t} does not divide T")
        factors.append(int(round(r)))
    return taus, ref_tau, N_ref, factors


def convergence_study(problem: Problem, tableau: ButcherTableau | str, tau_levels, ref_refinement: int = 64,
                      replicas: int = 200, seed: int = 0, workers: int = 1, reference: str = "midpoint",
                      band=(0.85, 1.15), block: int = BLOCK, stage_solver: str = "auto") -> ConvergenceReport:
    """Mean-square errors against a fine-step reference on the same noise paths.

    ``reference="midpoint"`` integrates the midpoint scheme at
    ``min(tau_levels) / ref_refinement``; ``reference="exact"`` uses the
    spectral semigroup and is only valid for noise-free, drift-free problems.
    """
    return convergence_studies(problem, [tableau], tau_levels, ref_refinement, replicas, seed, workers,
                               reference, band, block, stage_solver)[0]


def convergence_studies(problem: Problem, tableaux, tau_levels, ref_refinement: int = 64, replicas: int = 200,
                        seed: int = 0, workers: int = 1, reference: str = "midpoint", band=(0.85, 1.15),
                        block: int = BLOCK, stage_solver: str = "auto") -> list[ConvergenceReport]:
    """Like :func:`convergence_study` for several tableaux sharing one reference solve."""
    tabs = [builtin(t) if isinstance(t, str) else t for t in tableaux]
    for tab in tabs:
        if not consistency_check(tab):
            raise ValueError(f"tableau {tab.name!r} fails the weight consistency check")
    taus, ref_tau, N_ref, factors = _check_levels(problem, tau_levels, ref_refinement)
    if reference == "exact":
        if not isinstance(problem.op, SpectralOperator) or not problem.noise_free or problem.drift.kind != "zero":
            raise ValueError("exact reference needs a noise-free, drift-free spectral problem")
    elif reference != "midpoint":
        raise ValueError(f"unknown reference {reference!r}")
    rec = factors[-1]  # reference stored every tau_min

    def run(bounds):
        lo, hi = bounds
        Rb = hi - lo
        u0 = np.repeat(problem.u0[:, None], Rb, axis=1)
        xi = block_increments(problem, seed, lo, hi, N_ref, ref_tau)
        if reference == "exact":
            ref_states = np.stack(
                [problem.op.propagator(k * taus[-1], u0) for k in range(N_ref // rec + 1)]
            )
        else:
            st = Stepper(StepperConfig(builtin("midpoint"), ref_tau, stage_solver=stage_solver), problem)
            ref_states = integrate_increments(st, u0, xi, N_ref, thin=rec).states
        out = []
        for tab in tabs:
            per = {}
            for tau, r in zip(taus, factors):
                N = N_ref // r
                xc = None if xi is None else xi.reshape(N, r, xi.shape[1], Rb).sum(axis=1)
                try:
                    stepper = Stepper(StepperConfig(tab, tau, stage_solver=stage_solver), problem)
                    states = integrate_increments(stepper, u0, xc, N).states
                except (NumericalFailure, StepperConfigError) as exc:
                    per[tau] = f"{type(exc).__name__}: {exc}"
                    continue
                diff = states - ref_states[:: r // rec]
                per[tau] = np.stack([problem.op.norm_sq(d) for d in diff])  # (N+1, Rb)
            out.append(per)
        return out

    parts = _map_blocks(run, _blocks(replicas, block), workers)
    return [_summarize(tab, [p[i] for p in parts], taus, replicas, seed, ref_tau, reference, band)
            for i, tab in enumerate(tabs)]


def _summarize(tab, parts, taus, replicas, seed, ref_tau, reference, band) -> ConvergenceReport:
    errs, ses, errs_mf, ses_mf, ok_taus = [], [], [], [], []
    failures: dict[float, str] = {}
    for tau in taus:
        msgs = [p[tau] for p in parts if isinstance(p[tau], str)]
        if msgs:
            failures[tau] = msgs[0]
            continue
        e2 = np.concatenate([p[tau] for p in parts], axis=1)  # (N+1, R)
        R = e2.shape[1]
        mean_t = e2.mean(axis=1)
        n_star = int(np.argmax(mean_t))
        rms = float(np.sqrt(mean_t[n_star]))
        mx = e2.max(axis=0)
        rms_mf = float(np.sqrt(mx.mean()))
        se_mean = e2[n_star].std(ddof=1) / np.sqrt(R) if R > 1 else np.nan
        se_mf = mx.std(ddof=1) / np.sqrt(R) if R > 1 else np.nan
        # delta method: se(sqrt(m)) = se(m) / (2 sqrt(m))
        errs.append(rms)
        ses.append(float(se_mean / (2 * rms)) if rms > 0 else 0.0)
        errs_mf.append(rms_mf)
        ses_mf.append(float(se_mf / (2 * rms_mf)) if rms_mf > 0 else 0.0)
        ok_taus.append(tau)
    slope = intercept = slope_mf = float("nan")
    if len(ok_taus) >= 2 and all(e > 0 for e in errs):
        slope, intercept = fit_slope(ok_taus, errs)
        slope_mf, _ = fit_slope(ok_taus, errs_mf)
    return ConvergenceReport(
        tableau=tab.name, taus=ok_taus, errors=errs, stderrs=ses, errors_maxfirst=errs_mf,
        stderrs_maxfirst=ses_mf, slope=slope, intercept=intercept, slope_maxfirst=slope_mf,
        replicas=replicas, seed=seed, ref_tau=ref_tau, reference=reference, band=tuple(band),
        failures=failures,
    )


# ---------------------------------------------------------------------------
# files


def write_report(report: ConvergenceReport, outdir, stem: str = "report") -> tuple[Path, Path]:
    """``<stem>.csv`` (one row per tau) and ``<stem>.summary.json``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "error", "stderr", "error_maxfirst", "stderr_maxfirst"])
        for row in zip(report.taus, report.errors, report.stderrs, report.errors_maxfirst, report.stderrs_maxfirst):
            w.writerow([repr(float(v)) for v in row])
    js = outdir / f"{stem}.summary.json"
    js.write_text(json.dumps(report.summary(), indent=2) + "\n")
    return csv_path, js


def read_report_csv(path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: [float(r[k]) for r in rows] for k in rows[0]} if rows else {}


DEFAULT_CONFIG = {
    "backend": {"kind": "maxwell1d", "m": 64, "L": 1.0, "eps": 10.0, "mu": 10.0},
    "drift": {"kind": "linear_damping", "sigma_e": 2.0, "sigma_m": 0.0},
    "noise": {"J": 16, "decay": 2.0, "profile": {"kind": "constant", "e": 1.0, "m": 0.0}},
    "u0": {"kind": "single_mode", "mode": 1, "amplitude": 1.0},
    "T": 1.0,
    "scheme": {"tableau": "midpoint", "tau": 0.0078125, "specialization": "generic", "stage_solver": "auto"},
    "run": {"seed": 20240917, "thin": 1},
    "study": {
        "tableaux": ["implicit_euler", "midpoint"],
        "tau_levels": [0.0625, 0.03125, 0.015625, 0.0078125, 0.00390625],
        "ref_refinement": 64,
        "replicas": 200,
        "seed": 20240917,
        "reference": "midpoint",
        "slope_band": [0.85, 1.15],
    },
    "diagnostics": {"replicas": 200, "seed": 20240917},
}


def default_config() -> dict:
    """Desk-scale study configuration (1D, m=64, T=1, tau 2^-4..2^-8, 200 replicas)."""
    return copy.deepcopy(DEFAULT_CONFIG)


@dataclass
class RunConfig:
    """Parsed configuration document; ``raw`` is the JSON object as read."""

    raw: dict

    def __post_init__(self):
        if not isinstance(self.raw, dict):
            raise ConfigError("configuration must be a JSON object")
        for key in ("backend", "T"):
            if key not in self.raw:
                raise ConfigError(f"config: missing key {key!r}")

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.raw == other.raw

    def problem(self) -> Problem:
        return problem_from_config(self.raw)

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    def stepper_config(self) -> StepperConfig:
        sch = self.section("scheme")
        return StepperConfig(
            load_tableau(sch.get("tableau", "midpoint")),
            float(sch.get("tau", self.raw["T"] / 100)),
            stage_solver=sch.get("stage_solver", "auto"),
            specialization=sch.get("specialization", "generic"),
        )

    def study_tableaux(self) -> list[ButcherTableau]:
        return [load_tableau(t) for t in self.section("study").get("tableaux", ["midpoint"])]


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from exc
    return RunConfig(doc)


def save_config(cfg: RunConfig | dict, path) -> Path:
    raw = cfg.raw if isinstance(cfg, RunConfig) else cfg
    path = Path(path)
    path.write_text(json.dumps(raw, indent=2) + "\n")
    return path
