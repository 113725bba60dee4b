"""Trajectory diagnostics: energy law, divergence, symplecticity, resolvent bounds, moments.

Monte Carlo inputs are :class:`~srkmax.harness.MCResult` objects (or
anything with ``times``, ``energies`` and, where needed, ``states`` of shape
``(R, n_t, dim)``).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .integrator import BlockResolvent, Stepper, StepperConfig, TangentFrame, _power_norm
from .model import Problem
from .spatial import Maxwell2DTM, SkewOperator, SpectralOperator
from .tableau import ButcherTableau, check_coercivity

__all__ = [
    "DiagnosticError",
    "DiagnosticSeries",
    "energy_law_residual",
    "energy_growth_slope",
    "divergence_drift",
    "divergence_mean_drift",
    "field_scale",
    "canonical_form",
    "symplectic_residual",
    "tangent_run",
    "resolvent_bound_probe",
    "moment_probe",
    "holder_probe",
    "verdict",
    "write_series_csv",
    "write_summary_json",
]

MIN_PROBE_REPLICAS = 30


class DiagnosticError(ValueError):
    """Diagnostic not applicable to the given inputs."""


@dataclass
class DiagnosticSeries:
    """Time series of a diagnostic with optional Monte Carlo standard errors."""

    name: str
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.times.shape:
            raise ValueError("times and values must have equal lengths")
        if self.stderr is not None:
            self.stderr = np.asarray(self.stderr, dtype=float)
            if self.stderr.shape != self.times.shape:
                raise ValueError("stderr must match times")
            if np.any(self.stderr[np.isfinite(self.stderr)] < 0):
                raise ValueError("standard errors must be nonnegative")

    def __len__(self):
        return self.times.size

    @property
    def worst(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


def _states(mc) -> np.ndarray:
    st = getattr(mc, "states", None)
    if st is None:
        raise DiagnosticError("this diagnostic needs stored states (run with keep_states=True)")
    return st


def _stderr(samples: np.ndarray, flags: list[str]) -> np.ndarray:
    R = samples.shape[0]
    if R < 2:
        flags.append("single_replica")
        return np.full(samples.shape[1:], np.nan)
    return samples.std(axis=0, ddof=1) / np.sqrt(R)


def energy_law_residual(mc, problem: Problem) -> DiagnosticSeries:
    """``mean[H(u^n)] - H(u0) - sum_k dt_k (2<u^k, F(t_k, u^k)> + ||B(t_k)||_HS^2)``.

    The integral is approximated by the left-endpoint rule on the stored
    times, so for nonzero drift the residual carries an ``O(tau)`` bias.
    """
    times = np.asarray(mc.times, dtype=float)
    en = np.asarray(mc.energies, dtype=float)
    if en.ndim != 2 or en.shape[1] != times.size:
        raise DiagnosticError(f"energies of shape {en.shape} do not match {times.size} times")
    R = en.shape[0]
    dt = np.diff(times)
    hs = np.zeros(times.size - 1)
    if not problem.noise_free:
        diff = problem.diffusion
        if problem.profile.time_dependent:
            hs = np.array([diff.hs_norm_sq(t) for t in times[:-1]])
        else:
            hs[:] = diff.hs_norm_sq(0.0)
    source = np.broadcast_to(hs * dt, (R, dt.size)).copy()
    if problem.drift.kind != "zero":
        st = _states(mc)
        if st.shape[:2] != en.shape:
            raise DiagnosticError("states and energies disagree on replicas or times")
        op = problem.op
        for k in range(dt.size):
            u = st[:, k, :].T
            source[:, k] += 2.0 * dt[k] * op.inner(u, problem.drift(times[k], u))
    integral = np.concatenate([np.zeros((R, 1)), np.cumsum(source, axis=1)], axis=1)
    h0 = problem.op.norm_sq(problem.u0)
    resid = en - h0 - integral
    flags: list[str] = []
    se = _stderr(resid, flags)
    return DiagnosticSeries("energy_law_residual", times, resid.mean(axis=0), se, flags,
                            meta={"replicas": R, "hs_norm_sq": hs.tolist()[:1]})


def energy_growth_slope(mc) -> tuple[float, float]:
    """Least-squares slope of mean energy against time and its standard error.

    The slope of the mean equals the mean of per-replica slopes, whose spread
    gives the standard error.
    """
    t = np.asarray(mc.times, dtype=float)
    en = np.asarray(mc.energies, dtype=float)
    tc = t - t.mean()
    slopes = (en - en.mean(axis=1, keepdims=True)) @ tc / np.dot(tc, tc)
    R = slopes.size
    se = float(slopes.std(ddof=1) / np.sqrt(R)) if R > 1 else float("nan")
    return float(slopes.mean()), se


def _div_op(problem_or_op) -> Maxwell2DTM:
    op = problem_or_op.op if isinstance(problem_or_op, Problem) else problem_or_op
    if not isinstance(op, Maxwell2DTM):
        raise DiagnosticError(f"divergence diagnostics need the 2D TM backend, got {op.kind!r}")
    return op


def _as_replica_states(traj) -> np.ndarray:
    """``(R, n_t, dim)`` from an MCResult, a Trajectory or a raw array."""
    if hasattr(traj, "energies") and hasattr(traj, "seed"):
        return _states(traj)
    st = np.asarray(getattr(traj, "states", traj), dtype=float)
    if st.ndim == 2:  # (n_t, dim)
        return st[None]
    if st.ndim == 3:  # Trajectory layout (n_t, dim, R)
        return np.transpose(st, (2, 0, 1))
    raise DiagnosticError(f"cannot interpret states of shape {st.shape}")


def field_scale(op: Maxwell2DTM, states: np.ndarray) -> float:
    """``max |mu H| / min(dx, dy)``: the size of one difference quotient."""
    h = states[..., op.n_e :]
    mu_h = np.abs(h) * op.mu
    return float(mu_h.max()) / min(op.meta["dx"], op.meta["dy"]) if mu_h.size else 0.0


def divergence_drift(traj, problem_or_op) -> DiagnosticSeries:
    """``max_{nodes, replicas} |div_h(mu H^n) - div_h(mu H^0)|`` per stored time."""
    op = _div_op(problem_or_op)
    st = _as_replica_states(traj)
    times = np.asarray(getattr(traj, "times", np.arange(st.shape[1])), dtype=float)
    d0 = op.divergence(st[:, 0, :].T)
    vals = np.array([np.max(np.abs(op.divergence(st[:, n, :].T) - d0)) for n in range(st.shape[1])])
    scale = max(field_scale(op, st), np.finfo(float).tiny)
    return DiagnosticSeries("divergence_drift", times, vals, meta={"scale": scale,
                                                                    "initial_max": float(np.max(np.abs(d0)))})


def divergence_mean_drift(traj, problem_or_op, n: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Per-node replica mean of ``div_h(mu H^n) - div_h(mu H^0)`` and its standard error."""
    op = _div_op(problem_or_op)
    st = _as_replica_states(traj)
    drift = (op.divergence(st[:, n, :].T) - op.divergence(st[:, 0, :].T)).T  # (R, nodes)
    R = drift.shape[0]
    if R < 2:
        raise DiagnosticError("mean divergence drift needs at least 2 replicas")
    return drift.mean(axis=0), drift.std(axis=0, ddof=1) / np.sqrt(R)


def canonical_form(n: int, weight: float = 1.0) -> np.ndarray:
    """``weight * [[0, I], [-I, 0]]`` of size ``2n``."""
    I = np.eye(n)
    Z = np.zeros((n, n))
    return weight * np.block([[Z, I], [-I, Z]])


def symplectic_residual(frame, omega_weight: float = 1.0, op: SkewOperator | None = None) -> float:
    """``||J^T Omega J - Omega||_F`` for the frame matrix ``J``."""
    if op is not None and not isinstance(op, SpectralOperator):
        raise DiagnosticError("the symplectic residual needs canonical (spectral) coordinates")
    J = frame.matrix if isinstance(frame, TangentFrame) else np.asarray(frame, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1] or J.shape[0] % 2:
        raise DiagnosticError(f"frame must be square of even size, got {J.shape}")
    Om = canonical_form(J.shape[0] // 2, omega_weight)
    return float(np.linalg.norm(J.T @ Om @ J - Om, "fro"))


def _is_hamiltonian(drift) -> bool:
    return drift.kind == "zero" or bool(getattr(drift, "hamiltonian", False))


def tangent_run(problem: Problem, cfg: StepperConfig, steps: int, seed: int = 0) -> tuple[TangentFrame, np.ndarray]:
    """Propagate the identity frame along one noise path for ``steps`` steps.

    Only the spectral backend with a Hamiltonian (or zero) drift is accepted:
    for other drifts no symplectic claim exists.
    """
    if not isinstance(problem.op, SpectralOperator):
        raise DiagnosticError("tangent runs need the spectral backend")
    if not _is_hamiltonian(problem.drift):
        raise DiagnosticError(f"drift {problem.drift.kind!r} is not Hamiltonian; no symplectic claim to test")
    from .harness import block_increments

    st = Stepper(cfg, problem)
    xi = block_increments(problem, seed, 0, 1, steps, cfg.tau)
    u = problem.u0.copy()
    J = np.eye(problem.op.dim)
    for n in range(steps):
        t = n * cfg.tau
        u = st._step_generic(u, t, None if xi is None else xi[n, :, 0])
        J = st.tangent(J, t, st.last_stages)
    return TangentFrame(J, steps), u


def _kernel_projector(op: SkewOperator):
    """H-orthogonal projection onto ``range(M)`` (the complement of ``ker M``)."""
    Z = sla.null_space(op.dense())
    if Z.shape[1] == 0:
        return lambda v: v
    w = op.weights
    gram = Z.T @ (w[:, None] * Z)
    coef = np.linalg.solve(gram, (w[:, None] * Z).T)  # Gram^{-1} Z^T W
    return lambda v: v - Z @ (coef @ v)


def resolvent_bound_probe(op: SkewOperator, tab: ButcherTableau, taus, seed: int = 0,
                          iters: int = 300) -> dict:
    """Power-iteration estimates of the stage-resolvent bounds.

    ``(i)``  ``||(I - tau (A kron M))^{-1}||_H``.
    ``(ii)`` ``sup_v ||[I - R] v|| / ||tau (A kron M) v||``.  Since
    ``I - R = -R tau (A kron M)``, this is the norm of ``R`` restricted to
    ``range(I kron M)``.
    """
    if not check_coercivity(tab).coercive:
        raise DiagnosticError(f"tableau {tab.name!r} is not certified coercive")
    s, dim = tab.s, op.dim
    wbig = np.tile(op.weights, s)
    proj1 = _kernel_projector(op)

    def proj(v):
        return np.concatenate([proj1(v[i * dim : (i + 1) * dim]) for i in range(s)])

    rows = []
    for tau in taus:
        res = BlockResolvent(op, tab.A, float(tau))
        n1 = _power_norm(res.solve, res.solve_adjoint, wbig, seed=seed, iters=iters, rtol=1e-13)
        n2 = _power_norm(lambda v: res.solve(proj(v)), lambda v: proj(res.solve_adjoint(v)), wbig,
                         seed=seed + 1, iters=iters, rtol=1e-13)
        rows.append({"tau": float(tau), "resolvent_norm": n1, "assertion_ii": n2})
    r1 = [r["resolvent_norm"] for r in rows]
    r2 = [r["assertion_ii"] for r in rows]
    return {
        "tableau": tab.name,
        "rows": rows,
        "max_resolvent_norm": max(r1),
        "ratio_i": max(r1) / min(r1),
        "max_assertion_ii": max(r2),
        "ratio_ii": max(r2) / min(r2),
    }


def _need_replicas(mc):
    R = np.asarray(mc.energies).shape[0]
    if R < MIN_PROBE_REPLICAS:
        raise DiagnosticError(f"probe needs at least {MIN_PROBE_REPLICAS} replicas, got {R}")


def moment_probe(mc, p: float = 2.0) -> DiagnosticSeries:
    """Empirical ``E ||u^n||_H^p`` per stored time; ``.worst`` is its maximum."""
    _need_replicas(mc)
    norms_p = np.asarray(mc.energies, dtype=float) ** (p / 2.0)
    flags: list[str] = []
    return DiagnosticSeries(f"moment_p{p:g}", mc.times, norms_p.mean(axis=0), _stderr(norms_p, flags), flags,
                            meta={"p": p})


def holder_probe(mc, op: SkewOperator) -> float:
    """``max_n E ||u^{n+1} - u^n||_H^2 / tau`` over consecutive stored states."""
    _need_replicas(mc)
    st = _states(mc)
    dt = np.diff(np.asarray(mc.times, dtype=float))
    worst = 0.0
    for n in range(dt.size):
        d = (st[:, n + 1, :] - st[:, n, :]).T
        worst = max(worst, float(np.mean(op.norm_sq(d))) / dt[n])
    return worst


# ---------------------------------------------------------------------------
# output


def verdict(name: str, worst_value: float, tolerance: float, **extra) -> dict:
    ok = bool(np.isfinite(worst_value) and worst_value <= tolerance)
    return {"name": name, "verdict": "PASS" if ok else "FAIL", "worst_value": float(worst_value),
            "tolerance": float(tolerance), **extra}


def write_series_csv(series: DiagnosticSeries, path) -> Path:
    path = Path(path)
    se = series.stderr if series.stderr is not None else np.full(len(series), np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "value", "stderr"])
        for row in zip(series.times, series.values, se):
            w.writerow([repr(float(v)) for v in row])
    return path


def write_summary_json(summaries: list[dict], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summaries, indent=2) + "\n")
    return path
