"""Implicit stochastic Runge-Kutta stepping.

States are flat arrays of shape ``(dim,)`` or ``(dim, R)``; the second form
advances ``R`` independent replicas at once with the same factorizations.
Noise increments are KL coefficient vectors of shape ``(J,)`` or ``(J, R)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import Problem
from .noise import NoisePath
from .spatial import FieldState, SkewOperator
from .tableau import ButcherTableau, builtin

__all__ = [
    "NumericalFailure",
    "FixedPointDivergence",
    "StageSolveFailure",
    "StepperConfigError",
    "StepperConfig",
    "BlockResolvent",
    "Stepper",
    "Trajectory",
    "TangentFrame",
    "rk_step",
    "rk_step_specialized",
    "integrate",
    "integrate_increments",
    "propagate_tangent",
    "operator_matrix",
]

SPECIALIZATIONS = ("generic", "implicit_euler_resolvent", "midpoint_resolvent")
STAGE_SOLVERS = ("auto", "direct_linear", "fixed_point")


class NumericalFailure(RuntimeError):
    """Base for failures of the time stepper; ``step`` is filled in by the driver."""

    def __init__(self, msg: str, step: int | None = None, replica: int | None = None):
        super().__init__(msg)
        self.step = step
        self.replica = replica

    def __str__(self):
        base = super().__str__()
        tags = []
        if self.step is not None:
            tags.append(f"step {self.step}")
        if self.replica is not None:
            tags.append(f"replica {self.replica}")
        return f"{base} [{', '.join(tags)}]" if tags else base


class FixedPointDivergence(NumericalFailure):
    """Stage iteration did not contract; the step size is too large for the drift."""


class StageSolveFailure(NumericalFailure):
    """Linear stage solve left a residual above tolerance."""


class StepperConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StepperConfig:
    tableau: ButcherTableau
    tau: float
    stage_solver: str = "auto"
    specialization: str = "generic"
    tol: float = 1e-12
    max_iter: int = 50

    def __post_init__(self):
        if isinstance(self.tableau, str):
            object.__setattr__(self, "tableau", builtin(self.tableau))
        if not self.tau > 0:
            raise StepperConfigError("tau must be positive")
        if self.stage_solver not in STAGE_SOLVERS:
            raise StepperConfigError(f"stage_solver must be one of {STAGE_SOLVERS}")
        if self.specialization not in SPECIALIZATIONS:
            raise StepperConfigError(f"specialization must be one of {SPECIALIZATIONS}")
        tab = self.tableau
        if self.specialization == "implicit_euler_resolvent" and not _matches(tab, "implicit_euler"):
            raise StepperConfigError("implicit Euler resolvent form needs the implicit Euler tableau")
        if self.specialization == "midpoint_resolvent" and not _matches(tab, "midpoint"):
            raise StepperConfigError("midpoint resolvent form needs the midpoint tableau")


def _matches(tab: ButcherTableau, name: str) -> bool:
    ref = builtin(name)
    return tab.s == ref.s and tab == ref


def operator_matrix(op: SkewOperator) -> sp.csr_matrix:
    """Sparse assembly of ``M``."""
    return sp.csr_matrix(
        sp.bmat(
            [[None, sp.diags(1.0 / op.eps) @ op.G], [-sp.diags(1.0 / op.mu) @ op.Gt, None]]
        )
    )


class _SparseLU:
    def __init__(self, K):
        self._lu = spla.splu(sp.csc_matrix(K))

    def solve(self, rhs, trans="N"):
        return self._lu.solve(np.ascontiguousarray(rhs), trans=trans)


class BlockResolvent:
    """``(I - tau (A kron (M + L)))^{-1}`` on stacked stages, with its H-adjoint.

    One-stage tableaux with diagonal ``L <= 0`` use the operator's structured
    shifted solve; everything else factors the sparse block matrix.
    """

    def __init__(self, op: SkewOperator, A: np.ndarray, tau: float, L=None, sigma=None):
        self.op, self.A, self.tau = op, np.asarray(A, dtype=float), float(tau)
        self.s = self.A.shape[0]
        dim = op.dim
        if sigma is not None and not np.any(sigma):
            sigma = None
        self._structured = self.s == 1 and (L is None or sigma is not None)
        if self._structured:
            self.gamma = self.tau * self.A[0, 0]
            self.sigma = sigma
            if self.gamma < 0:
                raise StepperConfigError("negative diagonal coefficient")
            if self.gamma > 0 or sigma is not None:
                op.shifted_solver(self.gamma, sigma)
        else:
            Mm = operator_matrix(op)
            if L is not None:
                Mm = Mm + sp.csr_matrix(L)
            if sigma is not None:
                Mm = Mm - sp.diags(sigma)
            self._K = sp.identity(self.s * dim, format="csr") - self.tau * sp.kron(
                sp.csr_matrix(self.A), Mm, format="csr"
            )
            self._lu = _SparseLU(self._K)
        self._wbig = np.tile(op.weights, self.s)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._structured:
            if self.gamma == 0 and self.sigma is None:
                return rhs.copy()
            return self.op.solve_shifted(self.gamma, rhs, self.sigma)
        return self._lu.solve(rhs)

    def solve_adjoint(self, rhs: np.ndarray) -> np.ndarray:
        """Adjoint in the stacked weighted inner product: ``W^{-1} K^{-T} W``."""
        col = (slice(None),) if rhs.ndim == 1 else (slice(None), None)
        if self._structured:
            if self.sigma is not None:
                raise NotImplementedError("adjoint of a damped resolvent")
            if self.gamma == 0:
                return rhs.copy()
            return self.op.solve_shifted(-self.gamma, rhs)
        w = self._wbig[col]
        return self._lu.solve(w * rhs, trans="T") / w

    def residual(self, x: np.ndarray, rhs: np.ndarray) -> float:
        if self._structured:
            r = x - self.gamma * self.op.apply(x) - rhs
            if self.sigma is not None:
                r = r + self.gamma * (self.sigma[:, None] if x.ndim == 2 else self.sigma) * x
        else:
            r = self._K @ x - rhs
        return float(np.max(np.abs(r)))


def _stack(stages: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(stages, axis=0)


def _unstack(x: np.ndarray, s: int, dim: int) -> list[np.ndarray]:
    return [x[i * dim : (i + 1) * dim] for i in range(s)]


class Stepper:
    """One configured time stepper for a problem.

    Factorizations are built in the constructor.  The instance keeps the
    stage values of its last generic step in ``last_stages`` (for tangent
    propagation) and must not be shared between threads.
    """

    def __init__(self, cfg: StepperConfig, problem: Problem):
        self.cfg, self.problem = cfg, problem
        self.op = problem.op
        self.drift = problem.drift
        self.B = problem.diffusion
        tab = cfg.tableau
        self.tab = tab
        solver = cfg.stage_solver
        if solver == "auto":
            solver = "direct_linear" if self.drift.is_affine else "fixed_point"
        if solver == "direct_linear" and not self.drift.is_affine:
            raise StepperConfigError("direct_linear stage solver needs an affine drift")
        self.solver = solver
        tau = cfg.tau
        if solver == "direct_linear":
            sigma = self.drift.damping()
            L = None if sigma is not None else self.drift.linear_matrix()
        else:
            sigma, L = None, None
        self._sigma, self._L = sigma, L
        self._Lfull = self.drift.linear_matrix() if solver == "direct_linear" else None
        spec = cfg.specialization
        if spec == "generic":
            self.resolvent = BlockResolvent(self.op, tab.A, tau, L, sigma)
        elif spec == "implicit_euler_resolvent":
            self.resolvent = BlockResolvent(self.op, [[1.0]], tau, L, sigma)
        else:
            self.resolvent = BlockResolvent(self.op, [[0.5]], tau, L, sigma)
        self.contraction = None
        if solver == "fixed_point" and self.drift.lipschitz > 0:
            self.contraction = tau * self.drift.lipschitz * self._resolvent_constant()
            if self.contraction >= 1.0:
                raise StepperConfigError(
                    f"fixed-point stage solver needs tau*L*C_A < 1, got {self.contraction:.3g}"
                )
        self.last_stages: list[np.ndarray] | None = None
        self.last_iterations = 0
        self.last_residuals: list[float] = []

    # -- constants

    def _resolvent_constant(self) -> float:
        """``C_A`` bounding ``||(I - tau A kron M)^{-1} (A kron I)||`` in the H norm."""
        A = self.tab.A if self.cfg.specialization == "generic" else self.resolvent.A
        if A.shape[0] == 1:
            return abs(float(A[0, 0]))
        return _power_norm(
            lambda v: self.resolvent.solve(_kron_apply(A, v, self.op.dim)),
            lambda v: _kron_apply(A.T, self.resolvent.solve_adjoint(v), self.op.dim),
            np.tile(self.op.weights, A.shape[0]),
            seed=0,
        )

    # -- pieces of the scheme

    def _noise_terms(self, t: float, dw, coeffs: np.ndarray) -> list:
        """``B(t + c_j tau) dW`` for every stage (``None`` when the noise is off)."""
        if dw is None or self.B.is_zero:
            return [None] * len(coeffs)
        out, cache = [], {}
        for c in coeffs:
            tc = t + c * self.cfg.tau
            if tc not in cache:
                cache[tc] = self.B.apply(tc, dw)
            out.append(cache[tc])
        return out

    def _F(self, t, x):
        return self.drift(t, x)

    def _forcing(self, t, like):
        f = self.drift.forcing(t)
        if f is None:
            return None
        return f if like.ndim == 1 else np.broadcast_to(f[:, None], like.shape)

    # -- generic scheme

    def step(self, u: np.ndarray, t: float, dw=None) -> np.ndarray:
        if self.cfg.specialization == "implicit_euler_resolvent":
            return self._step_ie(u, t, dw)
        if self.cfg.specialization == "midpoint_resolvent":
            return self._step_mid(u, t, dw)
        return self._step_generic(u, t, dw)

    def _step_generic(self, u, t, dw):
        tab, tau = self.tab, self.cfg.tau
        s, dim = tab.s, self.op.dim
        bterm = self._noise_terms(t, dw, tab.c)
        noisy = bterm[0] is not None
        g = [None] * s
        if noisy:
            for i in range(s):
                acc = None
                for j in range(s):
                    if tab.Atilde[i, j] != 0.0:
                        term = tab.Atilde[i, j] * bterm[j]
                        acc = term if acc is None else acc + term
                g[i] = acc
        if self.solver == "direct_linear":
            stages = self._stages_direct(u, t, g)
        else:
            stages = self._stages_fixed_point(u, t, g)
        self.last_stages = stages
        incr = None
        for i in range(s):
            if tab.b[i] == 0.0:
                continue
            ti = t + tab.c[i] * tau
            term = (tau * tab.b[i]) * (self.op.apply(stages[i]) + self._F(ti, stages[i]))
            incr = term if incr is None else incr + term
        out = u + incr if incr is not None else u.copy()
        if noisy:
            for i in range(s):
                if tab.btilde[i] != 0.0:
                    out = out + tab.btilde[i] * bterm[i]
        return out

    def _stage_rhs(self, u, t, g, extra=None):
        tab, tau = self.tab, self.cfg.tau
        s = tab.s
        rhs = []
        forcing = [self._forcing(t + tab.c[j] * tau, u) for j in range(s)]
        for i in range(s):
            r = u.copy()
            for j in range(s):
                a = tab.A[i, j]
                if a == 0.0:
                    continue
                if forcing[j] is not None:
                    r = r + (tau * a) * forcing[j]
                if extra is not None:
                    r = r + (tau * a) * extra[j]
            if g[i] is not None:
                r = r + g[i]
            rhs.append(r)
        return rhs

    def _stages_direct(self, u, t, g):
        rhs = _stack(self._stage_rhs(u, t, g))
        x = self.resolvent.solve(rhs)
        return _unstack(x, self.tab.s, self.op.dim)

    def _stages_fixed_point(self, u, t, g):
        tab, tau = self.tab, self.cfg.tau
        s = tab.s
        times = [t + tab.c[j] * tau for j in range(s)]
        stages = [u.copy() for _ in range(s)]
        base = None
        residuals = []
        for it in range(1, self.cfg.max_iter + 1):
            Fs = [self._F(times[j], stages[j]) for j in range(s)]
            rhs = self._stage_rhs(u, t, g, extra=Fs)
            new = _unstack(self.resolvent.solve(_stack(rhs)), s, self.op.dim)
            dist = max(float(np.max(np.sqrt(self.op.norm_sq(new[i] - stages[i])))) for i in range(s))
            scale = max(1.0, max(float(np.max(np.sqrt(self.op.norm_sq(x)))) for x in new))
            residuals.append(dist)
            stages = new
            if dist <= self.cfg.tol * scale:
                self.last_iterations = it
                self.last_residuals = residuals
                return stages
            if base is None:
                base = dist
            elif it >= 4 and dist > base and residuals[-1] > residuals[-2] > residuals[-3]:
                raise FixedPointDivergence(
                    f"stage iteration expanding (distance {dist:.3g} after {it} sweeps)"
                )
        self.last_residuals = residuals
        raise FixedPointDivergence(
            f"stage iteration did not converge in {self.cfg.max_iter} sweeps "
            f"(last distance {residuals[-1]:.3g})"
        )

    # -- resolvent forms

    def _implicit_update(self, lhs_rhs, t_eval, combine):
        """Solve ``x = R(base + tau F(t_eval, combine(x)))`` for general drifts."""
        x = self.resolvent.solve(lhs_rhs)
        residuals = []
        for it in range(1, self.cfg.max_iter + 1):
            new = self.resolvent.solve(lhs_rhs + self.cfg.tau * self._F(t_eval, combine(x)))
            dist = float(np.max(np.sqrt(self.op.norm_sq(new - x))))
            scale = max(1.0, float(np.max(np.sqrt(self.op.norm_sq(new)))))
            residuals.append(dist)
            x = new
            if dist <= self.cfg.tol * scale:
                self.last_iterations = it
                self.last_residuals = residuals
                return x
            if it >= 4 and residuals[-1] > residuals[-2] > residuals[-3] > residuals[0]:
                raise FixedPointDivergence(f"resolvent iteration expanding ({dist:.3g})")
        raise FixedPointDivergence(
            f"resolvent iteration did not converge in {self.cfg.max_iter} sweeps"
        )

    def _step_ie(self, u, t, dw):
        tau = self.cfg.tau
        t1 = t + tau
        (bn,) = self._noise_terms(t, dw, [1.0])
        base = u if bn is None else u + bn
        if self.solver == "direct_linear":
            f = self._forcing(t1, u)
            rhs = base if f is None else base + tau * f
            return self.resolvent.solve(rhs)
        return self._implicit_update(base, t1, lambda x: x)

    def _step_mid(self, u, t, dw):
        tau = self.cfg.tau
        th = t + 0.5 * tau
        (bn,) = self._noise_terms(t, dw, [0.5])
        if self.solver == "direct_linear":
            half = self.op.apply(u)
            if self._Lfull is not None:
                half = half + self._Lfull @ u
            rhs = u + (0.5 * tau) * half
            f = self._forcing(th, u)
            if f is not None:
                rhs = rhs + tau * f
            if bn is not None:
                rhs = rhs + bn
            return self.resolvent.solve(rhs)
        base = u + (0.5 * tau) * self.op.apply(u)
        if bn is not None:
            base = base + bn
        return self._implicit_update(base, th, lambda x: 0.5 * (u + x))

    # -- tangent map

    def tangent(self, frame: np.ndarray, t: float, stages: list[np.ndarray] | None = None) -> np.ndarray:
        """Push frame columns through the linearized generic scheme around ``stages``."""
        stages = self.last_stages if stages is None else stages
        if stages is None:
            raise ValueError("tangent propagation needs stage values from a primal step")
        tab, tau, dim = self.tab, self.cfg.tau, self.op.dim
        s = tab.s
        eye = np.eye(dim)
        Md = self.op.dense()
        blocks = []
        for j in range(s):
            tj = t + tab.c[j] * tau
            jac = np.column_stack([self.drift.jacobian(tj, stages[j], eye[:, k]) for k in range(dim)])
            blocks.append(Md + jac)
        K = np.eye(s * dim)
        for i in range(s):
            for j in range(s):
                if tab.A[i, j] != 0.0:
                    K[i * dim : (i + 1) * dim, j * dim : (j + 1) * dim] -= tau * tab.A[i, j] * blocks[j]
        dU = np.linalg.solve(K, np.tile(frame, (s, 1)))
        out = frame.copy()
        for i in range(s):
            if tab.b[i] != 0.0:
                out = out + (tau * tab.b[i]) * (blocks[i] @ dU[i * dim : (i + 1) * dim])
        return out


def _kron_apply(A: np.ndarray, v: np.ndarray, dim: int) -> np.ndarray:
    s = A.shape[0]
    parts = _unstack(v, s, dim)
    return _stack([sum(A[i, j] * parts[j] for j in range(s)) for i in range(s)])


def _power_norm(apply, apply_adj, weights, seed=0, iters=60, rtol=1e-10) -> float:
    """Power iteration on ``X^* X`` for the weighted operator norm of ``X``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(weights.size)
    v /= np.sqrt(np.sum(weights * v * v))
    est = 0.0
    for _ in range(iters):
        w = apply(v)
        new = float(np.sqrt(np.sum(weights * w * w)))
        z = apply_adj(w)
        nz = np.sqrt(np.sum(weights * z * z))
        if nz == 0:
            return new
        v = z / nz
        if abs(new - est) <= rtol * max(new, 1e-300):
            return new
        est = new
    return est


@dataclass
class Trajectory:
    """Stored states (``states[k]`` at ``times[k]``) of one or many replicas."""

    times: np.ndarray
    states: np.ndarray
    tau: float
    thin: int = 1
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def energies(self, op: SkewOperator) -> np.ndarray:
        return np.array([op.norm_sq(x) for x in self.states])


@dataclass
class TangentFrame:
    matrix: np.ndarray
    step: int = 0

    @staticmethod
    def identity(dim: int) -> "TangentFrame":
        return TangentFrame(np.eye(dim), 0)


def _as_array(u):
    return u.data if isinstance(u, FieldState) else np.asarray(u, dtype=float)


def rk_step(cfg: StepperConfig, problem: Problem, u_n, t_n: float, dW_coeffs=None, stepper=None):
    """One generic step; returns the same type as ``u_n``."""
    if cfg.specialization != "generic":
        cfg = StepperConfig(cfg.tableau, cfg.tau, cfg.stage_solver, "generic", cfg.tol, cfg.max_iter)
    st = stepper or Stepper(cfg, problem)
    out = st.step(_as_array(u_n), t_n, None if dW_coeffs is None else np.asarray(dW_coeffs, dtype=float))
    return problem.state(out) if isinstance(u_n, FieldState) else out


def rk_step_specialized(cfg: StepperConfig, problem: Problem, u_n, t_n: float, dW_coeffs=None, stepper=None):
    """One step in resolvent form (``cfg.specialization`` picks the form)."""
    if cfg.specialization == "generic":
        name = "implicit_euler_resolvent" if _matches(cfg.tableau, "implicit_euler") else "midpoint_resolvent"
        cfg = StepperConfig(cfg.tableau, cfg.tau, cfg.stage_solver, name, cfg.tol, cfg.max_iter)
    st = stepper or Stepper(cfg, problem)
    out = st.step(_as_array(u_n), t_n, None if dW_coeffs is None else np.asarray(dW_coeffs, dtype=float))
    return problem.state(out) if isinstance(u_n, FieldState) else out


def integrate_increments(stepper: Stepper, u0: np.ndarray, increments: np.ndarray | None, N: int,
                         t0: float = 0.0, thin: int = 1, record=None) -> Trajectory:
    """Advance ``N`` steps with ``increments[n]`` of shape ``(J,)`` or ``(J, R)``.

    Stores every ``thin``-th state (and always the last one).  ``record`` may
    be a callable ``record(n, t, x)`` invoked after each stored state.
    """
    tau = stepper.cfg.tau
    x = np.array(u0, dtype=float)
    times, states = [t0], [x.copy()]
    if record is not None:
        record(0, t0, x)
    for n in range(N):
        t = t0 + n * tau
        dw = None if increments is None else increments[n]
        try:
            x = stepper.step(x, t, dw)
        except NumericalFailure as exc:
            exc.step = n
            raise
        if not np.all(np.isfinite(x)):
            raise StageSolveFailure("non-finite state", step=n)
        if (n + 1) % thin == 0 or n + 1 == N:
            times.append(t0 + (n + 1) * tau)
            states.append(x.copy())
            if record is not None:
                record(n + 1, times[-1], x)
    return Trajectory(np.array(times), np.array(states), tau, thin)


def integrate(cfg: StepperConfig, problem: Problem, path: NoisePath | None, thin: int = 1,
              N: int | None = None) -> Trajectory:
    """Integrate over ``[0, T]`` along ``path`` (``None`` runs noise-free with ``N`` steps)."""
    if path is not None:
        if abs(path.tau - cfg.tau) > 1e-12 * max(1.0, cfg.tau):
            raise StepperConfigError(f"path step {path.tau} differs from stepper step {cfg.tau}")
        N = path.N
        if abs(N * path.tau - problem.T) > 1e-12 and N > 0:
            raise StepperConfigError(
                f"N*tau == T violated: N={N}, tau={path.tau!r} gives {N * path.tau!r}, T={problem.T!r}"
            )
        increments = path.xi
    else:
        if N is None:
            N = int(round(problem.T / cfg.tau))
            if abs(N * cfg.tau - problem.T) > 1e-12:
                raise StepperConfigError(f"tau={cfg.tau} does not divide T={problem.T}")
        increments = None
    stepper = Stepper(cfg, problem)
    traj = integrate_increments(stepper, problem.u0, increments, N, thin=thin)
    if path is not None:
        traj.meta["noise"] = path.provenance()
    return traj


def propagate_tangent(cfg: StepperConfig, problem: Problem, frame: TangentFrame, u_n, t_n: float,
                      dW_coeffs=None, stepper: Stepper | None = None) -> tuple[TangentFrame, np.ndarray]:
    """Advance the primal state and the tangent frame by one generic step.

    Returns the new frame and ``u_{n+1}``; the frame is linearized around the
    stage values of that same primal step.
    """
    st = stepper or Stepper(cfg, problem)
    x = _as_array(u_n)
    u1 = st._step_generic(x, t_n, None if dW_coeffs is None else np.asarray(dW_coeffs, dtype=float))
    mat = st.tangent(frame.matrix, t_n, st.last_stages)
    return TangentFrame(mat, frame.step + 1), u1
