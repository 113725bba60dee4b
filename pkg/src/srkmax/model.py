"""Problem instances: operator backend, drift, noise and initial data."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .noise import CovarianceSpec, DiffusionMap, NoiseProfile, default_covariance
from .spatial import (
    FieldState,
    Grid1D,
    Grid2DTM,
    SkewOperator,
    SpectralOperator,
    build_maxwell_1d,
    build_maxwell_2d_tm,
    build_spectral_hamiltonian,
)

__all__ = [
    "ConfigError",
    "Drift",
    "ZeroDrift",
    "LinearDamping",
    "AffineDrift",
    "CustomDrift",
    "SineHamiltonianDrift",
    "Problem",
    "eval_F",
    "eval_F_jacobian",
    "build_operator",
    "build_drift",
    "build_profile",
    "build_covariance",
    "build_u0",
    "problem_from_config",
    "hamiltonian_symmetry_defect",
]


class ConfigError(ValueError):
    """Invalid problem description."""


def _col(x: np.ndarray):
    return (slice(None),) if x.ndim == 1 else (slice(None), None)


class Drift:
    """Nemytskij drift ``F(t, u)`` acting on flat states (or columns of states).

    Subclasses set ``lipschitz`` (a bound in the H norm) and may expose an
    exact directional derivative through ``jacobian``.
    """

    kind = "abstract"
    lipschitz = 0.0
    has_jacobian = True
    hamiltonian = False

    def bind(self, op: SkewOperator) -> "Drift":
        """Hook for drifts that need operator data (materials, sizes)."""
        return self

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, t: float, x: np.ndarray, d: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # linear structure used by the direct stage solver
    def damping(self) -> np.ndarray | None:
        """Diagonal ``Sigma`` with ``F(t, u) = -Sigma u + f(t)``, if that form applies."""
        return None

    def linear_matrix(self):
        """Sparse ``L`` with ``F(t, u) = L u + f(t)``, or ``None`` for nonlinear drifts."""
        return None

    def forcing(self, t: float) -> np.ndarray | None:
        """State-independent part ``f(t)`` of an affine drift."""
        return None

    @property
    def is_affine(self) -> bool:
        return self.linear_matrix() is not None

    def growth_constant(self, op: SkewOperator) -> float:
        """``C`` with ``||F(t, u)||_H <= C (1 + ||u||_H)``."""
        f0 = self.forcing(0.0)
        c0 = 0.0 if f0 is None else float(np.sqrt(op.norm_sq(f0)))
        return max(self.lipschitz, c0)

    def describe(self) -> dict:
        return {"kind": self.kind}


class ZeroDrift(Drift):
    kind = "zero"

    def __call__(self, t, x):
        return np.zeros_like(x)

    def jacobian(self, t, x, d):
        return np.zeros_like(d)

    def damping(self):
        return self._zeros

    def linear_matrix(self):
        return sp.csr_matrix((self._dim, self._dim))

    def bind(self, op):
        out = ZeroDrift()
        out._dim = op.dim
        out._zeros = np.zeros(op.dim)
        return out


class LinearDamping(Drift):
    """Ohmic losses ``J_e = sigma_e E``, ``J_m = sigma_m H``, so ``F = -(sigma_e E/eps, sigma_m H/mu)``."""

    kind = "linear_damping"

    def __init__(self, sigma_e=0.0, sigma_m=0.0):
        self.sigma_e, self.sigma_m = sigma_e, sigma_m
        if np.any(np.asarray(sigma_e) < 0) or np.any(np.asarray(sigma_m) < 0):
            raise ConfigError("damping coefficients must be nonnegative")
        self._sigma = None

    def bind(self, op):
        out = LinearDamping(self.sigma_e, self.sigma_m)
        se = np.broadcast_to(np.asarray(self.sigma_e, dtype=float), (op.n_e,))
        sm = np.broadcast_to(np.asarray(self.sigma_m, dtype=float), (op.n_h,))
        out._sigma = np.concatenate([se / op.eps, sm / op.mu])
        out.lipschitz = float(out._sigma.max(initial=0.0))
        return out

    def __call__(self, t, x):
        return -self._sigma[_col(x)] * x

    def jacobian(self, t, x, d):
        return -self._sigma[_col(d)] * d

    def damping(self):
        return self._sigma

    def linear_matrix(self):
        return sp.diags(-self._sigma)

    def describe(self):
        return {"kind": self.kind, "sigma_e": _plain(self.sigma_e), "sigma_m": _plain(self.sigma_m)}


class AffineDrift(Drift):
    """``F(t, u) = L u + profile(t) * offset``."""

    kind = "affine"

    def __init__(self, matrix, offset=None, time_profile: Callable[[float], float] | None = None):
        self.matrix = sp.csr_matrix(matrix)
        n = self.matrix.shape[0]
        self.offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
        self.time_profile = time_profile or (lambda t: 1.0)

    def bind(self, op):
        if self.matrix.shape != (op.dim, op.dim):
            raise ConfigError(f"affine drift matrix must be {op.dim}x{op.dim}")
        out = AffineDrift(self.matrix, self.offset, self.time_profile)
        # H-norm of L is the 2-norm of W^{1/2} L W^{-1/2}
        s = np.sqrt(op.weights)
        L = (s[:, None] * self.matrix.toarray()) / s[None, :]
        out.lipschitz = float(np.linalg.norm(L, 2))
        return out

    def __call__(self, t, x):
        f = self.time_profile(t) * self.offset
        return self.matrix @ x + (f if x.ndim == 1 else f[:, None])

    def jacobian(self, t, x, d):
        return self.matrix @ d

    def linear_matrix(self):
        return self.matrix

    def damping(self):
        off = self.matrix - sp.diags(self.matrix.diagonal())
        diag = -self.matrix.diagonal()
        if off.count_nonzero() == 0 and np.all(diag >= 0):
            return diag
        return None

    def forcing(self, t):
        return self.time_profile(t) * self.offset


class CustomDrift(Drift):
    """User callback ``fn(t, x)`` with a declared H-norm Lipschitz constant.

    Without ``jac`` the directional derivative falls back to central
    differences with step ``1e-6 (1 + ||u||_H)``.
    """

    kind = "custom"

    def __init__(self, fn, lipschitz: float, jac=None, hamiltonian: bool = False):
        if not lipschitz > 0:
            raise ConfigError("custom drifts must declare a positive Lipschitz constant")
        self.fn, self.lipschitz, self.jac = fn, float(lipschitz), jac
        self.hamiltonian = hamiltonian
        self._op = None

    @property
    def has_jacobian(self):
        return True

    def bind(self, op):
        out = CustomDrift(self.fn, self.lipschitz, self.jac, self.hamiltonian)
        out._op = op
        return out

    def growth_constant(self, op):
        f0 = self.fn(0.0, np.zeros(op.dim))
        return max(self.lipschitz, float(np.sqrt(op.norm_sq(f0))))

    def __call__(self, t, x):
        return self.fn(t, x)

    def jacobian(self, t, x, d):
        if self.jac is not None:
            return self.jac(t, x, d)
        return finite_difference_jacobian(self.fn, self._op, t, x, d)


class SineHamiltonianDrift(Drift):
    """Nonlinear Hamiltonian drift on the spectral backend.

    In mode coordinates ``F = (beta sin(h), -beta sin(e))`` is the canonical
    vector field of ``V(e, h) = -beta sum(cos e_j + cos h_j)``; its Jacobian
    is ``[[0, I], [-I, 0]] @ Hess V`` with ``Hess V`` diagonal.
    """

    kind = "hamiltonian_sine"
    hamiltonian = True

    def __init__(self, beta: float = 1.0):
        self.beta = float(beta)
        self._n = None

    def bind(self, op):
        if not isinstance(op, SpectralOperator):
            raise ConfigError("hamiltonian_sine drift needs the spectral backend")
        out = SineHamiltonianDrift(self.beta)
        out._n = op.n_e
        ratio = max(op.eps[0] / op.mu[0], op.mu[0] / op.eps[0])
        out.lipschitz = abs(self.beta) * float(np.sqrt(ratio))
        return out

    def __call__(self, t, x):
        n = self._n
        return self.beta * np.concatenate([np.sin(x[n:]), -np.sin(x[:n])], axis=0)

    def jacobian(self, t, x, d):
        n = self._n
        return self.beta * np.concatenate([np.cos(x[n:]) * d[n:], -np.cos(x[:n]) * d[:n]], axis=0)

    def potential(self, x):
        return -self.beta * np.sum(np.cos(x), axis=0)

    def describe(self):
        return {"kind": self.kind, "beta": self.beta}


def _plain(v):
    return np.asarray(v).tolist() if np.ndim(v) else float(v)


def finite_difference_jacobian(fn, op: SkewOperator, t, x, d):
    """Central difference of ``fn`` at ``x`` along ``d``, scaled back to ``d``."""
    nd = float(np.sqrt(op.norm_sq(d))) if op is not None else float(np.linalg.norm(d))
    if nd == 0.0:
        return np.zeros_like(d)
    nx = float(np.sqrt(op.norm_sq(x))) if op is not None else float(np.linalg.norm(x))
    h = 1e-6 * (1.0 + nx)
    dh = d / nd
    return (fn(t, x + h * dh) - fn(t, x - h * dh)) * (nd / (2.0 * h))


def hamiltonian_symmetry_defect(drift: Drift, op: SkewOperator, t, u, v, w) -> float:
    """``|<DG v, w> - <v, DG w>|`` with ``DG = -[[0, I], [-I, 0]] J_F``.

    A drift ``F = [[0, I], [-I, 0]] G`` comes from a potential exactly when
    ``DG`` is symmetric in the unweighted coefficient pairing.
    """
    n = op.n_e

    def dg(d):
        jf = drift.jacobian(t, u, d)
        # [[0, I], [-I, 0]]^{-1} = [[0, -I], [I, 0]]
        return np.concatenate([-jf[n:], jf[:n]])

    return abs(float(np.dot(dg(v), w) - np.dot(v, dg(w))))


@dataclass(eq=False)
class Problem:
    """Semilinear problem ``du = (Mu + F(t, u)) dt + B(t) dW`` on ``[0, T]``."""

    op: SkewOperator
    drift: Drift
    covariance: CovarianceSpec
    profile: NoiseProfile
    u0: np.ndarray
    T: float
    config: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigError("horizon T must be positive")
        u0 = self.u0.data if isinstance(self.u0, FieldState) else np.asarray(self.u0, dtype=float)
        if u0.shape != (self.op.dim,):
            raise ConfigError(f"u0 has shape {u0.shape}, operator dimension is {self.op.dim}")
        self.u0 = u0
        self.drift = self.drift.bind(self.op)

    @cached_property
    def diffusion(self) -> DiffusionMap:
        return DiffusionMap(self.op, self.covariance, self.profile)

    @property
    def noise_free(self) -> bool:
        return self.profile.is_zero

    def replace(self, **changes) -> "Problem":
        kw = dict(op=self.op, drift=self.drift, covariance=self.covariance,
                  profile=self.profile, u0=self.u0, T=self.T, config=self.config)
        kw.update(changes)
        return Problem(**kw)

    def state(self, x) -> FieldState:
        return self.op.state(x)


def eval_F(problem: Problem, t: float, u):
    x = u.data if isinstance(u, FieldState) else u
    out = problem.drift(t, x)
    return problem.state(out) if isinstance(u, FieldState) else out


def eval_F_jacobian(problem: Problem, t: float, u, direction, fd: bool = False):
    """Directional derivative of ``F`` at ``u``; ``fd=True`` forces central differences."""
    x = u.data if isinstance(u, FieldState) else u
    d = direction.data if isinstance(direction, FieldState) else direction
    if fd:
        out = finite_difference_jacobian(problem.drift, problem.op, t, x, d)
    else:
        out = problem.drift.jacobian(t, x, d)
    return problem.state(out) if isinstance(u, FieldState) else out


# ---------------------------------------------------------------------------
# JSON configuration


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing key {key!r}")
    return d[key]


def build_operator(cfg: dict) -> SkewOperator:
    kind = _need(cfg, "kind", "backend")
    if kind == "maxwell1d":
        return build_maxwell_1d(
            Grid1D(int(_need(cfg, "m", "backend")), float(cfg.get("L", 1.0)),
                   cfg.get("eps", 1.0), cfg.get("mu", 1.0))
        )
    if kind == "maxwell2d_tm":
        nx, ny = int(_need(cfg, "nx", "backend")), int(_need(cfg, "ny", "backend"))
        Lx, Ly = float(cfg.get("Lx", 1.0)), float(cfg.get("Ly", 1.0))
        op, _ = build_maxwell_2d_tm(
            Grid2DTM(nx, ny, Lx / nx, Ly / ny, float(cfg.get("eps", 1.0)), float(cfg.get("mu", 1.0)))
        )
        op.meta.update(Lx=Lx, Ly=Ly)
        return op
    if kind == "spectral":
        return build_spectral_hamiltonian(
            int(_need(cfg, "m", "backend")), float(cfg.get("L", 1.0)),
            float(cfg.get("eps", 1.0)), float(cfg.get("mu", 1.0)),
        )
    raise ConfigError(f"unknown backend kind {kind!r}")


def domain_extent(op: SkewOperator) -> tuple[float, ...]:
    if op.kind == "maxwell2d_tm":
        return (op.meta["Lx"] if "Lx" in op.meta else op.meta["nx"] * op.meta["dx"],
                op.meta["Ly"] if "Ly" in op.meta else op.meta["ny"] * op.meta["dy"])
    return (op.meta["L"],)


def build_drift(cfg: dict) -> Drift:
    kind = cfg.get("kind", "zero")
    if kind == "zero":
        return ZeroDrift()
    if kind == "linear_damping":
        return LinearDamping(cfg.get("sigma_e", 0.0), cfg.get("sigma_m", 0.0))
    if kind == "hamiltonian_sine":
        return SineHamiltonianDrift(float(cfg.get("beta", 1.0)))
    raise ConfigError(f"unknown drift kind {kind!r} (affine and custom drifts are Python-only)")


def build_covariance(cfg: dict, op: SkewOperator) -> CovarianceSpec:
    extent = domain_extent(op)
    if "lambdas" in cfg:
        lam = np.asarray(cfg["lambdas"], dtype=float)
        from .noise import sine_modes

        return CovarianceSpec(lam, tuple(sine_modes(lam.size, extent)), label="explicit")
    return default_covariance(int(cfg.get("J", 16)), extent, float(cfg.get("decay", 2.0)))


def build_profile(cfg: dict | None, op: SkewOperator) -> NoiseProfile:
    """Profiles: ``zero``, ``constant`` {e, m}, ``sine`` {e, m, mode}.

    ``roughness`` (default 0) adds a square wave with 8 sign changes per unit
    length to the E intensity.
    """
    cfg = cfg or {"kind": "zero"}
    kind = cfg.get("kind", "zero")
    if kind == "zero":
        return NoiseProfile.zero()
    e, m = float(cfg.get("e", 0.0)), cfg.get("m", 0.0)
    rough = float(cfg.get("roughness", 0.0))
    if kind == "constant" and rough == 0.0:
        return NoiseProfile.constant(e, m)
    if kind not in ("constant", "sine"):
        raise ConfigError(f"unknown noise profile {kind!r}")
    L = domain_extent(op)[0]
    p = int(cfg.get("mode", 1))
    shape = (lambda pts: np.sin(p * np.pi * pts[:, 0] / L)) if kind == "sine" else (
        lambda pts: np.ones(pts.shape[0]))

    def jer(t, pts):
        out = e * shape(pts)
        if rough:
            out = out + rough * np.sign(np.sin(8.0 * np.pi * pts[:, 0] / L))
        return out

    def scaled(v):
        if v == 0:
            return None
        return lambda t, pts: float(v) * shape(pts)

    jmr = {k: scaled(v) for k, v in m.items()} if isinstance(m, dict) else scaled(float(m))
    return NoiseProfile(jer if (e or rough) else None, jmr, False, label=kind)


def build_u0(cfg: dict | None, op: SkewOperator) -> np.ndarray:
    """Presets ``zero``, ``single_mode`` {mode, amplitude}, ``gaussian_bump`` {center, width, amplitude}."""
    cfg = cfg or {"kind": "zero"}
    kind = cfg.get("kind", "zero")
    amp = float(cfg.get("amplitude", 1.0))
    if kind == "zero":
        return np.zeros(op.dim)
    extent = domain_extent(op)
    if kind == "single_mode":
        j = int(cfg.get("mode", 1))
        if isinstance(op, SpectralOperator):
            u = np.zeros(op.dim)
            u[j - 1] = amp
            return u
        ks = [j * np.pi / L for L in extent]
        return op.discretize(
            lambda pts: amp * np.prod([np.sin(k * pts[:, a]) for a, k in enumerate(ks)], axis=0), None
        )
    if kind == "gaussian_bump":
        center = np.asarray(cfg.get("center", [L / 2 for L in extent]), dtype=float)
        width = float(cfg.get("width", 0.1 * extent[0]))

        def bump(pts):
            r2 = np.sum((pts[:, : len(center)] - center) ** 2, axis=1)
            return amp * np.exp(-r2 / (2 * width**2))

        return op.discretize(bump, None)
    raise ConfigError(f"unknown initial condition {kind!r}")


def problem_from_config(cfg: dict) -> Problem:
    """Build a :class:`Problem` from the ``backend``/``drift``/``noise``/``u0``/``T`` sections."""
    cfg = copy.deepcopy(cfg)
    op = build_operator(_need(cfg, "backend", "config"))
    noise = cfg.get("noise", {})
    return Problem(
        op=op,
        drift=build_drift(cfg.get("drift", {"kind": "zero"})),
        covariance=build_covariance(noise, op),
        profile=build_profile(noise.get("profile"), op),
        u0=build_u0(cfg.get("u0"), op),
        T=float(_need(cfg, "T", "config")),
        config=cfg,
    )
