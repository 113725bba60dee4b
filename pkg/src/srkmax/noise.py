"""Truncated Karhunen-Loeve sampling of the Q-Wiener process and the diffusion map.

Increments are drawn per replica from a Philox counter-based stream keyed by
``(seed, replica)``; within a stream the ``N x J`` matrix is filled in
row-major (step, mode) order, so a replica's path never depends on which
worker produced it or on what else was sampled before it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .spatial import SkewOperator

__all__ = [
    "CovarianceSpec",
    "NoiseProfile",
    "NoisePath",
    "sine_modes",
    "default_covariance",
    "gram_matrix",
    "replica_rng",
    "sample_path",
    "sample_increments",
    "coarsen",
    "DiffusionMap",
    "apply_B",
    "hs_norm_sq",
    "write_path",
    "read_path",
]

ModeFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Eigenpairs of ``Q``: ``lambdas[i]`` and point functions ``modes[i](points)``."""

    lambdas: np.ndarray
    modes: tuple[ModeFn, ...]
    label: str = "custom"

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("need at least one eigenvalue")
        if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
            raise ValueError("eigenvalues must be positive and finite")
        if len(self.modes) != lam.size:
            raise ValueError(f"{len(self.modes)} modes for {lam.size} eigenvalues")
        lam.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "modes", tuple(self.modes))

    @property
    def J(self) -> int:
        return self.lambdas.size

    @property
    def trace(self) -> float:
        return float(self.lambdas.sum())


def sine_modes(J: int, extent: Sequence[float]) -> list[ModeFn]:
    """Orthonormal Dirichlet sine modes on ``[0, L]`` or ``[0, Lx] x [0, Ly]``.

    In 2D the product modes are ordered by ``p^2 + q^2`` (ties by ``p``).
    """
    extent = [float(v) for v in extent]
    if len(extent) == 1:
        (L,) = extent
        return [_sine1(i, L) for i in range(1, J + 1)]
    Lx, Ly = extent
    side = int(np.ceil(np.sqrt(J))) + 2
    pairs = sorted(
        ((p, q) for p in range(1, side + 1) for q in range(1, side + 1)),
        key=lambda pq: (pq[0] ** 2 + pq[1] ** 2, pq[0]),
    )[:J]
    return [_sine2(p, q, Lx, Ly) for p, q in pairs]


def _sine1(i: int, L: float) -> ModeFn:
    amp, k = np.sqrt(2.0 / L), i * np.pi / L

    def mode(pts):
        return amp * np.sin(k * pts[:, 0])

    mode.__name__ = f"sin{i}"
    return mode


def _sine2(p: int, q: int, Lx: float, Ly: float) -> ModeFn:
    amp = 2.0 / np.sqrt(Lx * Ly)
    kx, ky = p * np.pi / Lx, q * np.pi / Ly

    def mode(pts):
        return amp * np.sin(kx * pts[:, 0]) * np.sin(ky * pts[:, 1])

    mode.__name__ = f"sin{p}_{q}"
    return mode


def default_covariance(J: int, extent: Sequence[float], decay: float = 2.0) -> CovarianceSpec:
    """``lambda_i = i^-decay`` with sine modes (decay 2 gives ``i^-2``)."""
    lam = np.arange(1, J + 1, dtype=float) ** (-decay)
    return CovarianceSpec(lam, tuple(sine_modes(J, extent)), label=f"sine_i^-{decay:g}")


def gram_matrix(spec: CovarianceSpec, op: SkewOperator) -> np.ndarray:
    """Discrete Gram matrix of the modes on the E slots (identity up to quadrature)."""
    V = np.array([op.discretize(mode, None)[: op.n_e] for mode in spec.modes]).T
    return op.cell * V.T @ V


@dataclass(frozen=True)
class NoiseProfile:
    """Spatial (optionally time dependent) noise intensities.

    ``Jer(t, points)`` scales the E part; ``Jmr`` is a single function for
    every H component or a dict keyed by component name.  ``None`` means
    identically zero.
    """

    Jer: Callable | None = None
    Jmr: Callable | dict | None = None
    time_dependent: bool = False
    label: str = "custom"

    @property
    def is_zero(self) -> bool:
        if self.Jer is not None:
            return False
        if isinstance(self.Jmr, dict):
            return all(f is None for f in self.Jmr.values())
        return self.Jmr is None

    @staticmethod
    def constant(e: float = 0.0, m: float | dict = 0.0) -> "NoiseProfile":
        def const(v):
            if v == 0:
                return None
            return lambda t, pts: np.full(pts.shape[0], float(v))

        jm = {k: const(v) for k, v in m.items()} if isinstance(m, dict) else const(m)
        return NoiseProfile(const(e), jm, False, label=f"constant(e={e}, m={m})")

    @staticmethod
    def zero() -> "NoiseProfile":
        return NoiseProfile(label="zero")


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Per-step KL increments; ``xi[n, i] ~ N(0, lambda_i tau)``."""

    xi: np.ndarray
    tau: float
    lambdas: np.ndarray
    seed: int | None = None
    replica: int = 0
    coarsening: int = 1

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 2 or xi.shape[1] != np.asarray(self.lambdas).size:
            raise ValueError("xi must be N x J with J matching lambdas")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)

    @property
    def N(self) -> int:
        return self.xi.shape[0]

    @property
    def J(self) -> int:
        return self.xi.shape[1]

    @property
    def T(self) -> float:
        return self.N * self.tau

    def provenance(self) -> dict:
        return {
            "seed": self.seed,
            "replica": self.replica,
            "N": self.N,
            "J": self.J,
            "tau": self.tau,
            "coarsening": self.coarsening,
            "lambdas": np.asarray(self.lambdas).tolist(),
        }


def replica_rng(seed: int, replica: int = 0) -> np.random.Generator:
    """Independent Philox stream addressed by ``(seed, replica)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replica),))
    return np.random.Generator(np.random.Philox(ss))


def sample_increments(seed: int, replica: int, N: int, tau: float, lambdas: np.ndarray) -> np.ndarray:
    z = replica_rng(seed, replica).standard_normal((N, len(lambdas)))
    return z * np.sqrt(np.asarray(lambdas) * tau)


def sample_path(rng_seed: int, N: int, tau: float, spec: CovarianceSpec, replica: int = 0) -> NoisePath:
    if N < 0:
        raise ValueError("N must be nonnegative")
    if not tau > 0:
        raise ValueError("tau must be positive")
    xi = sample_increments(rng_seed, replica, N, tau, spec.lambdas)
    return NoisePath(xi, float(tau), spec.lambdas, seed=int(rng_seed), replica=int(replica))


def coarsen(path: NoisePath, r: int) -> NoisePath:
    """Sum blocks of ``r`` consecutive increments (step ``r * tau``)."""
    r = int(r)
    if r < 1:
        raise ValueError("coarsening factor must be a positive integer")
    if path.N % r:
        raise ValueError(f"coarsening factor {r} does not divide N={path.N}")
    if r == 1:
        return path
    xi = path.xi.reshape(path.N // r, r, path.J).sum(axis=1)
    return NoisePath(
        xi, path.tau * r, path.lambdas, seed=path.seed, replica=path.replica,
        coarsening=path.coarsening * r,
    )


class DiffusionMap:
    """``B(t)`` as a ``dim x J`` matrix on a given operator.

    Column ``i`` is ``(-eps^{-1} J_e^r e_i, -mu^{-1} J_m^r e_i)`` discretized
    by the operator.  Time-independent profiles are assembled once.
    """

    def __init__(self, op: SkewOperator, spec: CovarianceSpec, profile: NoiseProfile):
        self.op, self.spec, self.profile = op, spec, profile
        self._static = None if profile.time_dependent else self._assemble(0.0)

    def _assemble(self, t: float) -> np.ndarray:
        op, prof = self.op, self.profile
        cols = np.zeros((op.dim, self.spec.J))
        if prof.is_zero:
            return cols
        jer = prof.Jer
        jmr = prof.Jmr
        for i, mode in enumerate(self.spec.modes):
            fe = None if jer is None else (lambda pts, mode=mode: jer(t, pts) * mode(pts))
            if isinstance(jmr, dict):
                fh = {
                    k: (None if f is None else (lambda pts, f=f, mode=mode: f(t, pts) * mode(pts)))
                    for k, f in jmr.items()
                }
            else:
                fh = None if jmr is None else (lambda pts, mode=mode: jmr(t, pts) * mode(pts))
            cols[:, i] = -op.discretize(fe, fh) / op.material
        return cols

    @property
    def is_zero(self) -> bool:
        return self.profile.is_zero

    def matrix(self, t: float) -> np.ndarray:
        return self._static if self._static is not None else self._assemble(t)

    def apply(self, t: float, coeffs: np.ndarray) -> np.ndarray:
        return self.matrix(t) @ coeffs

    def hs_norm_sq(self, t: float) -> float:
        Bm = self.matrix(t)
        return float(np.dot(self.spec.lambdas, self.op.norm_sq(Bm)))


def apply_B(t: float, coeffs, profile: NoiseProfile, spec: CovarianceSpec, op: SkewOperator):
    """``B(t)`` applied to a KL coefficient vector, as a field state."""
    return op.state(DiffusionMap(op, spec, profile).apply(t, np.asarray(coeffs, dtype=float)))


def hs_norm_sq(t: float, profile: NoiseProfile, spec: CovarianceSpec, op: SkewOperator) -> float:
    """``sum_i lambda_i ||B(t) e_i||_H^2``."""
    return DiffusionMap(op, spec, profile).hs_norm_sq(t)


def write_path(path: NoisePath, dest) -> Path:
    """Raw little-endian float64 increments plus ``<dest>.json`` header."""
    dest = Path(dest)
    path.xi.astype("<f8").tofile(dest)
    header = dest.with_name(dest.name + ".json")
    header.write_text(json.dumps(path.provenance(), indent=2))
    return header


def read_path(src) -> NoisePath:
    src = Path(src)
    hdr = json.loads(src.with_name(src.name + ".json").read_text())
    xi = np.fromfile(src, dtype="<f8").reshape(hdr["N"], hdr["J"])
    return NoisePath(
        xi, hdr["tau"], np.asarray(hdr["lambdas"]), seed=hdr["seed"],
        replica=hdr.get("replica", 0), coarsening=hdr.get("coarsening", 1),
    )
