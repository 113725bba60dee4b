"""Discrete skew-adjoint Maxwell operators.

Every backend has the block form::

    M = [[0,          eps^{-1} G],
         [-mu^{-1} G^T,        0]]

acting on ``u = (E, H)``.  With one cell volume ``w`` shared by all slots the
weight matrix ``W = w diag(eps, mu)`` gives ``W M = w [[0, G], [-G^T, 0]]``,
which is skew-symmetric, so ``<Mu, u>_H = 0`` holds to rounding for every
backend.  The shifted system ``(I - gamma (M - Sigma)) x = r`` with a
nonnegative diagonal damping ``Sigma`` reduces to the SPD Schur complement::

    (eps D_E + gamma^2 G (mu D_H)^{-1} G^T) x_E = eps r_E + gamma G D_H^{-1} r_H

where ``D_E = 1 + gamma Sigma_E`` and ``D_H = 1 + gamma Sigma_H``.  It is
tridiagonal in 1D, a sparse five-point system in 2D and diagonal for the
spectral backend.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Component",
    "Layout",
    "FieldState",
    "LayoutError",
    "Grid1D",
    "Grid2DTM",
    "SkewOperator",
    "build_maxwell_1d",
    "build_maxwell_2d_tm",
    "build_spectral_hamiltonian",
    "inner_product",
    "energy",
    "solve_shifted",
    "write_state_csv",
    "write_state_binary",
    "read_state_binary",
]


class LayoutError(ValueError):
    """Field states with incompatible layouts were combined."""


@dataclass(frozen=True)
class Component:
    """One named block of unknowns, e.g. ``E`` or ``Hx``.

    ``field`` is ``"E"`` or ``"H"``; ``coords`` holds one row of physical
    coordinates (or mode indices for the spectral backend) per slot.
    """

    name: str
    field: str
    coords: np.ndarray

    @property
    def size(self) -> int:
        return self.coords.shape[0]


class Layout:
    """Ordered components of a flat state vector."""

    def __init__(self, components: Sequence[Component], coord_names: Sequence[str]):
        self.components = tuple(components)
        self.coord_names = tuple(coord_names)
        offsets = [0]
        for c in self.components:
            offsets.append(offsets[-1] + c.size)
        self.offsets = tuple(offsets)
        self.size = offsets[-1]
        self.n_e = sum(c.size for c in self.components if c.field == "E")

    def slice(self, name: str) -> slice:
        for k, c in enumerate(self.components):
            if c.name == name:
                return slice(self.offsets[k], self.offsets[k + 1])
        raise KeyError(name)

    @property
    def e_slice(self) -> slice:
        return slice(0, self.n_e)

    @property
    def h_slice(self) -> slice:
        return slice(self.n_e, self.size)

    def describe(self) -> dict:
        return {
            "size": self.size,
            "coord_names": list(self.coord_names),
            "components": [
                {"name": c.name, "field": c.field, "offset": self.offsets[k], "count": c.size}
                for k, c in enumerate(self.components)
            ],
        }

    def __eq__(self, other):
        if not isinstance(other, Layout):
            return NotImplemented
        return self.describe() == other.describe() and all(
            np.array_equal(a.coords, b.coords) for a, b in zip(self.components, other.components)
        )

    def __hash__(self):
        return hash(json.dumps(self.describe(), sort_keys=True))


@dataclass(frozen=True, eq=False)
class FieldState:
    """Flat ``(E, H)`` vector with its layout and inner-product weights."""

    data: np.ndarray
    layout: Layout
    weights: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != (self.layout.size,):
            raise LayoutError(f"data has shape {data.shape}, layout expects ({self.layout.size},)")
        if not np.all(np.isfinite(data)):
            raise ValueError("field state has non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def E(self) -> np.ndarray:
        return self.data[self.layout.e_slice]

    @property
    def H(self) -> np.ndarray:
        return self.data[self.layout.h_slice]

    def component(self, name: str) -> np.ndarray:
        return self.data[self.layout.slice(name)]

    def with_data(self, data: np.ndarray) -> "FieldState":
        return FieldState(data, self.layout, self.weights)


def _check_same(u: FieldState, v: FieldState):
    if u.layout is not v.layout and u.layout != v.layout:
        raise LayoutError("field states have different layouts")
    if u.weights is not v.weights and not np.array_equal(u.weights, v.weights):
        raise LayoutError("field states carry different inner-product weights")


def inner_product(u: FieldState, v: FieldState) -> float:
    """Quadrature of ``int eps E.E' + mu H.H'`` over the domain."""
    _check_same(u, v)
    return float(np.dot(u.weights * u.data, v.data))


def energy(u: FieldState) -> float:
    return inner_product(u, u)


# ---------------------------------------------------------------------------
# shifted-solve kernels


class _BandedSchur:
    """Tridiagonal SPD Schur complement, Cholesky-factored."""

    def __init__(self, S: sp.spmatrix):
        S = sp.dia_matrix(S)
        n = S.shape[0]
        ab = np.zeros((2, n))
        ab[1] = S.diagonal(0)
        ab[0, 1:] = S.diagonal(1)
        self._cb = sla.cholesky_banded(ab, lower=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return sla.cho_solve_banded((self._cb, False), rhs)


class _SparseSchur:
    def __init__(self, S: sp.spmatrix):
        self._lu = spla.splu(sp.csc_matrix(S))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.ascontiguousarray(rhs))


class _DiagSchur:
    def __init__(self, S: sp.spmatrix):
        self._d = np.asarray(sp.csr_matrix(S).diagonal())

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return rhs / (self._d if rhs.ndim == 1 else self._d[:, None])


_SCHUR = {"banded": _BandedSchur, "sparse": _SparseSchur, "diagonal": _DiagSchur}


class ShiftedSolver:
    """Factorized ``(I - gamma (M - Sigma))^{-1}`` for fixed ``gamma`` and ``Sigma``."""

    def __init__(self, op: "SkewOperator", gamma: float, sigma: np.ndarray | None = None):
        self.op = op
        self.gamma = float(gamma)
        n_e = op.n_e
        sig = np.zeros(op.dim) if sigma is None else np.asarray(sigma, dtype=float)
        if sig.shape != (op.dim,) or np.any(sig < 0):
            raise ValueError("damping must be a nonnegative vector of state dimension")
        self.d_e = 1.0 + self.gamma * sig[:n_e]
        self.d_h = 1.0 + self.gamma * sig[n_e:]
        if np.any(self.d_e <= 0) or np.any(self.d_h <= 0):
            raise ValueError("shifted damping produces a non-positive diagonal")
        G = op.G
        S = sp.diags(op.eps * self.d_e) + self.gamma**2 * (
            G @ sp.diags(1.0 / (op.mu * self.d_h)) @ G.T
        )
        self._schur = _SCHUR[op.structure](S)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        op, g = self.op, self.gamma
        n_e = op.n_e
        r_e, r_h = rhs[:n_e], rhs[n_e:]
        col = (slice(None),) if rhs.ndim == 1 else (slice(None), None)
        d_h = self.d_h[col]
        x_e = self._schur.solve(op.eps[col] * r_e + g * (op.G @ (r_h / d_h)))
        x_h = (r_h - g * (op.Gt @ x_e) / op.mu[col]) / d_h
        return np.concatenate([x_e, x_h], axis=0)


# ---------------------------------------------------------------------------
# operator


class SkewOperator:
    """Discrete Maxwell operator with weighted inner product and shifted solves.

    Parameters
    ----------
    G : sparse matrix, shape (n_e, n_h)
        Coupling block; the E row of ``M`` is ``eps^{-1} G``.
    eps, mu : arrays
        Material values on the E and H slots.
    cell : float
        Common quadrature weight of every slot.
    layout : Layout
    structure : {"banded", "sparse", "diagonal"}
        Selects the Schur-complement factorization.
    """

    def __init__(self, G, eps, mu, cell: float, layout: Layout, structure: str, kind: str, meta=None):
        self.G = sp.csr_matrix(G)
        self.Gt = sp.csr_matrix(self.G.T)
        self.n_e, self.n_h = self.G.shape
        self.dim = self.n_e + self.n_h
        self.eps = np.broadcast_to(np.asarray(eps, dtype=float), (self.n_e,)).copy()
        self.mu = np.broadcast_to(np.asarray(mu, dtype=float), (self.n_h,)).copy()
        if np.any(self.eps <= 0) or np.any(self.mu <= 0):
            raise ValueError("eps and mu must be positive")
        if layout.size != self.dim or layout.n_e != self.n_e:
            raise LayoutError("layout does not match operator dimension")
        self.cell = float(cell)
        self.layout = layout
        self.structure = structure
        self.kind = kind
        self.meta = dict(meta or {})
        self.material = np.concatenate([self.eps, self.mu])
        self.weights = self.cell * self.material
        self._solvers: dict[tuple, ShiftedSolver] = {}
        for a in (self.eps, self.mu, self.material, self.weights):
            a.setflags(write=False)

    def __repr__(self):
        return f"{type(self).__name__}(kind={self.kind!r}, dim={self.dim})"

    # state helpers

    def state(self, data=None) -> FieldState:
        data = np.zeros(self.dim) if data is None else data
        return FieldState(np.asarray(data, dtype=float), self.layout, self.weights)

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return x[: self.n_e], x[self.n_e :]

    # linear algebra

    def apply(self, x):
        """``M x`` for a state, a vector, or a matrix with one state per column."""
        if isinstance(x, FieldState):
            return self.state(self.apply(x.data))
        col = (slice(None),) if x.ndim == 1 else (slice(None), None)
        x_e, x_h = x[: self.n_e], x[self.n_e :]
        return np.concatenate(
            [(self.G @ x_h) / self.eps[col], -(self.Gt @ x_e) / self.mu[col]], axis=0
        )

    __call__ = apply

    def inner(self, x: np.ndarray, y: np.ndarray):
        """Weighted inner product of arrays; columnwise for 2-D input."""
        w = self.weights if x.ndim == 1 else self.weights[:, None]
        return np.sum(w * x * y, axis=0)

    def norm_sq(self, x: np.ndarray):
        return self.inner(x, x)

    def dense(self) -> np.ndarray:
        return self.apply(np.eye(self.dim))

    def weight_matrix(self) -> np.ndarray:
        return np.diag(self.weights)

    def graph_norm_sq(self, x: np.ndarray, k: int = 1):
        """``||x||^2 + ||M^k x||^2`` with the discrete operator (backend dependent)."""
        y = x
        for _ in range(k):
            y = self.apply(y)
        return self.norm_sq(x) + self.norm_sq(y)

    def shifted_solver(self, gamma: float, sigma: np.ndarray | None = None) -> ShiftedSolver:
        """Factorization of ``I - gamma (M - diag(sigma))``; cached per argument."""
        key = (float(gamma), None if sigma is None else np.asarray(sigma, dtype=float).tobytes())
        solver = self._solvers.get(key)
        if solver is None:
            solver = ShiftedSolver(self, gamma, sigma)
            self._solvers[key] = solver
        return solver

    def solve_shifted(self, gamma: float, rhs, sigma: np.ndarray | None = None):
        if isinstance(rhs, FieldState):
            return self.state(self.solve_shifted(gamma, rhs.data, sigma))
        if gamma == 0 and sigma is None:
            return np.array(rhs, dtype=float)
        return self.shifted_solver(gamma, sigma).solve(rhs)

    # discretization of continuous fields

    def discretize(self, fe: Callable | None, fh: Callable | dict | None) -> np.ndarray:
        """Discrete field from point functions ``f(points) -> values``.

        ``fh`` may be a dict keyed by H component name.  Staggered backends
        sample at the slot coordinates.
        """
        out = np.zeros(self.dim)
        for k, c in enumerate(self.layout.components):
            f = fe if c.field == "E" else (fh.get(c.name) if isinstance(fh, dict) else fh)
            if f is None:
                continue
            out[self.layout.offsets[k] : self.layout.offsets[k + 1]] = f(c.coords)
        return out


class SpectralOperator(SkewOperator):
    """Sine/cosine mode backend with the exact mode-wise semigroup."""

    def __init__(self, m: int, L: float, eps: float, mu: float, n_quad: int | None = None):
        j = np.arange(1, m + 1)
        self.k = j * np.pi / L
        self.L = float(L)
        idx = j[:, None].astype(float)
        layout = Layout(
            [Component("E", "E", idx), Component("H", "H", idx.copy())], coord_names=("mode",)
        )
        super().__init__(
            sp.diags(self.k), eps, mu, 1.0, layout, "diagonal", "spectral",
            meta={"m": m, "L": L, "eps": eps, "mu": mu},
        )
        self.omega = self.k / np.sqrt(eps * mu)
        nq = n_quad or max(4 * m + 64, 256)
        x, w = np.polynomial.legendre.leggauss(nq)
        self._qx = 0.5 * self.L * (x + 1.0)
        self._qw = 0.5 * self.L * w
        self.n_quad = nq

    def sine_basis(self, x: np.ndarray) -> np.ndarray:
        return np.sqrt(2.0 / self.L) * np.sin(np.outer(self.k, np.asarray(x, dtype=float)))

    def cosine_basis(self, x: np.ndarray) -> np.ndarray:
        return np.sqrt(2.0 / self.L) * np.cos(np.outer(self.k, np.asarray(x, dtype=float)))

    def to_physical(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        e, h = self.split(u)
        return e @ self.sine_basis(x), h @ self.cosine_basis(x)

    def discretize(self, fe, fh) -> np.ndarray:
        """L2 projection onto the modes by Gauss-Legendre quadrature."""
        out = np.zeros(self.dim)
        pts = self._qx[:, None]
        if fe is not None:
            out[: self.n_e] = self.sine_basis(self._qx) @ (self._qw * fe(pts))
        if isinstance(fh, dict):
            fh = fh.get("H")
        if fh is not None:
            out[self.n_e :] = self.cosine_basis(self._qx) @ (self._qw * fh(pts))
        return out

    def propagator(self, t: float, x: np.ndarray) -> np.ndarray:
        """Exact ``exp(t M) x`` as independent 2x2 rotations per mode."""
        e, h = self.split(x)
        col = (slice(None),) if x.ndim == 1 else (slice(None), None)
        wt = self.omega[col] * t
        cs, sn = np.cos(wt), np.sin(wt)
        r = np.sqrt(self.mu / self.eps)[col]
        return np.concatenate([cs * e + r * sn * h, cs * h - sn * e / r], axis=0)


# ---------------------------------------------------------------------------
# builders


@dataclass(frozen=True)
class Grid1D:
    """Interval ``[0, L]`` with ``m`` interior E nodes.

    ``eps`` is given per E node (or as a scalar), ``mu`` per H half-node.
    """

    m: int
    L: float = 1.0
    eps: float | Sequence[float] = 1.0
    mu: float | Sequence[float] = 1.0

    def __post_init__(self):
        if int(self.m) < 2:
            raise ValueError("Grid1D needs m >= 2")
        if not self.L > 0:
            raise ValueError("Grid1D needs L > 0")
        if np.any(np.asarray(self.eps) <= 0) or np.any(np.asarray(self.mu) <= 0):
            raise ValueError("eps and mu must be positive")

    @property
    def dx(self) -> float:
        return self.L / (self.m + 1)


@dataclass(frozen=True)
class Grid2DTM:
    nx: int
    ny: int
    dx: float
    dy: float
    eps: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("Grid2DTM needs nx, ny >= 3")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("Grid2DTM spacings must be positive")
        if self.eps <= 0 or self.mu <= 0:
            raise ValueError("eps and mu must be positive")


def build_maxwell_1d(grid: Grid1D) -> SkewOperator:
    """Staggered 1D operator with PEC ends.

    E lives on interior nodes ``x_1..x_m`` (the boundary values are zero and
    eliminated), H on half nodes ``x_{1/2}..x_{m+1/2}``.  The system is
    ``E_t = -eps^{-1} dH/dx``, ``H_t = -mu^{-1} dE/dx``.
    """
    m, dx = int(grid.m), grid.dx
    # (D_h H)_i = (H_{i+1/2} - H_{i-1/2}) / dx
    D_h = sp.diags([-np.ones(m), np.ones(m)], [0, 1], shape=(m, m + 1)) / dx
    x_e = dx * np.arange(1, m + 1)
    x_h = dx * (np.arange(m + 1) + 0.5)
    layout = Layout(
        [Component("E", "E", x_e[:, None]), Component("H", "H", x_h[:, None])], coord_names=("x",)
    )
    eps = np.broadcast_to(np.asarray(grid.eps, dtype=float), (m,))
    mu = np.broadcast_to(np.asarray(grid.mu, dtype=float), (m + 1,))
    return SkewOperator(
        -D_h, eps, mu, dx, layout, "banded", "maxwell1d",
        meta={"m": m, "L": grid.L, "dx": dx},
    )


def _diff(n: int, h: float) -> sp.csr_matrix:
    """(n+1) x n difference from cell values to faces with zero ghosts."""
    return sp.csr_matrix(sp.diags([np.ones(n), -np.ones(n)], [0, -1], shape=(n + 1, n)) / h)


class Maxwell2DTM(SkewOperator):
    """TM operator: ``E_z`` at cell centres, ``H_x``/``H_y`` on faces.

    ``H_x`` sits on horizontal faces ``(x_{i+1/2}, y_j)``, ``H_y`` on vertical
    faces ``(x_i, y_{j+1/2})`` and the divergence of ``mu H`` lives on the
    ``(nx+1) x (ny+1)`` nodes.  ``E_z`` outside the domain is zero (PEC), which
    makes ``div_h curl_h = kron(d_x, d_y) - kron(d_x, d_y) = 0``.
    """

    def __init__(self, grid: Grid2DTM):
        nx, ny, dx, dy = grid.nx, grid.ny, grid.dx, grid.dy
        dxm, dym = _diff(nx, dx), _diff(ny, dy)
        Ix, Iy = sp.identity(nx), sp.identity(ny)
        # curl_h(E_z z) = (dE/dy, -dE/dx)
        self.curl = sp.csr_matrix(sp.vstack([sp.kron(Ix, dym), -sp.kron(dxm, Iy)]))
        self.div = sp.csr_matrix(
            sp.hstack([sp.kron(dxm, sp.identity(ny + 1)), sp.kron(sp.identity(nx + 1), dym)])
        )
        xc = (np.arange(nx) + 0.5) * dx
        yc = (np.arange(ny) + 0.5) * dy
        xn = np.arange(nx + 1) * dx
        yn = np.arange(ny + 1) * dy
        grid_pts = lambda xs, ys: np.stack(np.meshgrid(xs, ys, indexing="ij"), -1).reshape(-1, 2)
        layout = Layout(
            [
                Component("Ez", "E", grid_pts(xc, yc)),
                Component("Hx", "H", grid_pts(xc, yn)),
                Component("Hy", "H", grid_pts(xn, yc)),
            ],
            coord_names=("x", "y"),
        )
        self.grid = grid
        self.node_shape = (nx + 1, ny + 1)
        super().__init__(
            self.curl.T, grid.eps, grid.mu, dx * dy, layout, "sparse", "maxwell2d_tm",
            meta={"nx": nx, "ny": ny, "dx": dx, "dy": dy},
        )

    def divergence(self, x: np.ndarray) -> np.ndarray:
        """``div_h(mu H)`` on the nodes, one column per state for 2-D input."""
        h = x[self.n_e :]
        mu = self.mu if x.ndim == 1 else self.mu[:, None]
        return self.div @ (mu * h)

    def curl_of(self, ez: np.ndarray) -> np.ndarray:
        return self.curl @ ez


def build_maxwell_2d_tm(grid: Grid2DTM) -> tuple[Maxwell2DTM, Callable[[np.ndarray], np.ndarray]]:
    op = Maxwell2DTM(grid)
    return op, op.divergence


def build_spectral_hamiltonian(m: int, L: float = 1.0, eps: float = 1.0, mu: float = 1.0) -> SpectralOperator:
    if m < 1:
        raise ValueError("need at least one mode")
    if eps <= 0 or mu <= 0:
        raise ValueError("eps and mu must be positive constants")
    return SpectralOperator(int(m), float(L), float(eps), float(mu))


def solve_shifted(op: SkewOperator, gamma: float, rhs):
    """``x`` with ``(I - gamma M) x = rhs``."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return op.solve_shifted(gamma, rhs)


# ---------------------------------------------------------------------------
# snapshots


def write_state_csv(u: FieldState, path) -> None:
    """Rows ``index, component, <coords...>, value``."""
    import csv

    layout = u.layout
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "component", *layout.coord_names, "value"])
        for k, c in enumerate(layout.components):
            base = layout.offsets[k]
            for i in range(c.size):
                w.writerow([base + i, c.name, *(repr(float(v)) for v in c.coords[i]), repr(float(u.data[base + i]))])


def write_state_binary(u: FieldState, path) -> Path:
    """Little-endian float64 payload plus ``<path>.json`` layout sidecar."""
    path = Path(path)
    u.data.astype("<f8").tofile(path)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"dtype": "<f8", "layout": u.layout.describe()}, indent=2))
    return sidecar


def read_state_binary(path, op: SkewOperator) -> FieldState:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    if meta["layout"] != op.layout.describe():
        raise LayoutError(f"{path}: snapshot layout does not match operator")
    return op.state(np.fromfile(path, dtype="<f8"))
