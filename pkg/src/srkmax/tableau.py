"""Stochastic Runge-Kutta Butcher tableaux and their structural classification.

A tableau carries the drift coefficients ``(A, b)``, the diffusion
coefficients ``(Atilde, btilde)`` and the abscissae ``c``.  The checks here
look only at ``(A, b)``: algebraic stability, the symplectic condition
``m_ij == 0`` and coercivity of ``A``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Union

import numpy as np

__all__ = [
    "ButcherTableau",
    "Coercivity",
    "TableauReport",
    "TableauError",
    "BUILTIN_NAMES",
    "builtin",
    "stability_matrix",
    "is_algebraically_stable",
    "is_symplectic",
    "check_coercivity",
    "consistency_check",
    "analyze",
    "tableau_from_dict",
    "tableau_to_dict",
    "load_tableau",
]

DEFAULT_TOL = 1e-12
SINGULAR_TOL = 1e-14


class TableauError(ValueError):
    """Malformed or unknown tableau."""


def _coef(value: Any) -> float:
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise TableauError(f"cannot parse coefficient {value!r}") from exc
    return float(value)


@dataclass(frozen=True, eq=False)
class ButcherTableau:
    """Coefficients of an s-stage stochastic Runge-Kutta method.

    ``Atilde``/``btilde`` default to ``A``/``b`` and ``c`` defaults to the
    row sums of ``A``.
    """

    A: np.ndarray
    b: np.ndarray
    Atilde: np.ndarray = None  # type: ignore[assignment]
    btilde: np.ndarray = None  # type: ignore[assignment]
    c: np.ndarray = None  # type: ignore[assignment]
    name: str = "custom"

    def __post_init__(self):
        A = np.array(self.A, dtype=float, ndmin=2)
        b = np.array(self.b, dtype=float, ndmin=1)
        Atilde = A.copy() if self.Atilde is None else np.array(self.Atilde, dtype=float, ndmin=2)
        btilde = b.copy() if self.btilde is None else np.array(self.btilde, dtype=float, ndmin=1)
        c = A.sum(axis=1) if self.c is None else np.array(self.c, dtype=float, ndmin=1)
        s = b.shape[0]
        if b.ndim != 1 or s < 1:
            raise TableauError("b must be a non-empty vector")
        for label, arr, shape in (
            ("A", A, (s, s)),
            ("Atilde", Atilde, (s, s)),
            ("btilde", btilde, (s,)),
            ("c", c, (s,)),
        ):
            if arr.shape != shape:
                raise TableauError(f"{label} has shape {arr.shape}, expected {shape}")
        for label, arr in (("A", A), ("b", b), ("Atilde", Atilde), ("btilde", btilde), ("c", c)):
            if not np.all(np.isfinite(arr)):
                raise TableauError(f"{label} has non-finite entries")
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "Atilde", Atilde)
        object.__setattr__(self, "btilde", btilde)
        object.__setattr__(self, "c", c)

    @property
    def s(self) -> int:
        return self.b.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ButcherTableau):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("A", "b", "Atilde", "btilde", "c")
        )

    def __repr__(self):
        return f"ButcherTableau(name={self.name!r}, s={self.s})"


@dataclass(frozen=True)
class Coercivity:
    """Outcome of the coercivity search.

    ``status`` is ``"coercive"``, ``"unknown"`` or ``"singular_A"``; ``K`` is
    the diagonal of the certifying matrix and ``alpha`` the constant.
    """

    status: str
    K: tuple[float, ...] | None = None
    alpha: float | None = None

    @property
    def coercive(self) -> bool:
        return self.status == "coercive"

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"status": self.status}
        if self.coercive:
            out["K"] = list(self.K)
            out["alpha"] = self.alpha
        return out


@dataclass(frozen=True)
class TableauReport:
    name: str
    stability_matrix: np.ndarray
    algebraically_stable: bool
    symplectic: bool
    coercivity: Coercivity
    consistent_weights: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "stability_matrix": self.stability_matrix.tolist(),
            "algebraically_stable": self.algebraically_stable,
            "symplectic": self.symplectic,
            "coercivity": self.coercivity.to_dict(),
            "consistent_weights": self.consistent_weights,
        }


def stability_matrix(tab: ButcherTableau) -> np.ndarray:
    """``m_ij = b_i a_ij + b_j a_ji - b_i b_j``.

    The expression is evaluated so that ``m_ij`` and ``m_ji`` perform the
    same floating-point operations, which makes the result exactly symmetric.
    """
    b = tab.b
    BA = b[:, None] * tab.A
    return (BA + BA.T) - np.outer(b, b)


def is_algebraically_stable(tab: ButcherTableau, tol: float = DEFAULT_TOL) -> bool:
    if np.any(tab.b < -tol):
        return False
    eigs = np.linalg.eigvalsh(stability_matrix(tab))
    return bool(eigs.min() >= -tol)


def is_symplectic(tab: ButcherTableau, tol: float = DEFAULT_TOL) -> bool:
    return bool(np.max(np.abs(stability_matrix(tab))) <= tol)


def _generalized_min_eig(S: np.ndarray, kdiag: np.ndarray) -> float:
    # smallest lambda with S v = lambda K v, via K^{-1/2} S K^{-1/2}
    r = 1.0 / np.sqrt(kdiag)
    return float(np.linalg.eigvalsh(r[:, None] * S * r[None, :]).min())


def check_coercivity(tab: ButcherTableau) -> Coercivity:
    """Search for ``K`` and ``alpha`` with ``u^T K A^{-1} u >= alpha u^T K u``.

    Only ``K = I`` and ``K = diag(b)`` (when ``b > 0``) are tried, so a failed
    search yields ``"unknown"`` rather than a negative verdict.
    """
    A = tab.A
    scale = max(1.0, float(np.max(np.abs(A)))) ** tab.s
    if abs(np.linalg.det(A)) < SINGULAR_TOL * scale:
        return Coercivity("singular_A")
    Ainv = np.linalg.inv(A)
    candidates = [np.ones(tab.s)]
    if np.all(tab.b > 0):
        candidates.append(tab.b.copy())
    for kdiag in candidates:
        KA = kdiag[:, None] * Ainv
        alpha = _generalized_min_eig(0.5 * (KA + KA.T), kdiag)
        if alpha > 0:
            return Coercivity("coercive", tuple(float(k) for k in kdiag), alpha)
    return Coercivity("unknown")


def consistency_check(tab: ButcherTableau, tol: float = DEFAULT_TOL) -> bool:
    return bool(abs(tab.b.sum() - 1.0) <= tol and abs(tab.btilde.sum() - 1.0) <= tol)


def analyze(tab: ButcherTableau, tol: float = DEFAULT_TOL) -> TableauReport:
    return TableauReport(
        name=tab.name,
        stability_matrix=stability_matrix(tab),
        algebraically_stable=is_algebraically_stable(tab, tol),
        symplectic=is_symplectic(tab, tol),
        coercivity=check_coercivity(tab),
        consistent_weights=consistency_check(tab, tol),
    )


_SQ3_6 = np.sqrt(3.0) / 6.0

_BUILTINS = {
    "implicit_euler": ([[1.0]], [1.0]),
    "midpoint": ([[0.5]], [1.0]),
    "explicit_euler": ([[0.0]], [1.0]),
    "gauss2": ([[0.25, 0.25 - _SQ3_6], [0.25 + _SQ3_6, 0.25]], [0.5, 0.5]),
}
BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name: str) -> ButcherTableau:
    """Named tableau with ``Atilde = A``, ``btilde = b`` and ``c`` = row sums."""
    try:
        A, b = _BUILTINS[name]
    except KeyError:
        raise TableauError(
            f"unknown tableau {name!r}; choose from {', '.join(BUILTIN_NAMES)}"
        ) from None
    return ButcherTableau(A=A, b=b, name=name)


def _matrix(rows: Any, label: str) -> list[list[float]]:
    if not isinstance(rows, list) or not all(isinstance(r, list) for r in rows):
        raise TableauError(f"{label} must be a list of rows")
    return [[_coef(v) for v in r] for r in rows]


def _vector(vals: Any, label: str) -> list[float]:
    if not isinstance(vals, list):
        raise TableauError(f"{label} must be a list")
    return [_coef(v) for v in vals]


def tableau_from_dict(d: dict, name: str = "custom") -> ButcherTableau:
    """Build a tableau from ``{s, A, b, Atilde, btilde, c}``.

    Coefficients may be numbers or strings such as ``"1/2"`` or ``"0.25"``.
    """
    if not isinstance(d, dict):
        raise TableauError("tableau document must be a JSON object")
    missing = [k for k in ("A", "b") if k not in d]
    if missing:
        raise TableauError(f"tableau missing keys: {missing}")
    tab = ButcherTableau(
        A=_matrix(d["A"], "A"),
        b=_vector(d["b"], "b"),
        Atilde=_matrix(d["Atilde"], "Atilde") if "Atilde" in d else None,
        btilde=_vector(d["btilde"], "btilde") if "btilde" in d else None,
        c=_vector(d["c"], "c") if "c" in d else None,
        name=str(d.get("name", name)),
    )
    if "s" in d and int(d["s"]) != tab.s:
        raise TableauError(f"declared s={d['s']} but coefficients have s={tab.s}")
    return tab


def tableau_to_dict(tab: ButcherTableau) -> dict:
    return {
        "name": tab.name,
        "s": tab.s,
        "A": tab.A.tolist(),
        "b": tab.b.tolist(),
        "Atilde": tab.Atilde.tolist(),
        "btilde": tab.btilde.tolist(),
        "c": tab.c.tolist(),
    }


def load_tableau(spec: Union[str, Path, dict]) -> ButcherTableau:
    """Resolve a builtin name, a JSON file path or an already parsed dict."""
    if isinstance(spec, dict):
        return tableau_from_dict(spec)
    if isinstance(spec, str) and spec in _BUILTINS:
        return builtin(spec)
    path = Path(spec)
    if not path.is_file():
        raise TableauError(f"unknown tableau {str(spec)!r}: not a builtin and no such file")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TableauError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return tableau_from_dict(doc, name=path.stem)
