import csv
import json

import numpy as np
import pytest

from srkmax.diagnostics import (
    DiagnosticError,
    DiagnosticSeries,
    canonical_form,
    divergence_drift,
    divergence_mean_drift,
    energy_growth_slope,
    energy_law_residual,
    holder_probe,
    moment_probe,
    resolvent_bound_probe,
    symplectic_residual,
    tangent_run,
    verdict,
    write_series_csv,
    write_summary_json,
)
from srkmax.harness import mc_run
from srkmax.integrator import StepperConfig, TangentFrame
from srkmax.model import LinearDamping, Problem, SineHamiltonianDrift, ZeroDrift, problem_from_config
from srkmax.noise import NoiseProfile, default_covariance
from srkmax.spatial import build_spectral_hamiltonian
from srkmax.tableau import builtin


def make(op, drift=None, profile=None, T=0.2, J=4, seed=0):
    u0 = np.random.default_rng(seed).standard_normal(op.dim)
    ext = [op.meta.get("Lx", op.meta.get("L", 1.0))]
    if op.kind == "maxwell2d_tm":
        ext = [op.meta["nx"] * op.meta["dx"], op.meta["ny"] * op.meta["dy"]]
    return Problem(op, drift or ZeroDrift(), default_covariance(J, ext), profile or NoiseProfile.zero(), u0, T)


def test_series_invariants():
    s = DiagnosticSeries("x", [0.0, 1.0], [1.0, -3.0], [0.1, 0.2])
    assert len(s) == 2 and s.worst == 3.0
    with pytest.raises(ValueError):
        DiagnosticSeries("x", [0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        DiagnosticSeries("x", [0.0], [1.0], [-0.1])


def test_energy_residual_vanishes_without_forcing(op1d):
    p = make(op1d)
    mc = mc_run(p, StepperConfig("midpoint", 0.01), replicas=2, seed=0)
    s = energy_law_residual(mc, p)
    assert s.worst <= 1e-12 * op1d.norm_sq(p.u0)


def test_energy_residual_single_replica_flag(op1d):
    p = make(op1d, profile=NoiseProfile.constant(e=1.0))
    mc = mc_run(p, StepperConfig("midpoint", 0.02), replicas=1, seed=0)
    s = energy_law_residual(mc, p)
    assert "single_replica" in s.flags and np.all(np.isnan(s.stderr[1:]) | (s.stderr[1:] == 0))


def test_energy_residual_shape_mismatch(op1d):
    p = make(op1d)
    mc = mc_run(p, StepperConfig("midpoint", 0.02), replicas=2, seed=0)
    mc.energies = mc.energies[:, :-1]
    with pytest.raises(DiagnosticError):
        energy_law_residual(mc, p)


def test_energy_residual_needs_states_for_drift(op1d):
    p = make(op1d, drift=LinearDamping(0.5))
    mc = mc_run(p, StepperConfig("midpoint", 0.02), replicas=2, seed=0)
    with pytest.raises(DiagnosticError, match="states"):
        energy_law_residual(mc, p)
    mc = mc_run(p, StepperConfig("midpoint", 0.02), replicas=2, seed=0, keep_states=True)
    s = energy_law_residual(mc, p)
    assert s.worst < 0.05 * op1d.norm_sq(p.u0)


def test_energy_growth_slope_of_conservative_run_is_zero(op1d):
    p = make(op1d)
    mc = mc_run(p, StepperConfig("midpoint", 0.02), replicas=3, seed=0)
    slope, se = energy_growth_slope(mc)
    assert abs(slope) < 1e-12 and se < 1e-12


def test_divergence_rejects_other_backends(op1d):
    p = make(op1d)
    mc = mc_run(p, StepperConfig("midpoint", 0.05), replicas=2, seed=0, keep_states=True)
    with pytest.raises(DiagnosticError):
        divergence_drift(mc, p)


@pytest.mark.parametrize("name", ["implicit_euler", "midpoint", "gauss2"])
def test_divergence_preserved(op2d, name):
    p = make(op2d, drift=LinearDamping(0.3), profile=NoiseProfile.constant(e=1.0))
    mc = mc_run(p, StepperConfig(name, 0.02), replicas=4, seed=1, keep_states=True)
    s = divergence_drift(mc, p)
    assert s.values[0] == 0.0
    assert s.worst <= 1e-12 * s.meta["scale"]


def test_divergence_mean_under_magnetic_noise(op2d):
    p = make(op2d, profile=NoiseProfile.constant(e=1.0, m=1.0))
    mc = mc_run(p, StepperConfig("midpoint", 0.02), replicas=200, seed=5, keep_states=True)
    assert divergence_drift(mc, p).worst > 1e-3
    mean, se = divergence_mean_drift(mc, p)
    live = se > 1e-10
    assert mean.shape == se.shape and live.sum() > 0
    assert np.max(np.abs(mean[~live]), initial=0.0) < 1e-12
    # z-scores over many nodes: allow for multiplicity
    assert np.max(np.abs(mean[live]) / se[live]) <= 5.0


def test_symplectic_residual_basics(opspec):
    n = opspec.dim
    assert symplectic_residual(np.eye(n)) == 0.0
    Om = canonical_form(n // 2)
    assert np.allclose(Om.T, -Om)
    # Cayley map of a Hamiltonian matrix is symplectic
    S = np.random.default_rng(0).standard_normal((n, n))
    H = Om @ (S + S.T)
    C = np.linalg.solve(np.eye(n) - 0.1 * H, np.eye(n) + 0.1 * H)
    assert symplectic_residual(TangentFrame(C, 1)) < 1e-10 * np.linalg.norm(C) ** 2
    with pytest.raises(DiagnosticError):
        symplectic_residual(np.eye(3))


def test_symplectic_residual_rejects_grid(op1d):
    with pytest.raises(DiagnosticError):
        symplectic_residual(np.eye(4), op=op1d)


def test_tangent_run_guards(op1d):
    sp_op = build_spectral_hamiltonian(4)
    with pytest.raises(DiagnosticError):
        tangent_run(make(op1d), StepperConfig("midpoint", 0.1), 3)
    with pytest.raises(DiagnosticError, match="Hamiltonian"):
        tangent_run(make(sp_op, drift=LinearDamping(0.5)), StepperConfig("midpoint", 0.1), 3)


def test_tangent_run_midpoint_symplectic():
    sp_op = build_spectral_hamiltonian(4)
    p = make(sp_op, drift=SineHamiltonianDrift(0.8), profile=NoiseProfile.constant(e=1.0, m=1.0))
    frame, u = tangent_run(p, StepperConfig("midpoint", 0.05), 20, seed=2)
    assert frame.step == 20 and u.shape == (sp_op.dim,)
    assert symplectic_residual(frame) < 1e-12
    frame_ie, _ = tangent_run(p, StepperConfig("implicit_euler", 0.05), 20, seed=2)
    assert symplectic_residual(frame_ie) > 1e-3


def test_resolvent_probe_rejects_uncertified(op1d):
    for name in ("explicit_euler", "gauss2"):
        with pytest.raises(DiagnosticError):
            resolvent_bound_probe(op1d, builtin(name), [0.1])


def test_resolvent_probe_midpoint_is_contractive(op1d):
    res = resolvent_bound_probe(op1d, builtin("midpoint"), [0.5, 0.1, 0.02], iters=200)
    assert res["max_resolvent_norm"] <= 1 + 1e-8
    assert len(res["rows"]) == 3 and res["ratio_i"] >= 1.0


def test_probes_need_replicas(op1d):
    p = make(op1d)
    mc = mc_run(p, StepperConfig("midpoint", 0.05), replicas=5, seed=0, keep_states=True)
    with pytest.raises(DiagnosticError):
        moment_probe(mc)
    with pytest.raises(DiagnosticError):
        holder_probe(mc, op1d)


def test_moment_probe_constant_without_noise(op1d):
    p = make(op1d)
    mc = mc_run(p, StepperConfig("midpoint", 0.05), replicas=30, seed=0)
    s = moment_probe(mc, 4)
    assert np.allclose(s.values, op1d.norm_sq(p.u0) ** 2, rtol=1e-12)


def test_holder_probe_bounded_across_tau():
    cfg = {"backend": {"kind": "maxwell1d", "m": 16}, "noise": {"J": 4, "profile": {"kind": "constant", "e": 1.0}},
           "u0": {"kind": "zero"}, "T": 0.2}
    p = problem_from_config(cfg)
    vals = [holder_probe(mc_run(p, StepperConfig("implicit_euler", tau), 40, seed=4, keep_states=True), p.op)
            for tau in (0.02, 0.005)]
    assert 0.5 <= vals[0] / vals[1] <= 2.0


def test_emitters(tmp_path):
    s = DiagnosticSeries("x", [0.0, 0.5], [1.0, 2.0], [0.0, 0.1])
    p = write_series_csv(s, tmp_path / "s.csv")
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["time", "value", "stderr"] and float(rows[2][1]) == 2.0
    v = verdict("a", 0.5, 1.0, unit="x")
    assert v["verdict"] == "PASS" and verdict("b", float("nan"), 1.0)["verdict"] == "FAIL"
    write_summary_json([v], tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text())[0]["unit"] == "x"
