import numpy as np
import pytest

from srkmax.harness import (
    ConvergenceReport,
    MCResult,
    RunConfig,
    block_increments,
    convergence_study,
    convergence_studies,
    default_config,
    fit_slope,
    load_config,
    mc_run,
    read_report_csv,
    save_config,
    write_report,
)
from srkmax.integrator import Stepper, StepperConfig, StepperConfigError, integrate_increments
from srkmax.model import ConfigError, problem_from_config
from srkmax.tableau import ButcherTableau


def small_problem(**over):
    cfg = default_config()
    cfg["backend"]["m"] = 12
    cfg["noise"]["J"] = 4
    cfg["T"] = 0.25
    cfg.update(over)
    return problem_from_config(cfg)


def test_single_replica_matches_direct_integration():
    p = small_problem()
    cfg = StepperConfig("midpoint", 0.025)
    mc = mc_run(p, cfg, replicas=1, seed=9, keep_states=True)
    xi = block_increments(p, 9, 0, 1, 10, 0.025)
    traj = integrate_increments(Stepper(cfg, p), p.u0[:, None], xi, 10)
    assert np.array_equal(mc.states[0], traj.states[:, :, 0])
    assert isinstance(mc, MCResult) and mc.replicas == 1


def test_worker_count_does_not_change_results():
    p = small_problem()
    cfg = StepperConfig("implicit_euler", 0.025)
    a = mc_run(p, cfg, replicas=60, seed=4, workers=1)
    b = mc_run(p, cfg, replicas=60, seed=4, workers=4)
    assert np.array_equal(a.energies, b.energies)


def test_replica_prefix_is_stable():
    p = small_problem()
    cfg = StepperConfig("midpoint", 0.025)
    a = mc_run(p, cfg, replicas=30, seed=4)
    b = mc_run(p, cfg, replicas=60, seed=4)
    assert np.array_equal(a.energies, b.energies[:30])


def test_stderr_shrinks_with_replicas():
    p = small_problem()
    cfg = StepperConfig("midpoint", 0.025)
    se1 = mc_run(p, cfg, replicas=400, seed=1).energy_stderr()[-1]
    se2 = mc_run(p, cfg, replicas=800, seed=2).energy_stderr()[-1]
    assert abs(se2 / se1 - 1 / np.sqrt(2)) < 0.2 / np.sqrt(2)


def test_tau_must_divide_T():
    p = small_problem()
    with pytest.raises(StepperConfigError, match="N\\*tau == T"):
        mc_run(p, StepperConfig("midpoint", 0.1), replicas=1, seed=0)


def test_fit_slope_exact():
    taus = [0.1, 0.05, 0.025]
    slope, icpt = fit_slope(taus, [3 * t**1.5 for t in taus])
    assert slope == pytest.approx(1.5, abs=1e-12) and 2**icpt == pytest.approx(3.0)


def test_config_round_trip(tmp_path):
    cfg = RunConfig(default_config())
    path = save_config(cfg, tmp_path / "c.json")
    assert load_config(path) == cfg
    assert cfg.stepper_config().tau == 0.0078125
    assert [t.name for t in cfg.study_tableaux()] == ["implicit_euler", "midpoint"]


def test_config_parse_error_has_position(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "T": 1.0,\n  "backend": {"kind": }\n}\n')
    with pytest.raises(ConfigError) as info:
        load_config(bad)
    msg = str(info.value)
    assert f"{bad}:3:" in msg and '"kind": }' in msg
    with pytest.raises(ConfigError):
        RunConfig({"T": 1.0})


def test_study_level_validation():
    p = small_problem()
    with pytest.raises(ValueError, match="3"):
        convergence_study(p, "midpoint", [0.05, 0.025], replicas=2)
    with pytest.raises(ValueError, match="decreasing"):
        convergence_study(p, "midpoint", [0.025, 0.05, 0.0125], replicas=2)
    bad = ButcherTableau(A=[[1.0]], b=[0.5], name="bad")
    with pytest.raises(ValueError, match="consistency"):
        convergence_study(p, bad, [0.05, 0.025, 0.0125], replicas=2)
    with pytest.raises(ValueError, match="exact"):
        convergence_study(p, "midpoint", [0.05, 0.025, 0.0125], replicas=2, reference="exact")


def test_self_comparison_is_zero():
    p = small_problem()
    rep = convergence_study(p, "midpoint", [0.05, 0.025, 0.0125], ref_refinement=1, replicas=3, seed=1)
    assert rep.errors[-1] < 1e-13


def test_report_files_and_slope(tmp_path):
    p = small_problem()
    rep = convergence_study(p, "implicit_euler", [0.05, 0.025, 0.0125], ref_refinement=4, replicas=10, seed=1)
    assert isinstance(rep, ConvergenceReport) and not rep.failures
    assert np.all(np.diff(rep.errors) < 0)
    csv_path, js = write_report(rep, tmp_path, stem="ie")
    cols = read_report_csv(csv_path)
    assert len(cols["tau"]) == 3 and cols["error"] == rep.errors
    assert fit_slope(cols["tau"], cols["error"])[0] == pytest.approx(rep.slope, abs=1e-12)
    assert js.exists() and rep.summary()["tableau"] == "implicit_euler"


def test_studies_share_reference():
    p = small_problem()
    levels = [0.05, 0.025, 0.0125]
    both = convergence_studies(p, ["implicit_euler", "midpoint"], levels, ref_refinement=4, replicas=6, seed=2)
    one = convergence_study(p, "midpoint", levels, ref_refinement=4, replicas=6, seed=2)
    assert both[1].errors == one.errors


def test_exact_reference_orders():
    cfg = {"backend": {"kind": "spectral", "m": 6}, "noise": {"profile": {"kind": "zero"}},
           "u0": {"kind": "single_mode", "mode": 1}, "T": 1.0}
    p = problem_from_config(cfg)
    levels = [0.02, 0.01, 0.005, 0.0025]
    mid, ie = convergence_studies(p, ["midpoint", "implicit_euler"], levels, replicas=1, reference="exact")
    assert abs(mid.slope - 2.0) < 0.1
    assert abs(ie.slope - 1.0) < 0.15
