import numpy as np
import pytest
import scipy.sparse as sp

from srkmax.integrator import (
    BlockResolvent,
    FixedPointDivergence,
    NumericalFailure,
    Stepper,
    StepperConfig,
    StepperConfigError,
    TangentFrame,
    integrate,
    propagate_tangent,
    rk_step,
    rk_step_specialized,
)
from srkmax.model import CustomDrift, LinearDamping, Problem, ZeroDrift, problem_from_config
from srkmax.noise import NoiseProfile, default_covariance, sample_path
from srkmax.spatial import FieldState, Grid1D, SkewOperator, build_maxwell_1d, build_spectral_hamiltonian
from srkmax.tableau import ButcherTableau, builtin


def problem(op, drift=None, profile=None, J=4, T=1.0, u0=None, seed=0):
    if u0 is None:
        u0 = np.random.default_rng(seed).standard_normal(op.dim)
    cov = default_covariance(J, [op.meta.get("L", 1.0)])
    return Problem(op, drift or ZeroDrift(), cov, profile or NoiseProfile.zero(), u0, T)


@pytest.fixture
def op():
    return build_maxwell_1d(Grid1D(24, eps=1.5, mu=0.8))


def test_config_validation():
    with pytest.raises(StepperConfigError):
        StepperConfig("midpoint", 0.0)
    with pytest.raises(StepperConfigError):
        StepperConfig("midpoint", 0.1, stage_solver="newton")
    with pytest.raises(StepperConfigError):
        StepperConfig("midpoint", 0.1, specialization="implicit_euler_resolvent")
    assert StepperConfig("gauss2", 0.1).tableau == builtin("gauss2")


def test_midpoint_isometry(op):
    p = problem(op)
    cfg = StepperConfig("midpoint", 0.05)
    st = Stepper(cfg, p)
    u = p.u0
    for n in range(20):
        v = st.step(u, n * 0.05)
        assert op.norm_sq(v) == pytest.approx(op.norm_sq(u), rel=1e-12)
        u = v


def test_implicit_euler_against_dense_solve(op):
    prof = NoiseProfile.constant(e=1.0, m=0.5)
    p = problem(op, profile=prof)
    tau = 0.1
    dw = np.random.default_rng(3).standard_normal(4) * np.sqrt(tau)
    out = rk_step(StepperConfig("implicit_euler", tau), p, p.u0, 0.0, dw)
    rhs = p.u0 + p.diffusion.matrix(tau) @ dw
    expect = np.linalg.solve(np.eye(op.dim) - tau * op.dense(), rhs)
    assert np.allclose(out, expect, rtol=0, atol=1e-12)


def zero_operator(like):
    G = sp.csr_matrix((like.n_e, like.n_h))
    return SkewOperator(G, like.eps, like.mu, like.cell, like.layout, "sparse", "zero")


@pytest.mark.parametrize("tab", [
    builtin("implicit_euler"),
    builtin("midpoint"),
    builtin("gauss2"),
    ButcherTableau(A=[[0.5, 0.0], [0.25, 0.5]], b=[0.5, 0.5], Atilde=[[0.0, 0.0], [1.0, 0.0]], btilde=[0.3, 0.7]),
])
def test_zero_operator_reduces_to_increment(op, tab):
    z = zero_operator(op)
    p = problem(z, profile=NoiseProfile.constant(e=1.0, m=2.0))
    dw = np.array([0.3, -0.1, 0.2, 0.05])
    out = rk_step(StepperConfig(tab, 0.1), p, p.u0, 0.0, dw)
    assert np.allclose(out, p.u0 + p.diffusion.matrix(0.0) @ dw, rtol=0, atol=1e-14)


@pytest.mark.parametrize("name", ["implicit_euler", "midpoint"])
@pytest.mark.parametrize("drift", [LinearDamping(0.7, 0.2), CustomDrift(lambda t, x: -0.5 * np.tanh(x), 0.5)])
def test_generic_vs_specialized(op, name, drift):
    p = problem(op, drift=drift, profile=NoiseProfile.constant(e=1.0, m=0.3))
    tau = 0.02
    gen = Stepper(StepperConfig(name, tau), p)
    spec = Stepper(StepperConfig(name, tau, specialization=f"{name}_resolvent"), p)
    rng = np.random.default_rng(8)
    u = p.u0
    for n in range(100):
        dw = rng.standard_normal(4) * np.sqrt(tau)
        a, b = gen.step(u, n * tau, dw), spec.step(u, n * tau, dw)
        assert np.max(np.abs(a - b)) <= 1e-10 * max(1.0, np.max(np.abs(a)))
        u = a


def test_rk_step_specialized_picks_form(op):
    p = problem(op, drift=LinearDamping(0.5))
    for name in ("implicit_euler", "midpoint"):
        cfg = StepperConfig(name, 0.1)
        a = rk_step(cfg, p, p.u0, 0.0)
        b = rk_step_specialized(cfg, p, p.u0, 0.0)
        assert np.allclose(a, b, rtol=0, atol=1e-12)
    assert isinstance(rk_step(StepperConfig("midpoint", 0.1), p, op.state(p.u0), 0.0), FieldState)


def test_energy_conserved_over_1000_midpoint_steps(op):
    p = problem(op, T=1.0)
    traj = integrate(StepperConfig("midpoint", 1e-3, specialization="midpoint_resolvent"), p, None)
    en = traj.energies(op)
    assert len(en) == 1001
    assert np.max(np.abs(en - en[0])) <= 1e-10 * en[0]


@pytest.mark.parametrize("name", ["implicit_euler", "midpoint", "gauss2"])
def test_energy_nonincreasing_for_stable_tableaux(op, name):
    p = problem(op, T=1.0)
    en = integrate(StepperConfig(name, 0.05), p, None).energies(op)
    assert np.all(en[1:] <= en[:-1] * (1 + 1e-12))


def test_fixed_point_matches_direct(op):
    sigma = 0.6 / op.eps[0]
    custom = CustomDrift(lambda t, x: np.concatenate([-sigma * x[: op.n_e], 0 * x[op.n_e :]]), sigma)
    pc = problem(op, drift=custom, profile=NoiseProfile.constant(e=1.0))
    pd = problem(op, drift=LinearDamping(0.6), profile=NoiseProfile.constant(e=1.0))
    dw = np.full(4, 0.1)
    for name in ("implicit_euler", "midpoint", "gauss2"):
        a = rk_step(StepperConfig(name, 0.1, stage_solver="fixed_point"), pc, pc.u0, 0.0, dw)
        b = rk_step(StepperConfig(name, 0.1, stage_solver="direct_linear"), pd, pd.u0, 0.0, dw)
        assert np.max(np.abs(a - b)) <= 1e-10


def test_fixed_point_converges_linearly(op):
    p = problem(op, drift=CustomDrift(lambda t, x: -0.5 * np.tanh(x), 0.5))
    st = Stepper(StepperConfig("gauss2", 0.2), p)
    st.step(p.u0 * 3, 0.0)
    res = np.array(st.last_residuals)
    assert res.size >= 4 and res[-1] <= 1e-12 * 10
    rates = res[1:] / res[:-1]
    assert np.all(rates <= st.contraction * (1 + 1e-6))


def test_contraction_precondition(op):
    p = problem(op, drift=CustomDrift(lambda t, x: -np.tanh(x), 10.0))
    with pytest.raises(StepperConfigError):
        Stepper(StepperConfig("implicit_euler", 0.2), p)


def test_fixed_point_divergence_reported_with_step(op):
    # declared Lipschitz constant is a lie, so the stage map expands
    p = problem(op, drift=CustomDrift(lambda t, x: 40.0 * x, 0.1), T=0.5)
    with pytest.raises(FixedPointDivergence) as info:
        integrate(StepperConfig("implicit_euler", 0.1, stage_solver="fixed_point"), p, None)
    assert info.value.step == 0
    assert isinstance(info.value, NumericalFailure)


def test_integrate_empty_path_and_tau_mismatch(op):
    p = problem(op, T=1.0)
    spec = default_covariance(4, [1.0])
    empty = sample_path(1, 0, 0.1, spec)
    traj = integrate(StepperConfig("midpoint", 0.1), p, empty)
    assert len(traj) == 1 and np.array_equal(traj.states[0], p.u0)
    with pytest.raises(StepperConfigError, match="N\\*tau == T"):
        integrate(StepperConfig("midpoint", 0.1), p, sample_path(1, 7, 0.1, spec))
    with pytest.raises(StepperConfigError):
        integrate(StepperConfig("midpoint", 0.1), p, sample_path(1, 5, 0.2, spec))


def test_integrate_bitwise_reproducible_and_thinning(op):
    p = problem(op, drift=LinearDamping(0.3), profile=NoiseProfile.constant(e=1.0))
    path = sample_path(4, 100, 0.01, p.covariance)
    a = integrate(StepperConfig("midpoint", 0.01), p, path)
    b = integrate(StepperConfig("midpoint", 0.01), p, path)
    assert np.array_equal(a.states, b.states)
    thin = integrate(StepperConfig("midpoint", 0.01), p, path, thin=10)
    assert len(thin) == 11 and np.array_equal(thin.states, a.states[::10])


def test_spectral_midpoint_second_order():
    sp_op = build_spectral_hamiltonian(4, eps=1.0, mu=1.0)
    p = problem(sp_op, T=1.0)
    exact = sp_op.propagator(1.0, p.u0)
    errs = []
    for N in (20, 40, 80):
        traj = integrate(StepperConfig("midpoint", 1.0 / N), p, None)
        errs.append(np.sqrt(sp_op.norm_sq(traj.states[-1] - exact)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 2.0) < 0.1)


def test_batched_step_equals_columns(op):
    p = problem(op, drift=LinearDamping(0.4), profile=NoiseProfile.constant(e=1.0))
    st = Stepper(StepperConfig("gauss2", 0.05), p)
    rng = np.random.default_rng(0)
    U = rng.standard_normal((op.dim, 3))
    dW = rng.standard_normal((4, 3))
    out = st.step(U, 0.0, dW)
    for k in range(3):
        assert np.allclose(out[:, k], st.step(U[:, k], 0.0, dW[:, k]), rtol=0, atol=1e-13)


def test_tangent_identity_and_noise_independence():
    sp_op = build_spectral_hamiltonian(4)
    p = problem(sp_op, profile=NoiseProfile.constant(e=1.0, m=1.0))
    cfg = StepperConfig("midpoint", 0.1)
    frame = TangentFrame.identity(sp_op.dim)
    assert frame.step == 0 and np.array_equal(frame.matrix, np.eye(sp_op.dim))
    f1, _ = propagate_tangent(cfg, p, frame, p.u0, 0.0, np.ones(4))
    f2, _ = propagate_tangent(cfg, p, frame, p.u0, 0.0, -np.ones(4))
    assert f1.step == 1 and np.array_equal(f1.matrix, f2.matrix)


def test_tangent_is_cayley_matrix():
    sp_op = build_spectral_hamiltonian(5, eps=1.0, mu=2.0)
    p = problem(sp_op)
    tau = 0.2
    frame, _ = propagate_tangent(StepperConfig("midpoint", tau), p, TangentFrame.identity(sp_op.dim), p.u0, 0.0)
    M = sp_op.dense()
    I = np.eye(sp_op.dim)
    cayley = np.linalg.solve(I - 0.5 * tau * M, I + 0.5 * tau * M)
    assert np.allclose(frame.matrix, cayley, rtol=0, atol=1e-12)


def test_tangent_matches_finite_differences():
    from srkmax.model import SineHamiltonianDrift

    sp_op = build_spectral_hamiltonian(3)
    p = problem(sp_op, drift=SineHamiltonianDrift(0.7))
    cfg = StepperConfig("gauss2", 0.1)
    frame, _ = propagate_tangent(cfg, p, TangentFrame.identity(sp_op.dim), p.u0, 0.0)
    h = 1e-6
    fd = np.column_stack([
        (rk_step(cfg, p, p.u0 + h * e, 0.0) - rk_step(cfg, p, p.u0 - h * e, 0.0)) / (2 * h)
        for e in np.eye(sp_op.dim)
    ])
    assert np.allclose(frame.matrix, fd, atol=1e-7)


def test_block_resolvent_adjoint(op):
    tab = builtin("gauss2")
    R = BlockResolvent(op, tab.A, 0.3)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((2, 2 * op.dim))
    w = np.tile(op.weights, 2)
    assert np.dot(w * R.solve(x), y) == pytest.approx(np.dot(w * x, R.solve_adjoint(y)), rel=1e-11)
    assert R.residual(R.solve(x), x) < 1e-12


def test_config_driven_run():
    cfg = {"backend": {"kind": "maxwell1d", "m": 8}, "drift": {"kind": "linear_damping", "sigma_e": 1.0},
           "noise": {"J": 3, "profile": {"kind": "constant", "e": 1.0}}, "u0": {"kind": "single_mode"}, "T": 0.5}
    p = problem_from_config(cfg)
    traj = integrate(StepperConfig("implicit_euler", 0.05), p, sample_path(0, 10, 0.05, p.covariance))
    assert traj.times[-1] == pytest.approx(0.5) and np.all(np.isfinite(traj.states))
