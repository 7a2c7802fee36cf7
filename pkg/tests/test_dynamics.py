"""Time stepping, observables, test functions, and pathwise bound checks."""

import numpy as np
import pytest

from stoflock import (BlowupError, CommunicationKernel, ConfigError, Ensemble,
                      GaussianBump, PolynomialCutoff, SimConfig,
                      check_pathwise_bounds, derive_seed, kinetic_energy,
                      make_test_function, mean_velocity, refine, sample_path,
                      simulate, support_radius, tolerance_epsilon,
                      validate_gradients, variance_functional,
                      weak_form_residual)
from stoflock.dynamics import SCHEMES, step_ito, step_stratonovich_heun

CONST1 = CommunicationKernel.constant(1.0)
ZERO_K = CommunicationKernel.constant(0.0)


def path_for(cfg, seed=0):
    return sample_path(cfg.horizon, cfg.steps, seed)


# ---- config validation -----------------------------------------------------


def test_config_validation_messages():
    with pytest.raises(ConfigError, match="sigma must be >= 0"):
        SimConfig(sigma=-0.1)
    with pytest.raises(ConfigError, match="dt must be > 0"):
        SimConfig(sigma=0.1, dt=0.0)
    with pytest.raises(ConfigError, match="T must be > 0"):
        SimConfig(sigma=0.1, horizon=-1.0)
    with pytest.raises(ConfigError, match="scheme must be one of"):
        SimConfig(sigma=0.1, scheme="heun")
    with pytest.raises(ConfigError, match="divide T evenly"):
        SimConfig(sigma=0.1, dt=0.3, horizon=1.0)
    assert SCHEMES == ("ito_euler", "stratonovich_heun")
    assert SimConfig(sigma=0.1, dt=0.25, horizon=1.0).steps == 4


def test_ensemble_validation():
    with pytest.raises(ValueError):
        Ensemble(np.zeros((2, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        Ensemble(np.zeros((0, 1)), np.zeros((0, 1)))
    e = Ensemble(np.zeros((4, 3)), np.ones((4, 3)), t=2.0)
    assert e.N == 4 and e.d == 3 and e.t == 2.0


# ---- single steps ----------------------------------------------------------


def test_step_pure_transport():
    ens = Ensemble(np.array([[0.0], [1.0]]), np.array([[2.0], [-1.0]]))
    out = step_ito(ens, ZERO_K, 0.0, 0.1, 0.3)
    assert np.array_equal(out.V, ens.V)
    assert out.X == pytest.approx(ens.X + 0.1 * ens.V)
    assert out.t == pytest.approx(0.1)


def test_step_consensus_fixed_point():
    ens = Ensemble(np.array([[0.0], [1.0]]), np.array([[1.5], [1.5]]))
    for stepper in (step_ito, step_stratonovich_heun):
        out = stepper(ens, CONST1, 0.7, 0.05, -0.4)
        assert np.array_equal(out.V, ens.V)


def test_step_two_body_hand_values():
    # F = (-1, +1), sigma=0: V' = V + F dt = (0.9, -0.9)
    ens = Ensemble(np.array([[0.0], [1.0]]), np.array([[1.0], [-1.0]]))
    out = step_ito(ens, CONST1, 0.0, 0.1, 0.0)
    assert out.V == pytest.approx(np.array([[0.9], [-0.9]]), abs=1e-15)
    assert out.X == pytest.approx(np.array([[0.1], [0.9]]), abs=1e-15)


def test_heun_equals_euler_without_coupling():
    rng = np.random.default_rng(0)
    ens = Ensemble(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
    a = step_ito(ens, ZERO_K, 0.0, 0.02, 0.5)
    b = step_stratonovich_heun(ens, ZERO_K, 0.0, 0.02, 0.5)
    assert np.array_equal(a.V, b.V) and np.array_equal(a.X, b.X)


def test_step_blowup_raises():
    ens = Ensemble(np.array([[0.0]] * 2), np.array([[1e308], [-1e308]]))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(BlowupError):
            step_ito(ens, CommunicationKernel.constant(1e10), 0.0, 1.0, 0.0)


# ---- exact discrete solution (constant kernel) ------------------------------


def test_euler_matches_product_formula():
    # for constant psi every deviation from the mean picks up the same factor
    # 1 - (psi - sigma) dt - sqrt(2 sigma) dB each step, and the mean velocity
    # never moves
    rng = np.random.default_rng(1)
    n, sigma, psi = 8, 0.4, 1.3
    init = Ensemble(rng.uniform(0, 1, (n, 1)), rng.uniform(-1, 1, (n, 1)))
    cfg = SimConfig(sigma=sigma, dt=2e-3, horizon=0.5, seed=0)
    path = path_for(cfg, seed=5)
    k = CommunicationKernel.constant(psi)
    traj, obs = simulate(init, cfg, k, path)
    vbar = init.V.mean(axis=0)
    dev0 = init.V - vbar
    g = np.sqrt(2 * sigma)
    factors = 1.0 - (psi - sigma) * cfg.dt - g * path.increments
    dev_final = dev0 * np.prod(factors)
    assert traj[-1].V == pytest.approx(vbar + dev_final, abs=1e-12)
    assert obs.E[-1] == pytest.approx((dev_final ** 2).mean(), rel=1e-10)


def test_classical_alignment_rate():
    # sigma=0, psi=1: E_t = E_0 (1 - dt)^(2k), within O(dt) of e^(-2t)
    rng = np.random.default_rng(2)
    init = Ensemble(rng.uniform(0, 1, (16, 2)), rng.uniform(-1, 1, (16, 2)))
    cfg = SimConfig(sigma=0.0, dt=1e-3, horizon=1.0, seed=0)
    _, obs = simulate(init, cfg, CONST1, path_for(cfg))
    expected = obs.E[0] * np.exp(-2 * obs.times)
    rel = np.abs(obs.E / expected - 1.0)
    assert rel.max() <= 6 * cfg.horizon * cfg.dt


def test_single_particle_is_ballistic():
    init = Ensemble(np.array([[0.0, 0.0]]), np.array([[1.0, -2.0]]))
    cfg = SimConfig(sigma=0.8, dt=0.01, horizon=1.0, seed=0)
    traj, obs = simulate(init, cfg, CONST1, path_for(cfg), stride=10)
    assert np.array_equal(traj[-1].V, init.V)
    assert traj[-1].X == pytest.approx(init.V * 1.0, abs=1e-12)
    assert np.all(obs.E == 0.0)


def test_simulate_is_deterministic():
    rng = np.random.default_rng(3)
    init = Ensemble(rng.uniform(0, 1, (6, 1)), rng.uniform(-1, 1, (6, 1)))
    cfg = SimConfig(sigma=0.3, dt=1e-2, horizon=0.5, seed=0)
    k = CommunicationKernel.rational(1.0, 1.0)
    t1, o1 = simulate(init, cfg, k, path_for(cfg, 9))
    t2, o2 = simulate(init, cfg, k, path_for(cfg, 9))
    assert np.array_equal(t1[-1].V, t2[-1].V)
    assert np.array_equal(o1.E, o2.E)


def test_galilean_shift():
    rng = np.random.default_rng(4)
    init = Ensemble(rng.uniform(0, 1, (6, 1)), rng.uniform(-1, 1, (6, 1)))
    c = 2.5
    boosted = Ensemble(init.X.copy(), init.V + c)
    cfg = SimConfig(sigma=0.3, dt=1e-2, horizon=0.5, seed=0)
    p = path_for(cfg, 11)
    t1, o1 = simulate(init, cfg, CONST1, p)
    t2, o2 = simulate(boosted, cfg, CONST1, p)
    assert t2[-1].V == pytest.approx(t1[-1].V + c, abs=1e-12)
    assert t2[-1].X == pytest.approx(t1[-1].X + c * cfg.horizon, abs=1e-12)
    assert o2.E == pytest.approx(o1.E, abs=1e-12)


def test_momentum_conserved_along_trajectory():
    rng = np.random.default_rng(5)
    init = Ensemble(rng.uniform(0, 1, (32, 2)), rng.uniform(-1, 1, (32, 2)))
    cfg = SimConfig(sigma=0.5, dt=1e-3, horizon=1.0, seed=0)
    k = CommunicationKernel.rational(1.0, 1.0)
    _, obs = simulate(init, cfg, k, path_for(cfg, 13))
    drift = np.abs(obs.mean_velocity - obs.mean_velocity[0]).max()
    assert drift <= 1e-10 * (1 + np.abs(obs.mean_velocity[0]).max())


def test_simulate_grid_and_stride_validation():
    init = Ensemble(np.zeros((2, 1)), np.ones((2, 1)))
    cfg = SimConfig(sigma=0.1, dt=0.1, horizon=1.0, seed=0)
    with pytest.raises(ConfigError, match="does not match"):
        simulate(init, cfg, CONST1, sample_path(1.0, 20, 0))
    with pytest.raises(ConfigError, match="stride"):
        simulate(init, cfg, CONST1, path_for(cfg), stride=0)
    bad = Ensemble(np.zeros((2, 1)), np.ones((2, 1)))
    object.__setattr__(bad, "V", np.array([[np.nan], [1.0]]))
    with pytest.raises(ValueError, match="finite"):
        simulate(bad, cfg, CONST1, path_for(cfg))


def test_trajectory_thinning():
    init = Ensemble(np.zeros((2, 1)), np.array([[1.0], [-1.0]]))
    cfg = SimConfig(sigma=0.0, dt=0.1, horizon=1.0, seed=0)
    traj, obs = simulate(init, cfg, CONST1, path_for(cfg), stride=4)
    # grid points 0,4,8 plus the final state 10
    assert [round(e.t, 10) for e in traj] == [0.0, 0.4, 0.8, 1.0]
    assert obs.times.size == 11
    assert np.all(obs.E >= 0) and np.all(obs.kinetic >= 0)


def test_blowup_carries_step_and_time():
    rng = np.random.default_rng(6)
    init = Ensemble(rng.uniform(0, 1, (4, 1)), rng.uniform(-1, 1, (4, 1)))
    cfg = SimConfig(sigma=1e8, dt=0.25, horizon=100.0, seed=0)
    with pytest.raises(BlowupError) as exc:
        simulate(init, cfg, CONST1, path_for(cfg, 3))
    assert exc.value.step is not None and exc.value.step >= 1
    assert exc.value.time == pytest.approx((exc.value.step + 1) * cfg.dt)


# ---- observables -----------------------------------------------------------


def test_observable_hand_values():
    e2 = Ensemble(np.zeros((2, 1)), np.array([[1.0], [-1.0]]))
    assert mean_velocity(e2) == pytest.approx(np.array([0.0]))
    assert variance_functional(e2, np.zeros(1)) == pytest.approx(1.0)
    assert kinetic_energy(e2) == pytest.approx(1.0)
    assert support_radius(e2, np.zeros(1)) == pytest.approx(1.0)

    e3 = Ensemble(np.zeros((3, 1)), np.array([[0.0], [1.0], [2.0]]))
    assert variance_functional(e3, np.ones(1)) == pytest.approx(2.0 / 3.0)

    e4 = Ensemble(np.zeros((2, 2)), np.array([[3.0, 4.0], [0.0, 0.0]]))
    assert kinetic_energy(e4) == pytest.approx(12.5)
    assert support_radius(e4, np.zeros(2)) == pytest.approx(5.0)

    zero = Ensemble(np.zeros((3, 2)), np.zeros((3, 2)))
    assert kinetic_energy(zero) == 0.0
    assert support_radius(zero, np.zeros(2)) == 0.0


def test_consensus_mean_is_consensus_value():
    e = Ensemble(np.zeros((4, 2)), np.tile([0.5, -1.5], (4, 1)))
    assert mean_velocity(e) == pytest.approx(np.array([0.5, -1.5]))
    assert variance_functional(e, np.array([0.5, -1.5])) == 0.0


# ---- test functions ---------------------------------------------------------


def test_gaussian_bump_gradients():
    phi = GaussianBump(center=np.zeros(4), scale=1.2)
    assert phi.family == "gaussian_bump"
    rng = np.random.default_rng(7)
    assert validate_gradients(phi, d=2, rng=rng) <= 1e-5


def test_polynomial_cutoff_gradients():
    phi = PolynomialCutoff(center=np.zeros(2), radius=2.0)
    assert phi.family == "polynomial_with_cutoff"
    rng = np.random.default_rng(8)
    assert validate_gradients(phi, d=1, rng=rng) <= 1e-5


def test_cutoff_is_compactly_supported():
    phi = PolynomialCutoff(center=np.zeros(2), radius=1.0)
    far = np.array([[3.0]]), np.array([[0.0]])
    assert phi.value(*far) == pytest.approx(0.0)
    assert np.all(phi.grad_v(*far) == 0.0)


def test_make_test_function_dispatch():
    phi = make_test_function("gaussian_bump", center=np.zeros(2), scale=0.5)
    assert isinstance(phi, GaussianBump)
    phi2 = make_test_function("polynomial_with_cutoff", center=np.zeros(2), scale=2.0)
    assert isinstance(phi2, PolynomialCutoff)
    with pytest.raises(ConfigError):
        make_test_function("bump", center=np.zeros(2), scale=1.0)


def test_gradient_finite_difference_independent_route():
    # independent central-difference probe, separate from validate_gradients
    phi = GaussianBump(center=np.array([0.3, -0.2]), scale=0.9)
    x = np.array([[0.5]])
    v = np.array([[-0.1]])
    h = 1e-6
    gx = (phi.value(x + h, v) - phi.value(x - h, v)) / (2 * h)
    assert phi.grad_x(x, v)[0, 0] == pytest.approx(float(gx[0]), rel=1e-6)
    gv = (phi.value(x, v + h) - phi.value(x, v - h)) / (2 * h)
    assert phi.grad_v(x, v)[0, 0] == pytest.approx(float(gv[0]), rel=1e-6)
    hvv = (phi.grad_v(x, v + h)[0, 0] - phi.grad_v(x, v - h)[0, 0]) / (2 * h)
    assert phi.hess_v(x, v)[0, 0, 0] == pytest.approx(float(hvv), rel=1e-5)


# ---- weak-form residual ----------------------------------------------------


def test_residual_zero_without_motion_in_v():
    # sigma=0, psi=0: velocities frozen, v-only test function sees nothing
    rng = np.random.default_rng(9)
    init = Ensemble(rng.uniform(0, 1, (5, 1)), rng.uniform(-1, 1, (5, 1)))
    cfg = SimConfig(sigma=0.0, dt=0.01, horizon=0.5, seed=0)
    p = path_for(cfg, 21)
    traj, _ = simulate(init, cfg, ZERO_K, p)
    phi = GaussianBump(center=np.array([100.0, 0.0]), scale=1.0)
    # far-off x-center makes the bump effectively v-only flat zero
    assert weak_form_residual(traj, p, cfg, ZERO_K, phi) <= 1e-14


def test_residual_single_particle_transport_quadrature():
    init = Ensemble(np.array([[0.0]]), np.array([[1.0]]))
    phi = GaussianBump(center=np.array([0.5, 1.0]), scale=0.7)
    res = []
    for dt in (0.02, 0.01):
        cfg = SimConfig(sigma=0.0, dt=dt, horizon=1.0, seed=0)
        p = path_for(cfg, 22)
        traj, _ = simulate(init, cfg, ZERO_K, p)
        res.append(weak_form_residual(traj, p, cfg, ZERO_K, phi))
    # pure left-endpoint quadrature error of a smooth integrand: first order
    assert res[0] / res[1] == pytest.approx(2.0, rel=0.15)


def test_residual_requires_full_resolution():
    init = Ensemble(np.zeros((2, 1)), np.array([[1.0], [-1.0]]))
    cfg = SimConfig(sigma=0.1, dt=0.1, horizon=1.0, seed=0)
    p = path_for(cfg)
    traj, _ = simulate(init, cfg, CONST1, p, stride=5)
    phi = GaussianBump(center=np.zeros(2), scale=1.0)
    with pytest.raises(ConfigError, match="stride 1"):
        weak_form_residual(traj, p, cfg, CONST1, phi)


# ---- pathwise bounds -------------------------------------------------------


def test_tolerance_epsilon_formula():
    b = np.array([0.0, 0.5, -2.0, 1.0])
    assert tolerance_epsilon(1e-4, b) == pytest.approx(10 * 1e-2 * 3.0)
    assert tolerance_epsilon(1e-4, b, c=2.0) == pytest.approx(2 * 1e-2 * 3.0)


def test_pathwise_bounds_hold_on_flocking_run():
    rng = np.random.default_rng(10)
    init = Ensemble(rng.uniform(0, 1, (16, 1)), rng.uniform(-1, 1, (16, 1)))
    cfg = SimConfig(sigma=0.25, dt=1e-3, horizon=1.0, seed=0)
    _, obs = simulate(init, cfg, CommunicationKernel.constant(0.8),
                      path_for(cfg, 23))
    rep = check_pathwise_bounds(obs, CommunicationKernel.constant(0.8), 0.25)
    assert rep.kinetic.n_violations == 0
    assert rep.support.n_violations == 0
    d = rep.kinetic.as_dict()
    assert d["n_points"] == obs.times.size
    assert d["violation_fraction"] == 0.0
    assert np.isnan(d["first_violation_time"])


def test_bound_check_counterexample_fields():
    rng = np.random.default_rng(11)
    init = Ensemble(rng.uniform(0, 1, (8, 1)), rng.uniform(-1, 1, (8, 1)))
    cfg = SimConfig(sigma=0.2, dt=1e-2, horizon=1.0, seed=0)
    k = CommunicationKernel.constant(0.5)
    _, obs = simulate(init, cfg, k, path_for(cfg, 24))
    # auditing against a larger sigma than was simulated shrinks the claimed
    # envelope wherever B_t > 0, so genuine violations appear
    rep = check_pathwise_bounds(obs, k, 2.0, c_tol=1.0)
    assert rep.kinetic.n_violations > 0
    d = rep.kinetic.as_dict()
    assert np.isfinite(d["first_violation_time"])
    assert d["first_violation_lhs"] > d["first_violation_rhs"]
    assert d["max_relative_excess"] > 0


def test_heun_and_euler_converge_together():
    rng = np.random.default_rng(12)
    init = Ensemble(rng.uniform(0, 1, (8, 1)), rng.uniform(-1, 1, (8, 1)))
    gaps = []
    p = sample_path(0.5, 50, 31)
    dt = 0.01
    for _ in range(3):
        cfg_e = SimConfig(sigma=0.4, dt=dt, horizon=0.5, seed=0)
        cfg_h = SimConfig(sigma=0.4, dt=dt, horizon=0.5, seed=0,
                          scheme="stratonovich_heun")
        te, _ = simulate(init, cfg_e, CONST1, p, stride=p.steps)
        th, _ = simulate(init, cfg_h, CONST1, p, stride=p.steps)
        gaps.append(np.sqrt(((te[-1].V - th[-1].V) ** 2).sum() / init.N))
        p = refine(p)
        dt /= 2
    assert gaps[0] > gaps[-1]


def test_repr_smoke():
    cfg = SimConfig(sigma=0.1, dt=0.1, horizon=1.0, seed=0)
    assert "sigma" in repr(cfg)
    e = Ensemble(np.zeros((2, 1)), np.ones((2, 1)))
    assert "Ensemble" in repr(e)
