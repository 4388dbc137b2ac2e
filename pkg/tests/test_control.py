import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepkoopman import control as C
from deepkoopman import envs
from deepkoopman import koopman as K
from deepkoopman.nets import NetParams

WAKE = envs.MeanFieldWake()


def random_qp(g, n=5, bound=1.0, cond=None):
    M = g.normal(size=(n, n))
    H = M @ M.T / n + (0.0 if cond is None else cond) * np.eye(n)
    return C.QpProblem(H, g.normal(size=n) * 3, bound)


def enumerate_box_qp(p: C.QpProblem):
    """Exact box-QP minimum by trying every (lower, free, upper) pattern."""
    n = p.f.size
    best_u, best = None, np.inf
    for pattern in itertools.product((-1, 0, 1), repeat=n):
        pattern = np.array(pattern)
        u = pattern * p.bound
        free = pattern == 0
        if free.any():
            H_ff = p.H[np.ix_(free, free)]
            rhs = -(0.5 * p.f[free] + p.H[np.ix_(free, ~free)] @ u[~free])
            try:
                u[free] = np.linalg.lstsq(H_ff, rhs, rcond=None)[0]
            except np.linalg.LinAlgError:
                continue
            if np.any(np.abs(u[free]) > p.bound + 1e-12):
                continue
        val = p.objective(u)
        if val < best:
            best, best_u = val, u
    return best_u, float(best)


def rollout_cost(A, B, c1, c_goal, u, Q, R):
    c, J = np.asarray(c1, dtype=float), 0.0
    J += Q * np.sum((c - c_goal) ** 2)
    for ut in u:
        c = A @ c + B.reshape(-1) * ut
        J += Q * np.sum((c - c_goal) ** 2) + R * ut * ut
    return J


def identity_model(A0, B0, eps=1e-12):
    n = A0.shape[0]
    cfg = K.TrainingConfig(latent_dim=n, hidden=(), tikhonov_eps=eps)
    model = K.init_model(n, 1, cfg)
    model.encoder = NetParams([np.eye(n)], [np.zeros(n)])
    model.decoder = NetParams([np.eye(n)], [np.zeros(n)])
    model.B = np.asarray(B0, dtype=float).reshape(n, 1)
    return model


class TestCondense:
    def test_no_authority(self, rng):
        cfg = C.MpcConfig(horizon=6, R=2.0)
        p = C.condense_qp(rng.normal(size=(3, 3)) * 0.3, np.zeros(3), rng.normal(size=3), np.zeros(3), cfg)
        assert np.all(p.f == 0)
        np.testing.assert_array_equal(p.H, 2.0 * np.eye(5))
        assert np.all(C.solve_box_qp(p).u == 0)

    def test_one_step_closed_form(self):
        cfg = C.MpcConfig(horizon=2, Q=1.0, R=0.0, u_max=2.0)
        p = C.condense_qp([[0.0]], [1.0], [0.0], [1.0], cfg)
        res = C.solve_box_qp(p)
        assert res.u[0] == pytest.approx(1.0, abs=1e-8)
        assert res.objective == pytest.approx(1.0, abs=1e-12)  # the fixed t = 1 term

    @given(st.integers(0, 10_000))
    def test_matches_rollout(self, seed):
        g = np.random.default_rng(seed)
        m, horizon = int(g.integers(1, 5)), int(g.integers(2, 9))
        A, B = g.normal(size=(m, m)) * 0.5, g.normal(size=m)
        c1, goal = g.normal(size=m), g.normal(size=m)
        cfg = C.MpcConfig(horizon=horizon, Q=float(g.uniform(0.1, 3)), R=float(g.uniform(0, 2)), u_max=1.5)
        p = C.condense_qp(A, B, c1, goal, cfg)
        for u in g.uniform(-1.5, 1.5, size=(100, horizon - 1)):
            ref = rollout_cost(A, B, c1, goal, u, cfg.Q, cfg.R)
            assert abs(p.objective(u) - ref) <= 1e-10 * max(1.0, abs(ref))

    def test_hessian_symmetric_psd(self, rng):
        p = C.condense_qp(rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=4), np.zeros(4),
                          C.MpcConfig(horizon=10, R=0.0))
        assert np.max(np.abs(p.H - p.H.T)) <= 1e-12
        assert np.min(np.linalg.eigvalsh(p.H)) >= -1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            C.condense_qp(np.eye(3), np.ones(2), np.zeros(3), np.zeros(3), C.MpcConfig(R=1.0))

    def test_missing_R(self):
        with pytest.raises(ValueError):
            C.condense_qp(np.eye(2), np.ones(2), np.zeros(2), np.zeros(2), C.MpcConfig())


class TestBoxQp:
    def test_zero_linear_term(self):
        res = C.solve_box_qp(C.QpProblem(np.eye(3), np.zeros(3), 1.0))
        assert res.converged and np.all(res.u == 0)

    def test_separable_clamp(self):
        res = C.solve_box_qp(C.QpProblem(np.eye(3), -2.0 * np.ones(3), 0.5))
        np.testing.assert_allclose(res.u, 0.5)

    def test_linear_objective_goes_to_corner(self):
        res = C.solve_box_qp(C.QpProblem(np.zeros((2, 2)), np.array([1.0, -1.0]), 0.3))
        np.testing.assert_array_equal(res.u, [-0.3, 0.3])

    def test_against_active_set_enumeration(self):
        g = np.random.Generator(np.random.PCG64(2024))
        for _ in range(50):
            p = random_qp(g)
            u_ref, ref = enumerate_box_qp(p)
            res = C.solve_box_qp(p)
            assert res.objective <= ref + 1e-4
            assert np.all(np.abs(res.u) <= p.bound)

    def test_local_grid_cannot_improve(self):
        g = np.random.Generator(np.random.PCG64(7))
        steps = np.array([-1e-3, 0.0, 1e-3])
        for _ in range(10):
            p = random_qp(g)
            u = C.solve_box_qp(p).u
            cand = np.clip(u + np.array(list(itertools.product(steps, repeat=5))), -p.bound, p.bound)
            assert np.min(p.objective(cand)) >= p.objective(u) - 1e-10

    @given(st.integers(0, 10_000))
    def test_fixed_point_of_projection(self, seed):
        p = random_qp(np.random.default_rng(seed), n=4)
        res = C.solve_box_qp(p)
        assert res.converged
        alpha = 1.0 / (2.0 * np.max(np.linalg.eigvalsh(p.H)))
        again = np.clip(res.u - alpha * (2 * p.H @ res.u + p.f), -p.bound, p.bound)
        assert np.linalg.norm(again - res.u) < 1e-8

    @given(st.integers(0, 10_000))
    def test_monotone_and_feasible(self, seed):
        g = np.random.default_rng(seed)
        p = random_qp(g, n=6, bound=0.4)
        res = C.solve_box_qp(p, record=True, u0=g.uniform(-1, 1, size=6))
        h = np.array(res.history)
        assert np.all(np.diff(h) <= 1e-12 * np.maximum(1.0, np.abs(h[:-1])))
        assert np.all(np.abs(res.u) <= 0.4)

    def test_ill_conditioned_converges(self):
        g = np.random.Generator(np.random.PCG64(3))
        Uo = np.linalg.qr(g.normal(size=(15, 15)))[0]
        H = Uo @ np.diag(np.logspace(-4, 2, 15)) @ Uo.T
        res = C.solve_box_qp(C.QpProblem(H, g.normal(size=15), 1.0))
        assert res.converged

    def test_iteration_cap_flags_non_convergence(self, rng):
        p = random_qp(rng, n=8)
        res = C.solve_box_qp(p, max_iter=2, polish_every=1000)
        assert not res.converged and res.iterations == 2


class TestMpcStep:
    def setup_linear(self, rng, horizon=5):
        A0 = np.array([[0.95, 0.2], [-0.2, 0.95]])
        B0 = np.array([0.0, 0.5])
        cfg = C.MpcConfig(horizon=horizon, warmup=8, R=0.3, u_max=0.4)
        x = [rng.normal(size=2)]
        u = rng.normal(size=8) * 0.3
        for t in range(8):
            x.append(A0 @ x[-1] + B0 * u[t])
        return A0, B0, cfg, np.array(x), u

    def test_matches_ground_truth_solution(self, rng):
        A0, B0, cfg, x, u = self.setup_linear(rng)
        step = C.mpc_step(identity_model(A0, B0), x, u, cfg)
        np.testing.assert_allclose(step.A, A0, atol=1e-6)
        p = C.condense_qp(A0, B0, x[-1], np.zeros(2), cfg)
        u_ref, _ = enumerate_box_qp(p)
        assert step.u == pytest.approx(u_ref[0], abs=1e-4)

    def test_at_goal_without_authority(self, rng):
        A0 = np.array([[0.9, 0.0], [0.0, 0.8]])
        model = identity_model(A0, np.zeros(2))
        x = np.zeros((17, 2))
        x[0] = [1.0, 1.0]
        for t in range(16):
            x[t + 1] = A0 @ x[t]
        x = x * 1e-9  # effectively at the goal
        step = C.mpc_step(model, x, np.zeros(16), C.MpcConfig(R=1.0))
        assert abs(step.u) < 1e-8

    def test_zero_bound(self, rng):
        A0, B0, cfg, x, u = self.setup_linear(rng)
        step = C.mpc_step(identity_model(A0, B0), x, u, C.MpcConfig(horizon=5, warmup=8, R=0.3, u_max=0.0))
        assert step.u == 0.0

    def test_history_length_checked(self, rng):
        A0, B0, cfg, x, u = self.setup_linear(rng)
        with pytest.raises(ValueError):
            C.mpc_step(identity_model(A0, B0), x[1:], u, cfg)

    def test_scaling_invariance(self, rng):
        A0, B0, cfg, x, u = self.setup_linear(rng)
        model = identity_model(A0, B0)
        base = C.mpc_step(model, x, u, cfg)
        for k in (0.01, 7.0, 1e3):
            scaled = C.MpcConfig(horizon=5, warmup=8, Q=k, R=0.3 * k, u_max=0.4)
            assert C.mpc_step(model, x, u, scaled).u == pytest.approx(base.u, abs=1e-6)

    def test_auto_penalty(self):
        cfg = C.MpcConfig(R_scale=10.0, u_max=2.0)
        lat = np.array([[1.0, 0.0], [0.0, 3.0]])
        assert C.auto_input_penalty(lat, np.zeros(2), cfg) == pytest.approx(10.0 * 5.0 / 4.0)


class TestLoops:
    def test_no_authority_model(self):
        model = identity_model(np.eye(2), np.zeros(2), eps=1e-6)
        run = C.run_mpc_loop(WAKE, model, C.MpcConfig(R=1.0), 200)
        assert np.all(run.inputs == 0)
        assert abs(run.residuals[-1] - np.sqrt(0.1)) < 0.1 * np.sqrt(0.1)

    def test_warmup_inputs_zero_and_log_lengths(self):
        model = identity_model(np.eye(2), [0.0, 0.1], eps=1e-6)
        run = C.run_mpc_loop(WAKE, model, C.MpcConfig(), 40)
        assert np.all(run.inputs[:16] == 0)
        assert run.states.shape == (41, 2) and run.residuals.shape == (41,) and run.latent_cost.shape == (41,)
        assert run.R is not None and run.R > 0

    def test_steps_must_exceed_warmup(self):
        with pytest.raises(ValueError):
            C.run_mpc_loop(WAKE, identity_model(np.eye(2), np.zeros(2)), C.MpcConfig(), 16)

    def test_pcontrol_gain_zero(self):
        run = C.run_pcontrol_loop(WAKE, C.PControlConfig(gain=0.0), 2000)
        assert np.all(np.abs(run.residuals - np.sqrt(0.1)) < 0.1 * np.sqrt(0.1))

    def test_pcontrol_phase_zero_stabilises(self):
        run = C.run_pcontrol_loop(WAKE, C.PControlConfig(gain=0.4), 1500)
        assert run.residuals[-1] < 1e-3
        np.testing.assert_allclose(run.inputs, -0.4 * run.sensor[:-1])

    def test_pcontrol_phase_pi_does_not(self):
        run = C.run_pcontrol_loop(WAKE, C.PControlConfig(gain=0.4, sensor=envs.Sensor(np.pi)), 1500)
        assert np.min(run.residuals) >= 0.5 * np.sqrt(0.1)

    def test_threshold_from_linearisation(self):
        # closed-loop Jacobian at the origin: [[s, -w], [w, s - g k]]
        s, w, g = WAKE.sigma, WAKE.omega, WAKE.gamma
        for k, stable in ((0.19, False), (0.21, True), (0.4, True)):
            J = np.array([[s, -w], [w, s - g * k]])
            assert (np.max(np.linalg.eigvals(J).real) < 0) == stable

    def test_pcontrol_needs_steps(self):
        with pytest.raises(ValueError):
            C.run_pcontrol_loop(WAKE, C.PControlConfig(), 0)


class TestCorrelation:
    def test_self(self, rng):
        s = rng.normal(size=50)
        assert C.correlation(s, s) == pytest.approx(1.0)
        assert C.correlation(s, -s) == pytest.approx(-1.0)

    def test_orthogonal(self):
        t = np.linspace(0, 2 * np.pi, 400, endpoint=False)
        assert abs(C.correlation(np.sin(t), np.cos(t))) < 1e-6

    def test_errors(self):
        with pytest.raises(ValueError):
            C.correlation([1.0, 1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            C.correlation([1.0], [1.0])

    def test_moving_average(self):
        np.testing.assert_allclose(C.moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
        with pytest.raises(ValueError):
            C.moving_average([1, 2], 3)


def test_config_validation():
    with pytest.raises(ValueError):
        C.MpcConfig(horizon=1)
    with pytest.raises(ValueError):
        C.MpcConfig(R=-1.0)
    with pytest.raises(ValueError):
        C.PControlConfig(gain=np.inf)
