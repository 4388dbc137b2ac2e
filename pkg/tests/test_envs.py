import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepkoopman import envs
from deepkoopman import numerics as nm

ORACLE = envs.OracleSystem()
WAKE = envs.MeanFieldWake()


def rotate(x, theta):
    c, s = np.cos(theta), np.sin(theta)
    return x @ np.array([[c, s], [-s, c]])


class TestParameters:
    def test_oracle_validation(self):
        with pytest.raises(ValueError):
            envs.OracleSystem(mu=0.1)
        with pytest.raises(ValueError):
            envs.OracleSystem(dt=0.0)

    def test_wake_validation(self):
        with pytest.raises(ValueError):
            envs.MeanFieldWake(sigma=-0.1)
        with pytest.raises(ValueError):
            envs.MeanFieldWake(omega=0.0)
        with pytest.raises(ValueError):
            envs.MeanFieldWake(dt=0.6)

    def test_dict_round_trip(self):
        for env in (ORACLE, WAKE, envs.MeanFieldWake(sigma=0.2)):
            assert envs.env_from_dict(env.to_dict()) == env
        with pytest.raises(ValueError):
            envs.env_from_dict({"kind": "cylinder"})


class TestRk4:
    def test_wake_origin_is_fixed(self):
        np.testing.assert_array_equal(envs.step_rk4(WAKE, [0.0, 0.0]), [0.0, 0.0])

    def test_oracle_x1_closed_form(self):
        x = envs.step_rk4(ORACLE, [0.8, 0.1])
        assert abs(x[0] - 0.8 * np.exp(ORACLE.mu * ORACLE.dt)) < 1e-10

    def test_oracle_x1_linear(self):
        a = envs.step_rk4(ORACLE, [0.4, 0.2])
        b = envs.step_rk4(ORACLE, [0.8, 0.2])
        assert b[0] == pytest.approx(2 * a[0], rel=1e-15)

    def test_fourth_order_convergence(self):
        # halving dt should shrink the one-step error by ~2^5
        x0 = np.array([0.3, 0.1])
        errs = []
        for dt in (0.2, 0.1):
            env = envs.MeanFieldWake(dt=dt)
            fine = envs.MeanFieldWake(dt=dt / 64)
            ref = x0
            for _ in range(64):
                ref = envs.step_rk4(fine, ref)
            errs.append(np.linalg.norm(envs.step_rk4(env, x0) - ref))
        assert 20 < errs[0] / errs[1] < 45

    def test_input_enters_y_only(self):
        a = envs.step_rk4(WAKE, [0.0, 0.0], 1.0)
        assert a[1] > 0 and abs(a[0]) < a[1]

    def test_divergence_raises(self):
        with pytest.raises(envs.DivergenceError):
            envs.step_rk4(WAKE, [1e200, 1e200])


class TestSimulate:
    def test_empty_inputs(self):
        seq = envs.simulate(WAKE, [0.1, 0.2], np.zeros((0, 1)))
        np.testing.assert_array_equal(seq.states, [[0.1, 0.2]])

    def test_limit_cycle_radius(self):
        seq = envs.simulate(WAKE, [0.3, 0.0], np.zeros(4000))
        r = np.linalg.norm(seq.states[-200:], axis=1)
        assert np.max(np.abs(r - np.sqrt(0.1))) < 1e-3

    def test_oracle_matches_exact_operator(self):
        seq = envs.simulate(ORACLE, [1.2, -0.5], np.zeros((128, 0)))
        K = envs.exact_koopman_operator(ORACLE)
        Z = envs.lift(seq.states)
        for t in range(128):
            assert np.linalg.norm(Z[t + 1] - K @ Z[t]) <= 1e-8
        Kt = nm.matrix_exp(envs.koopman_generator(ORACLE), 128 * ORACLE.dt)
        np.testing.assert_allclose(Z[-1], Kt @ Z[0], atol=1e-8)

    def test_deterministic(self):
        u = np.sin(np.arange(50) * 0.1)
        a, b = envs.simulate(WAKE, [0.1, 0.0], u), envs.simulate(WAKE, [0.1, 0.0], u)
        assert np.array_equal(a.states, b.states)

    def test_batch_matches_single(self, rng):
        x0s = rng.uniform(-1, 1, size=(4, 2))
        batch = envs.simulate_batch(ORACLE, x0s, 20)
        for i in range(4):
            np.testing.assert_allclose(batch[i], envs.simulate(ORACLE, x0s[i], np.zeros((20, 0))).states,
                                       rtol=1e-15)

    @given(st.floats(0, 2 * np.pi))
    def test_wake_rotational_equivariance(self, theta):
        x0 = np.array([0.2, -0.1])
        a = envs.simulate(WAKE, x0, np.zeros(200)).states
        b = envs.simulate(WAKE, rotate(x0, theta), np.zeros(200)).states
        assert np.max(np.abs(rotate(a, theta) - b)) < 1e-8


class TestExactOperator:
    def test_dt_zero(self):
        np.testing.assert_array_equal(envs.exact_koopman_operator(ORACLE, 0.0), np.eye(3))

    def test_top_left_entry(self):
        K = envs.exact_koopman_operator(ORACLE)
        assert K[0, 0] == pytest.approx(np.exp(-0.05 * 0.02), rel=1e-15)
        assert f"{K[0, 0]:.9f}" == "0.999000500"
        assert str(K[0, 0]).startswith("0.999000499")

    def test_lstsq_on_lifted_trajectory(self):
        seq = envs.simulate(ORACLE, [1.0, 0.5], np.zeros((200, 0)))
        Z = envs.lift(seq.states).T
        np.testing.assert_allclose(nm.lstsq_min_norm(Z[:, :-1], Z[:, 1:]), envs.exact_koopman_operator(ORACLE),
                                   atol=1e-6)

    def test_wake_rejected(self):
        with pytest.raises(TypeError):
            envs.exact_koopman_operator(WAKE)


class TestResidual:
    def test_origin(self):
        assert envs.residual(WAKE, [0.0, 0.0]) == 0.0

    def test_on_cycle(self):
        assert envs.residual(WAKE, [np.sqrt(0.1), 0.0]) == pytest.approx(np.sqrt(0.1), rel=1e-12)
        assert envs.residual(WAKE, rotate(np.array([np.sqrt(0.1), 0.0]), 1.3)) == pytest.approx(np.sqrt(0.1))

    @given(st.floats(-1, 1), st.floats(-1, 1))
    def test_continuous(self, a, b):
        x = np.array([a, b])
        d = np.array([1e-7, -1e-7])
        assert abs(envs.residual(WAKE, x + d) - envs.residual(WAKE, x)) < 1e-5

    def test_zero_only_at_fixed_point(self, rng):
        for x in rng.uniform(-1, 1, size=(50, 2)):
            assert envs.residual(WAKE, x) > 0


class TestSensor:
    def test_phase_zero_reads_y(self):
        assert envs.Sensor(0.0)([0.3, -0.2]) == -0.2

    def test_phase_pi_flips(self):
        assert envs.Sensor(np.pi)([0.3, -0.2]) == pytest.approx(0.2)

    def test_quarter_phase_reads_minus_x(self):
        assert envs.Sensor(np.pi / 2)([0.3, -0.2]) == pytest.approx(-0.3)


def zero_crossing_periods(x):
    idx = np.nonzero(np.diff(np.signbit(x)))[0]
    return np.diff(idx)


class TestChirp:
    def test_frequency_increases(self):
        sched = envs.ChirpSchedule(sweep_steps=4000, rest_steps=0, f0=0.05, f1=1.0, repetitions=1)
        u = sched.signal(4000, 0.05)
        gaps = zero_crossing_periods(u)
        # gaps are integer sample counts; allow one-sample jitter
        assert np.all(np.diff(gaps) <= 1)
        assert gaps[0] > 3 * gaps[-1]

    @given(st.floats(0.01, 0.2), st.floats(0.3, 1.0), st.integers(0, 1000))
    def test_frequency_monotone_property(self, f0, f1, seed):
        sched = envs.ChirpSchedule(sweep_steps=3000, rest_steps=0, f0=f0, f1=f1, repetitions=1, seed=seed)
        gaps = zero_crossing_periods(sched.signal(3000, 0.05))
        smooth = np.convolve(gaps, np.ones(4) / 4, mode="valid")
        assert np.all(np.diff(smooth) <= 0.5)

    def test_rests_are_zero(self):
        sched = envs.ChirpSchedule(sweep_steps=100, rest_steps=50)
        u = sched.signal(450, 0.05)
        assert np.all(u[100:150] == 0) and np.all(u[250:300] == 0)
        assert np.max(np.abs(u)) <= 0.5

    def test_all_rest(self):
        assert np.all(envs.ChirpSchedule(sweep_steps=0, rest_steps=10).signal(100, 0.05) == 0)

    def test_repetitions_cap(self):
        u = envs.ChirpSchedule(sweep_steps=10, rest_steps=10, repetitions=2).signal(100, 0.05)
        assert np.all(u[40:] == 0) and np.any(u[20:30] != 0)

    def test_seeded(self):
        a = envs.ChirpSchedule(seed=1).signal(3000, 0.05)
        assert np.array_equal(a, envs.ChirpSchedule(seed=1).signal(3000, 0.05))
        assert not np.array_equal(a, envs.ChirpSchedule(seed=2).signal(3000, 0.05))

    def test_validation(self):
        with pytest.raises(ValueError):
            envs.ChirpSchedule(f0=1.0, f1=0.5)


class TestTrainingData:
    def test_single_window(self):
        ds = envs.generate_training_data(WAKE, envs.ChirpSchedule(), 33, 32)
        assert len(ds) == 1 and ds.states.shape == (1, 33, 2) and ds.inputs.shape == (1, 32, 1)

    def test_window_count(self):
        ds = envs.generate_training_data(WAKE, envs.ChirpSchedule(), 4238, 32)
        assert len(ds) == 4206
        sub = envs.generate_training_data(WAKE, envs.ChirpSchedule(), 4238, 32, n_sequences=1600)
        assert len(sub) == 1600

    def test_windows_are_staggered(self):
        ds = envs.generate_training_data(WAKE, envs.ChirpSchedule(), 60, 8)
        np.testing.assert_array_equal(ds.states[1, :-1], ds.states[0, 1:])
        np.testing.assert_array_equal(ds.inputs[1, :-1], ds.inputs[0, 1:])

    def test_inputs_align_with_transitions(self):
        ds = envs.generate_training_data(WAKE, envs.ChirpSchedule(sweep_steps=30, rest_steps=5), 40, 10)
        seq = ds.sequence(3)
        x_next = envs.step_rk4(WAKE, seq.states[4], seq.inputs[4, 0])
        np.testing.assert_allclose(x_next, seq.states[5], rtol=1e-15)

    def test_all_rest_gives_zero_inputs(self):
        ds = envs.generate_training_data(WAKE, envs.ChirpSchedule(sweep_steps=0), 100, 16)
        assert np.all(ds.inputs == 0)

    def test_too_short(self):
        with pytest.raises(ValueError):
            envs.generate_training_data(WAKE, envs.ChirpSchedule(), 10, 32)

    def test_oracle_dataset_ranges(self, rng):
        ds = envs.oracle_dataset(ORACLE, 50, 8, rng)
        x0 = ds.states[:, 0]
        assert np.all((np.abs(x0[:, 0]) >= 0.5) & (np.abs(x0[:, 0]) <= 1.5))
        assert np.all(np.abs(x0[:, 1]) <= 1.0)
        assert ds.inputs.shape == (50, 8, 0)


class TestObservationLift:
    def test_shape_and_determinism(self, rng):
        x = rng.normal(size=(5, 2))
        a, b = envs.ObservationLift()(x), envs.ObservationLift()(x)
        assert a.shape == (5, 16) and np.array_equal(a, b)

    def test_formula(self):
        lift = envs.ObservationLift(dim=3, seed=2)
        A, B, C = lift.coefficients()
        x = np.array([0.3, -0.7])
        ref = [np.sin(A[k] @ x + B[k]) + C[k] * (A[k] @ x) ** 2 for k in range(3)]
        np.testing.assert_allclose(lift(x), ref, rtol=1e-14)

    def test_dataset(self, rng):
        ds = envs.oracle_dataset(ORACLE, 3, 4, rng)
        lifted = envs.ObservationLift(dim=6).apply(ds)
        assert lifted.states.shape == (3, 5, 6)


class TestSequenceTypes:
    def test_length_invariant(self):
        with pytest.raises(ValueError):
            envs.SnapshotSequence(np.ones((3, 2)), np.zeros((3, 1)), 0.1)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            envs.SnapshotSequence(np.array([[np.nan, 0.0], [0.0, 0.0]]), np.zeros((1, 1)), 0.1)

    def test_dataset_shapes(self):
        with pytest.raises(ValueError):
            envs.Dataset(np.ones((2, 5, 2)), np.ones((2, 5, 1)), 0.1)
        ds = envs.Dataset(np.ones((2, 5, 2)), np.ones((2, 4)), 0.1)
        assert ds.inputs.shape == (2, 4, 1) and ds.T == 4 and len(ds.subset([1])) == 1
