"""EKF tests.

Oracle strategy: on a matched noiseless plant the filter must reproduce the
simulator exactly (zero innovations), covariance recursions are checked
against the hand-written formula, and the convergence test uses the plant
simulation itself as the truth source.
"""

from collections import deque

import numpy as np
import pytest

from doasim.estimator import ExtendedKalmanFilter
from doasim.patient_model import (
    bis_of,
    discretize,
    infusion_for_bis,
    initial_state,
    measure,
    steady_state,
    step,
)


def random_spd(rng, scale=1.0):
    m = rng.normal(size=(4, 4))
    return scale * (m @ m.T + 0.1 * np.eye(4))


def make_filter(model, x0, **kw):
    defaults = dict(p0=10.0, q=1e-6, r=1.0, delay_steps=model.delay_steps)
    defaults.update(kw)
    return ExtendedKalmanFilter(x0, **defaults)


class TestExactness:
    def test_matched_filter_reproduces_plant(self, nominal):
        # exact init, q = 0, noiseless: the filter is the plant
        model = discretize(nominal, ts=1.0)
        x0 = steady_state(nominal, 40.0)
        state = initial_state(model, x0=x0)
        ekf = make_filter(model, x0, q=0.0)
        rng = np.random.default_rng(1)
        for _ in range(100):
            assert ekf.update(measure(state), nominal)
            np.testing.assert_allclose(ekf.x_hat, state.x, rtol=1e-10, atol=1e-12)
            u = float(rng.uniform(0.0, 200.0))
            state = step(model, state, u)
            ekf.predict(model, u)

    def test_zero_input_zero_state(self, nominal):
        model = discretize(nominal, ts=1.0)
        ekf = ExtendedKalmanFilter(np.zeros(4), p0=1e-2, q=1e-6, r=1.0, delay_steps=0)
        p_prev = ekf.p.copy()
        for _ in range(20):
            ekf.predict(model, 0.0)
            expected = model.a_d @ p_prev @ model.a_d.T + ekf.q
            np.testing.assert_allclose(ekf.p, expected, atol=1e-18)
            np.testing.assert_array_equal(ekf.x_hat, np.zeros(4))
            p_prev = ekf.p.copy()

    def test_zero_innovation_is_noop(self, nominal):
        model = discretize(nominal, ts=1.0)
        x0 = steady_state(nominal, 60.0)
        ekf = make_filter(model, x0)
        z = bis_of(nominal, float(ekf.x_lag[3]))
        x_before = ekf.x_hat.copy()
        assert ekf.update(z, nominal)
        np.testing.assert_allclose(ekf.x_hat, x_before, atol=1e-13)

    def test_huge_r_freezes_update(self, nominal):
        model = discretize(nominal, ts=1.0)
        x0 = steady_state(nominal, 60.0)
        ekf = make_filter(model, x0, r=1e15)
        x_before, p_before = ekf.x_hat.copy(), ekf.p.copy()
        assert ekf.update(30.0, nominal)  # wildly off measurement
        np.testing.assert_allclose(ekf.x_hat, x_before, atol=1e-10)
        np.testing.assert_allclose(ekf.p, p_before, atol=1e-10)

    def test_nonfinite_measurement_rejected(self, nominal):
        model = discretize(nominal, ts=1.0)
        ekf = make_filter(model, steady_state(nominal, 60.0))
        x_before, p_before = ekf.x_lag.copy(), ekf.p.copy()
        for bad in (float("nan"), float("inf"), float("-inf")):
            assert not ekf.update(bad, nominal)
            np.testing.assert_array_equal(ekf.x_lag, x_before)
            np.testing.assert_array_equal(ekf.p, p_before)


class TestCovariance:
    def test_symmetric_in_symmetric_out(self, nominal):
        model = discretize(nominal, ts=1.0)
        rng = np.random.default_rng(2)
        for _ in range(200):
            ekf = ExtendedKalmanFilter(
                rng.uniform(0.0, 5.0, 4), p0=random_spd(rng), q=random_spd(rng, 1e-4),
                r=float(rng.uniform(0.1, 5.0)), delay_steps=3,
            )
            ekf.predict(model, float(rng.uniform(0.0, 300.0)))
            assert np.max(np.abs(ekf.p - ekf.p.T)) <= 1e-10
            ekf.update(float(rng.uniform(0.0, 100.0)), nominal)
            assert np.max(np.abs(ekf.p - ekf.p.T)) <= 1e-10

    def test_psd_and_nonnegative_over_many_cycles(self, nominal):
        model = discretize(nominal, ts=1.0)
        rng = np.random.default_rng(3)
        ekf = ExtendedKalmanFilter(
            rng.uniform(0.0, 5.0, 4), p0=random_spd(rng), q=random_spd(rng, 1e-5),
            r=0.5, delay_steps=model.delay_steps,
        )
        for k in range(10_000):
            ekf.predict(model, float(rng.uniform(0.0, 300.0)))
            ekf.update(float(rng.uniform(0.0, 100.0)), nominal)
            assert np.all(ekf.x_lag >= 0.0)
            if k % 100 == 0:
                assert np.max(np.abs(ekf.p - ekf.p.T)) <= 1e-10
                assert np.linalg.eigvalsh(ekf.p).min() >= -1e-10
        assert np.all(ekf.x_hat >= 0.0)
        assert np.linalg.eigvalsh(ekf.p).min() >= -1e-10


class TestConvergence:
    @pytest.mark.parametrize("mode", ["at_estimate", "at_ec50"])
    def test_high_init_converges_within_120_steps(self, nominal, mode):
        # 50% high initial estimate, matched noiseless plant at its setpoint
        model = discretize(nominal, ts=1.0)
        u = infusion_for_bis(nominal, 50.0)
        x_ss = steady_state(nominal, u)
        state = initial_state(model, x0=x_ss)
        ekf = make_filter(model, 1.5 * x_ss, mode=mode)
        rel = []
        for _ in range(240):
            ekf.update(measure(state), nominal)
            rel.append(abs(float(ekf.x_hat[3]) - state.x[3]) / state.x[3])
            state = step(model, state, u)
            ekf.predict(model, u)
        assert max(rel[120:]) < 0.01

    def test_innovations_decay_to_zero(self, nominal):
        # the deep compartment's error drains on its own (slow) timescale,
        # so the run must span hours of simulated time
        model = discretize(nominal, ts=1.0)
        u = infusion_for_bis(nominal, 50.0)
        x_ss = steady_state(nominal, u)
        state = initial_state(model, x0=x_ss)
        ekf = make_filter(model, 1.5 * x_ss)
        innovations = []
        for _ in range(20_000):
            z = measure(state)
            innovations.append(abs(z - bis_of(nominal, float(ekf.x_lag[3]))))
            ekf.update(z, nominal)
            state = step(model, state, u)
            ekf.predict(model, u)
        assert max(innovations[19_000:]) < 0.01
        assert max(innovations[19_000:]) < 1e-3 * max(innovations[:50])

    def test_error_envelope_decays_after_delay_horizon(self, nominal):
        model = discretize(nominal, ts=1.0)
        u = infusion_for_bis(nominal, 50.0)
        x_ss = steady_state(nominal, u)
        state = initial_state(model, x0=x_ss)
        ekf = make_filter(model, 1.5 * x_ss)
        err = []
        for _ in range(250):
            ekf.update(measure(state), nominal)
            err.append(abs(float(ekf.x_hat[3]) - state.x[3]))
            state = step(model, state, u)
            ekf.predict(model, u)
        lag = model.delay_steps
        windows = [max(err[k:k + 50]) for k in range(lag, 250 - 50, 50)]
        assert all(b < a for a, b in zip(windows, windows[1:]))


class TestBookkeeping:
    def test_history_depth_and_refresh(self, nominal):
        model = discretize(nominal, ts=1.0)
        ekf = make_filter(model, np.zeros(4))
        for _ in range(30):
            ekf.predict(model, 120.0)
            assert len(ekf.history) <= model.delay_steps + 1
        assert len(ekf.history) == model.delay_steps + 1
        ekf.update(70.0, nominal)
        np.testing.assert_array_equal(ekf.history[-1], ekf.x_hat)

    def test_zero_delay_has_no_rollout(self, nominal):
        model = discretize(nominal, ts=1.0)
        ekf = ExtendedKalmanFilter(np.zeros(4), delay_steps=0)
        ekf.predict(model, 100.0)
        np.testing.assert_array_equal(ekf.x_hat, ekf.x_lag)

    def test_negative_init_clamped(self, nominal):
        ekf = ExtendedKalmanFilter(np.array([-1.0, 2.0, -3.0, 4.0]))
        np.testing.assert_array_equal(ekf.x_lag, [0.0, 2.0, 0.0, 4.0])


class TestValidation:
    def test_bad_mode(self):
        with pytest.raises(ValueError, match="mode"):
            ExtendedKalmanFilter(np.zeros(4), mode="at_setpoint")

    def test_bad_r(self):
        with pytest.raises(ValueError, match=r"ekf\.r"):
            ExtendedKalmanFilter(np.zeros(4), r=0.0)
        with pytest.raises(ValueError, match=r"ekf\.r"):
            ExtendedKalmanFilter(np.zeros(4), r=float("nan"))

    def test_bad_shapes(self):
        with pytest.raises(ValueError, match="x_hat0"):
            ExtendedKalmanFilter(np.zeros(3))
        with pytest.raises(ValueError, match=r"ekf\.q"):
            ExtendedKalmanFilter(np.zeros(4), q=np.zeros((3, 3)))
        with pytest.raises(ValueError, match=r"ekf\.p0"):
            ExtendedKalmanFilter(np.zeros(4), p0=np.full((4, 4), float("nan")))

    def test_negative_delay(self):
        with pytest.raises(ValueError, match="delay_steps"):
            ExtendedKalmanFilter(np.zeros(4), delay_steps=-1)
