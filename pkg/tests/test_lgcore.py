import json

import numpy as np
import pytest

from kcfattack.errors import ConfigurationError, NumericalError
from kcfattack.lgcore import (AttackerFilterState, ProcessModel, SensorModel, covariance_step, gain_schedule,
                              kalman_predict_update, load_models, models_from_json, models_to_json, noise_factor,
                              observe, process_step, stack_sensors)
from kcfattack.rng import RngStream


def test_process_step_noiseless_identity():
    model = ProcessModel(np.eye(2), np.zeros((2, 2)))
    assert np.array_equal(process_step(np.array([2.0, 2.0]), model, RngStream(0)), [2.0, 2.0])


def test_process_step_dimension(gen):
    A = gen.standard_normal((2, 2))
    out = process_step(np.ones(2), ProcessModel(A, 0.01 * np.eye(2)), RngStream(1))
    assert out.shape == (2,)
    with pytest.raises(ConfigurationError):
        process_step(np.ones(3), ProcessModel(A, np.eye(2)), RngStream(1))


def test_process_noise_covariance_matches_Q():
    Q = np.array([[0.5, 0.2], [0.2, 0.3]])
    A = np.array([[0.9, 0.1], [0.0, 0.7]])
    model = ProcessModel(A, Q)
    rng = RngStream(3)
    x = np.array([1.0, -1.0])
    w = np.array([process_step(x, model, rng) - A @ x for _ in range(100_000)])
    assert np.all(np.abs(np.cov(w.T) - Q) <= 0.03 * np.abs(Q))


def test_observe_noiseless_identity():
    s = SensorModel(np.eye(3)[:, :2], np.zeros((3, 3)), allow_singular=True)
    assert np.array_equal(observe(np.array([1.5, -2.0]), s, RngStream(0)), [1.5, -2.0, 0.0])
    square = SensorModel(np.eye(2), np.zeros((2, 2)), allow_singular=True)
    assert np.array_equal(observe(np.array([1.5, -2.0]), square, RngStream(0)), [1.5, -2.0])


def test_observe_dimension_and_noise(gen):
    H = gen.standard_normal((3, 2))
    R = np.array([[1.0, 0.1, 0.0], [0.1, 0.8, 0.05], [0.0, 0.05, 1.2]])
    s = SensorModel(H, R)
    rng = RngStream(4)
    x = np.array([0.3, 0.7])
    assert observe(x, s, rng).shape == (3,)
    v = np.array([observe(x, s, rng) - H @ x for _ in range(100_000)])
    C = np.cov(v.T)
    big = np.abs(R) > 0.5
    assert np.all(np.abs(C - R)[big] <= 0.03 * R[big])
    assert np.all(np.abs(C - R)[~big] <= 0.03 * np.sqrt(np.outer(np.diag(R), np.diag(R)))[~big])
    with pytest.raises(ConfigurationError):
        observe(np.ones(3), s, rng)


def test_sensor_rejects_singular_R_unless_allowed():
    with pytest.raises(ConfigurationError):
        SensorModel(np.eye(2), np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        ProcessModel(np.eye(2), -np.eye(2))


def test_noise_factor_handles_singular_psd():
    C = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = noise_factor(C)
    assert np.allclose(L @ L.T, C, atol=1e-12)
    assert np.array_equal(noise_factor(np.zeros((2, 2))), np.zeros((2, 2)))


def test_filter_noiseless_fully_observed_converges():
    process = ProcessModel(np.array([[0.9, 0.2], [0.0, 0.8]]), np.zeros((2, 2)))
    sensors = [SensorModel(np.eye(2), np.zeros((2, 2)), allow_singular=True)]
    state = AttackerFilterState.initial(2, [2.0, 2.0])
    x = np.array([1.0, -1.0])
    for _ in range(10):
        x = process.A @ x
        state = kalman_predict_update(state, [x], process, sensors)
    assert np.trace(state.Rcov) < 1e-10
    assert np.allclose(state.xhat, x)
    assert np.allclose(state.phi_mean, x - 2.0)


def _batch_posterior(A, Q, H, R, sigma0, ys):
    """Posterior mean of x(n) from the joint Gaussian of (x(0), w, v)."""
    q, m, n = A.shape[0], H.shape[0], len(ys)
    dim = q + n * q + n * m
    cov = np.zeros((dim, dim))
    cov[:q, :q] = sigma0
    for t in range(n):
        cov[q + t * q:q + (t + 1) * q, q + t * q:q + (t + 1) * q] = Q
        o = q + n * q + t * m
        cov[o:o + m, o:o + m] = R
    # x(t) = Fx[t] @ latent, y(t) = H x(t) + v(t)
    Fx = np.zeros((q, dim))
    Fx[:, :q] = np.eye(q)
    Fy = []
    for t in range(n):
        Fx = A @ Fx
        Fx[:, q + t * q:q + (t + 1) * q] += np.eye(q)
        row = H @ Fx
        row[:, q + n * q + t * m:q + n * q + (t + 1) * m] += np.eye(m)
        Fy.append(row)
    Fy = np.vstack(Fy)
    Syy = Fy @ cov @ Fy.T
    Sxy = Fx @ cov @ Fy.T
    return Sxy @ np.linalg.solve(Syy, np.concatenate(ys))


def test_filter_matches_batch_conditioning(gen):
    A = np.array([[0.8, 0.3], [-0.2, 0.9]])
    L = 0.3 * gen.standard_normal((2, 2))
    Q = L @ L.T
    sensors = [SensorModel(gen.standard_normal((3, 2)), np.diag(gen.uniform(0.5, 1.5, 3))) for _ in range(2)]
    process = ProcessModel(A, Q)
    H, R = stack_sensors(sensors)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(2)
    state = AttackerFilterState.initial(2, np.zeros(2))
    ys = []
    for _ in range(5):
        x = A @ x + noise_factor(Q) @ rng.standard_normal(2)
        y = [s.H @ x + noise_factor(s.R) @ rng.standard_normal(3) for s in sensors]
        ys.append(np.concatenate(y))
        state = kalman_predict_update(state, y, process, sensors)
    assert np.allclose(state.xhat, _batch_posterior(A, Q, H, R, np.eye(2), ys), atol=1e-8)


def test_measurement_update_does_not_increase_trace(gen):
    process = ProcessModel(0.9 * np.eye(2), 0.1 * np.eye(2))
    s = SensorModel(gen.standard_normal((3, 2)), np.eye(3))
    Rcov = np.eye(2)
    for _ in range(30):
        prior = process.A @ Rcov @ process.A.T + process.Q
        _, Rcov = covariance_step(Rcov, process, s.H, s.R)
        assert np.trace(Rcov) <= np.trace(prior) + 1e-12
        assert np.abs(Rcov - Rcov.T).max() <= 1e-12
        assert np.linalg.eigvalsh(Rcov).min() >= -1e-10


def test_gain_schedule_converges(gen):
    process = ProcessModel(np.array([[0.95, 0.1], [0.0, 0.6]]), 0.01 * np.eye(2))
    sensors = [SensorModel(gen.standard_normal((3, 2)), np.eye(3)) for _ in range(3)]
    sched = gain_schedule(process, sensors, tol=1e-13)
    assert len(sched.K) < 20000
    assert np.allclose(sched.cov(10 ** 6), sched.Rcov[-1])
    assert np.allclose(sched.gain(10 ** 6), sched.K[-1])


def test_singular_innovation_covariance_is_reported():
    process = ProcessModel(np.eye(2), np.eye(2))
    sensors = [SensorModel(np.array([[1.0, 0.0], [1.0, 0.0]]), np.zeros((2, 2)), allow_singular=True)]
    with pytest.raises(NumericalError) as exc:
        kalman_predict_update(AttackerFilterState.initial(2, np.zeros(2)), [np.zeros(2)], process, sensors)
    assert exc.value.condition_number > 1e12


def test_filter_rejects_bad_observation_shape():
    process = ProcessModel(np.eye(2), np.eye(2))
    sensors = [SensorModel(np.eye(2), np.eye(2))]
    with pytest.raises(ConfigurationError):
        kalman_predict_update(AttackerFilterState.initial(2, np.zeros(2)), [np.zeros(3)], process, sensors)


def test_same_seed_same_draws():
    model = ProcessModel(0.5 * np.eye(2), np.eye(2))
    a = [process_step(np.zeros(2), model, r) for r in [RngStream(5, 1)] * 3]
    b = [process_step(np.zeros(2), model, r) for r in [RngStream(5, 1)] * 3]
    assert np.array_equal(a, b)


def test_models_json_round_trip(tmp_path, gen):
    process = ProcessModel(gen.standard_normal((2, 2)), np.eye(2))
    sensors = [SensorModel(gen.standard_normal((3, 2)), 2 * np.eye(3))]
    path = tmp_path / "m.json"
    path.write_text(json.dumps(models_to_json(process, sensors)))
    p2, s2 = load_models(path)
    assert np.array_equal(p2.A, process.A) and np.array_equal(s2[0].H, sensors[0].H)
    bad = models_to_json(process, sensors)
    bad["A"]["rows"] = 3
    with pytest.raises(ConfigurationError):
        models_from_json(bad)


def test_standardized_innovations_are_standard_normal(gen):
    process = ProcessModel(np.array([[0.9, 0.2], [-0.1, 0.7]]), 0.05 * np.eye(2))
    sensors = [SensorModel(gen.standard_normal((3, 2)), np.eye(3)) for _ in range(2)]
    H, R = stack_sensors(sensors)
    sched = gain_schedule(process, sensors, tol=1e-14)
    Pp = process.A @ sched.Rcov[-1] @ process.A.T + process.Q
    Linv = np.linalg.inv(np.linalg.cholesky(H @ Pp @ H.T + R))
    n = 100_000
    rng = np.random.default_rng(1)
    Lq, Lr = noise_factor(process.Q), noise_factor(R)
    x, xhat = np.zeros(2), np.zeros(2)
    # start in the stationary regime: x - xhat ~ N(0, R_inf)
    x = noise_factor(sched.Rcov[-1]) @ rng.standard_normal(2)
    K = sched.K[-1]
    out = np.empty((n, H.shape[0]))
    for t in range(n):
        x = process.A @ x + Lq @ rng.standard_normal(2)
        y = H @ x + Lr @ rng.standard_normal(H.shape[0])
        pred = process.A @ xhat
        e = y - H @ pred
        out[t] = Linv @ e
        xhat = pred + K @ e
    assert np.all(np.abs(out.mean(axis=0)) < 4 / np.sqrt(n))
    assert np.all(np.abs(out.var(axis=0) - 1) < 0.05)
