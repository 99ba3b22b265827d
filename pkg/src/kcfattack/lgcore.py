"""Linear-Gaussian plant, sensors and the attacker's centralized Kalman filter."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag

from .errors import ConfigurationError, NumericalError
from .rng import as_generator

PSD_TOL = 1e-10


def symmetrize(m):
    return 0.5 * (m + m.T)


def noise_factor(cov):
    """Return ``L`` with ``L @ L.T == cov``.

    Cholesky is used when possible; singular PSD matrices fall back to an
    eigendecomposition with negative eigenvalues clamped at zero.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(symmetrize(cov))
        if w.min(initial=0.0) < -PSD_TOL * max(1.0, np.abs(w).max(initial=0.0)):
            raise ConfigurationError("covariance matrix is not positive semi-definite")
        return v * np.sqrt(np.clip(w, 0.0, None))


def _check_psd(m, name, strict=False):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigurationError(f"{name} must be square, got shape {m.shape}")
    if not np.allclose(m, m.T, atol=1e-12, rtol=1e-10):
        raise ConfigurationError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(symmetrize(m))
    scale = max(1.0, np.abs(w).max(initial=0.0))
    if strict and w.min() <= 0.0:
        raise ConfigurationError(f"{name} must be positive definite")
    if w.min() < -PSD_TOL * scale:
        raise ConfigurationError(f"{name} must be positive semi-definite")
    return m


@dataclass
class ProcessModel:
    """Latent process ``x(t+1) = A x(t) + w(t)``, ``w ~ N(0, Q)``."""

    A: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        self.A = np.array(self.A, dtype=float, ndmin=2)
        self.Q = np.array(self.Q, dtype=float, ndmin=2)
        if self.A.shape[0] != self.A.shape[1]:
            raise ConfigurationError(f"A must be square, got {self.A.shape}")
        if self.Q.shape != self.A.shape:
            raise ConfigurationError(f"Q has shape {self.Q.shape}, expected {self.A.shape}")
        _check_psd(self.Q, "Q")
        self._factor = noise_factor(self.Q)

    @property
    def q(self):
        return self.A.shape[0]

    @property
    def noise_factor(self):
        return self._factor


@dataclass
class SensorModel:
    """Node observation ``y = H x + v``, ``v ~ N(0, R)``.

    ``R`` must be positive definite unless ``allow_singular`` is set, which is
    only meant for noiseless test fixtures.
    """

    H: np.ndarray
    R: np.ndarray
    allow_singular: bool = False

    def __post_init__(self):
        self.H = np.array(self.H, dtype=float, ndmin=2)
        self.R = np.array(self.R, dtype=float, ndmin=2)
        if self.R.shape != (self.p, self.p):
            raise ConfigurationError(f"R has shape {self.R.shape}, expected {(self.p, self.p)}")
        _check_psd(self.R, "R", strict=not self.allow_singular)
        self._factor = noise_factor(self.R)

    @property
    def p(self):
        return self.H.shape[0]

    @property
    def noise_factor(self):
        return self._factor


def check_dims(process: ProcessModel, sensors: Sequence[SensorModel]):
    for k, s in enumerate(sensors):
        if s.H.shape[1] != process.q:
            raise ConfigurationError(
                f"sensor {k}: H has {s.H.shape[1]} columns but the state dimension is {process.q}"
            )


def process_step(x, model: ProcessModel, rng):
    """One step of the plant: ``A x + w`` with ``w ~ N(0, Q)``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.q,):
        raise ConfigurationError(f"state has shape {x.shape}, expected ({model.q},)")
    w = model.noise_factor @ as_generator(rng).standard_normal(model.q)
    return model.A @ x + w


def observe(x, sensor: SensorModel, rng):
    """Noisy observation ``H x + v``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (sensor.H.shape[1],):
        raise ConfigurationError(f"state has shape {x.shape}, expected ({sensor.H.shape[1]},)")
    v = sensor.noise_factor @ as_generator(rng).standard_normal(sensor.p)
    return sensor.H @ x + v


def initial_state(q, rng, sigma0=None):
    """Draw ``x(0) ~ N(0, sigma0)`` (identity by default)."""
    sigma0 = np.eye(q) if sigma0 is None else np.asarray(sigma0, dtype=float)
    return noise_factor(sigma0) @ as_generator(rng).standard_normal(q)


def stack_sensors(sensors: Sequence[SensorModel]):
    H = np.vstack([s.H for s in sensors])
    R = block_diag(*[s.R for s in sensors])
    return H, R


@dataclass
class AttackerFilterState:
    """MMSE estimate of the state from all true observations, and its covariance."""

    xhat: np.ndarray
    Rcov: np.ndarray
    x_star: np.ndarray

    @property
    def phi_mean(self):
        return self.xhat - self.x_star

    @classmethod
    def initial(cls, q, x_star, sigma0=None):
        sigma0 = np.eye(q) if sigma0 is None else np.array(sigma0, dtype=float)
        return cls(np.zeros(q), sigma0, np.asarray(x_star, dtype=float))


def _gain(P_prior, H, R):
    S = symmetrize(H @ P_prior @ H.T + R)
    if np.trace(P_prior) <= 1e-14:
        # the prior is already exact; measurements carry no information
        return np.zeros((P_prior.shape[0], H.shape[0]))
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError("innovation covariance is numerically singular", cond)
    return np.linalg.solve(S, H @ P_prior).T


def covariance_step(Rcov, process: ProcessModel, H, R):
    """Covariance recursion of the stacked filter; returns ``(gain, Rcov_next)``."""
    P = symmetrize(process.A @ Rcov @ process.A.T + process.Q)
    K = _gain(P, H, R)
    I_KH = np.eye(P.shape[0]) - K @ H
    # Joseph form keeps the iterate PSD
    Rnext = symmetrize(I_KH @ P @ I_KH.T + K @ R @ K.T)
    return K, Rnext


def kalman_predict_update(state: AttackerFilterState, y_all, process: ProcessModel,
                          sensors: Sequence[SensorModel]) -> AttackerFilterState:
    """Predict and update the attacker's filter with the un-attacked observations."""
    check_dims(process, sensors)
    H, R = stack_sensors(sensors)
    y = np.concatenate([np.asarray(y, dtype=float) for y in y_all])
    if y.shape != (H.shape[0],):
        raise ConfigurationError(f"stacked observation has shape {y.shape}, expected ({H.shape[0]},)")
    K, Rnext = covariance_step(state.Rcov, process, H, R)
    xpred = process.A @ state.xhat
    xhat = xpred + K @ (y - H @ xpred)
    return AttackerFilterState(xhat, Rnext, state.x_star)


@dataclass
class GainSchedule:
    """Precomputed filter gains ``K(t)`` and covariances ``R(t)``.

    The covariance recursion does not depend on the data, so it is run once
    until it settles; afterwards the last entry is reused.
    ``K[t-1]`` is the gain applied at time ``t``; ``Rcov[t]`` is ``R(t)``.
    """

    K: np.ndarray
    Rcov: np.ndarray

    def gain(self, t):
        return self.K[min(t, len(self.K)) - 1]

    def cov(self, t):
        return self.Rcov[min(t, len(self.Rcov) - 1)]


def gain_schedule(process: ProcessModel, sensors: Sequence[SensorModel], sigma0=None,
                  max_steps=20000, tol=1e-15) -> GainSchedule:
    check_dims(process, sensors)
    H, R = stack_sensors(sensors)
    Rcov = np.eye(process.q) if sigma0 is None else np.asarray(sigma0, dtype=float)
    gains, covs = [], [Rcov]
    for _ in range(max_steps):
        K, Rnext = covariance_step(covs[-1], process, H, R)
        gains.append(K)
        covs.append(Rnext)
        if len(gains) > 1 and np.abs(Rnext - covs[-2]).max() <= tol * max(1.0, np.abs(Rnext).max()) \
                and np.abs(K - gains[-2]).max() <= tol * max(1.0, np.abs(K).max()):
            break
    return GainSchedule(np.array(gains), np.array(covs))


def matrix_to_json(m):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    return {"rows": m.shape[0], "cols": m.shape[1], "data": m.ravel().tolist()}


def matrix_from_json(obj):
    rows, cols = int(obj["rows"]), int(obj["cols"])
    data = np.asarray(obj["data"], dtype=float)
    if data.size != rows * cols:
        raise ConfigurationError(f"matrix declares {rows}x{cols} but carries {data.size} entries")
    return data.reshape(rows, cols)


def models_to_json(process: ProcessModel, sensors: Sequence[SensorModel]):
    return {
        "A": matrix_to_json(process.A),
        "Q": matrix_to_json(process.Q),
        "sensors": [{"H": matrix_to_json(s.H), "R": matrix_to_json(s.R)} for s in sensors],
    }


def models_from_json(obj):
    process = ProcessModel(matrix_from_json(obj["A"]), matrix_from_json(obj["Q"]))
    sensors = [SensorModel(matrix_from_json(s["H"]), matrix_from_json(s["R"])) for s in obj["sensors"]]
    check_dims(process, sensors)
    return process, sensors


def load_models(path):
    return models_from_json(json.loads(Path(path).read_text()))
