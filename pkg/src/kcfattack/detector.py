"""Sliding-window chi-square detector on node innovations."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ConfigurationError
from .lgcore import symmetrize

JITTER = 1e-9


@dataclass
class DetectorConfig:
    """Threshold ``eta``, window ``J``, permissible detection rate ``alpha`` and per-node ``Sigma``."""

    Sigma: list
    eta: float = 300.0
    J: int = 10
    alpha: float = 0.3

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")
        if int(self.J) != self.J or self.J < 1:
            raise ConfigurationError("J must be a positive integer")
        self.J = int(self.J)
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in (0, 1]")
        self.Sigma = [np.array(S, dtype=float, ndmin=2) for S in self.Sigma]
        for k, S in enumerate(self.Sigma):
            if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12):
                raise ConfigurationError(f"Sigma[{k}] is not symmetric")
            if np.linalg.eigvalsh(symmetrize(S)).min() <= 0:
                raise ConfigurationError(f"Sigma[{k}] is not positive definite")
        self._Sinv = [np.linalg.inv(S) for S in self.Sigma]

    @property
    def N(self):
        return len(self.Sigma)

    @property
    def Sinv(self):
        return self._Sinv

    @property
    def score_budget(self):
        """Per-step bound ``alpha * eta / J`` on the summed expected score."""
        return self.alpha * self.eta / self.J


@dataclass
class DetectorState:
    """Ring buffer of the last ``J`` quadratic scores of every node."""

    ring: np.ndarray
    pos: int = 0
    count: int = 0
    alarms: np.ndarray = field(default=None)
    It: bool = False

    @classmethod
    def initial(cls, N, J):
        return cls(np.zeros((N, J)), 0, 0, np.zeros(N, dtype=bool), False)

    @property
    def statistic(self):
        return self.ring.sum(axis=1)

    def buffered(self):
        """Scores currently in the window, oldest first, per node."""
        J = self.ring.shape[1]
        order = [(self.pos - self.count + i) % J for i in range(self.count)]
        return self.ring[:, order]


def detector_step(state: DetectorState, innovations, config: DetectorConfig):
    """Push one slot of innovations; returns ``(new_state, alarms, I_t)``.

    Before ``J`` slots have been seen the window holds whatever is available.
    """
    if len(innovations) != config.N:
        raise ConfigurationError("one innovation per node is required")
    scores = np.array([float(z @ Si @ z) for z, Si in
                       zip((np.asarray(z, dtype=float) for z in innovations), config.Sinv)])
    ring = state.ring.copy()
    ring[:, state.pos] = scores
    J = ring.shape[1]
    new = DetectorState(ring, (state.pos + 1) % J, min(state.count + 1, J))
    new.alarms = new.statistic >= config.eta
    new.It = bool(new.alarms.any())
    return new, new.alarms.copy(), new.It


def calibrate_sigma(innovations, burn_in=1000, min_samples=1000):
    """Post-burn-in sample covariance of every node's innovation sequence.

    ``innovations`` is an ``(steps, N, p)`` array or anything with an
    ``innovations`` attribute of that shape.
    """
    z = np.asarray(getattr(innovations, "innovations", innovations), dtype=float)
    if z.ndim != 3:
        raise ConfigurationError("innovations must have shape (steps, N, p)")
    if burn_in < 0 or burn_in >= z.shape[0]:
        raise ConfigurationError(f"burn_in={burn_in} leaves no samples out of {z.shape[0]}")
    if z.shape[0] - burn_in < min_samples:
        raise ConfigurationError(f"need at least {min_samples} samples after burn-in, got {z.shape[0] - burn_in}")
    out = []
    for k in range(z.shape[1]):
        zk = z[burn_in:, k]
        S = symmetrize(np.atleast_2d(np.cov(zk, rowvar=False)))
        if np.linalg.eigvalsh(S).min() <= 0:
            S = S + JITTER * np.eye(S.shape[0])
        w = np.linalg.eigvalsh(S)
        if not np.all(np.isfinite(w)) or w.min() <= 0 or w.max() / w.min() > 1e14:
            raise CalibrationError(f"node {k}: innovation covariance is singular")
        out.append(S)
    return out


def detection_probability(alarm_series, burn_in=0):
    """Fraction of slots after ``burn_in`` in which the global alarm was raised."""
    a = np.asarray(alarm_series, dtype=bool).ravel()
    if a.size == 0:
        raise ConfigurationError("alarm series is empty")
    if burn_in >= a.size:
        raise ConfigurationError("burn_in covers the whole series")
    return float(a[burn_in:].mean())


def markov_bound(expected_scores, config: DetectorConfig):
    """``(J / eta) * sum_k E[z~_k' Sigma_k^{-1} z~_k]``, an upper bound on the detection rate."""
    s = np.asarray(expected_scores, dtype=float)
    if np.any(s < 0):
        raise ConfigurationError("scores must be non-negative")
    return float(config.J / config.eta * s.sum())


def export_alarm_csv(path, scores, window, alarms, t0=1):
    """Write ``(t, node, score, window_stat, alarm, I_t)`` rows."""
    scores, window, alarms = np.asarray(scores), np.asarray(window), np.asarray(alarms, dtype=bool)
    It = alarms.any(axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "score", "window_stat", "alarm", "I_t"])
        for s in range(scores.shape[0]):
            for k in range(scores.shape[1]):
                w.writerow([t0 + s, k, repr(float(scores[s, k])), repr(float(window[s, k])),
                            int(alarms[s, k]), int(It[s])])
