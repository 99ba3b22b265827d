"""Seeded random plant, sensor and network instances."""
from __future__ import annotations

import numpy as np

from ..errors import GainSynthesisError, GenerationError
from ..lgcore import ProcessModel, SensorModel
from ..network import NetworkModel, build_topology, closed_loop_matrix, compute_kcf_gains
from ..rng import RngStream

MAX_REDRAWS = 20


def observable(A, H):
    """Rank test on the observability matrix ``[H; HA; ...; HA^(q-1)]``."""
    q = A.shape[0]
    blocks, M = [], np.eye(q)
    for _ in range(q):
        blocks.append(H @ M)
        M = A @ M
    return np.linalg.matrix_rank(np.vstack(blocks)) == q


def random_plant(q, gen, radius_range=(0.5, 0.95), noise_scale=0.1):
    A = gen.standard_normal((q, q))
    rho = np.abs(np.linalg.eigvals(A)).max()
    A *= gen.uniform(*radius_range) / rho
    L = noise_scale * gen.standard_normal((q, q))
    return ProcessModel(A, L @ L.T)


def random_sensor(p, q, gen, offdiag_scale=0.1):
    H = gen.standard_normal((p, q))
    E = offdiag_scale * gen.standard_normal((p, p))
    E = 0.5 * (E + E.T)
    np.fill_diagonal(E, 0.0)
    # strict diagonal dominance makes R positive definite
    R = E + np.diag(np.abs(E).sum(axis=1) + gen.uniform(0.5, 1.5, p))
    return SensorModel(H, R)


def generate_instance(config, rng=None) -> NetworkModel:
    """Draw ``A``, ``Q``, ``H_k``, ``R_k``, build the topology and synthesize gains.

    Draws failing the observability check or the closed-loop stability check
    are discarded, up to 20 times.
    """
    stream = rng if rng is not None else RngStream(config.instance_seed, 0)
    gen = stream.generator if isinstance(stream, RngStream) else np.random.default_rng(stream)
    topology = build_topology(config.topology, config.N)
    reasons = []
    for _ in range(MAX_REDRAWS):
        process = random_plant(config.q, gen, tuple(config.plant_radius), config.noise_scale)
        sensors = [random_sensor(config.p, config.q, gen) for _ in range(config.N)]
        if np.linalg.matrix_rank(np.vstack([s.H for s in sensors])) < config.q or not all(
                np.linalg.matrix_rank(s.H) == config.q and observable(process.A, s.H) for s in sensors):
            reasons.append("unobservable draw")
            continue
        try:
            gains = compute_kcf_gains(process, sensors, topology, config.consensus_weight)
        except GainSynthesisError as exc:
            reasons.append(str(exc))
            continue
        M = closed_loop_matrix(process.A, [s.H for s in sensors], gains.G, gains.C,
                               [np.eye(config.p)] * config.N, topology)
        if np.abs(np.linalg.eigvals(M)).max() >= 1.0:
            reasons.append("closed loop unstable")
            continue
        return NetworkModel(process, sensors, topology, gains)
    raise GenerationError(f"no admissible instance after {MAX_REDRAWS} draws: {reasons[-1]}")
