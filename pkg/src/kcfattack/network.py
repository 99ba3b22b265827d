"""Kalman-consensus filter network: topology, gains and the per-node update."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_discrete_are

from .errors import ConfigurationError, GainSynthesisError, InstabilityError
from .lgcore import ProcessModel, SensorModel, check_dims, matrix_from_json, matrix_to_json, symmetrize


@dataclass
class Topology:
    """Undirected connected graph without self-loops."""

    adjacency: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        adj = np.asarray(self.adjacency).astype(bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ConfigurationError("adjacency must be a square matrix")
        if adj.shape[0] < 1:
            raise ConfigurationError("topology needs at least one node")
        if not np.array_equal(adj, adj.T):
            raise ConfigurationError("adjacency must be symmetric")
        if adj.diagonal().any():
            raise ConfigurationError("self-loops are not allowed")
        if not _connected(adj):
            raise ConfigurationError("topology is not connected")
        self.adjacency = adj

    @property
    def N(self):
        return self.adjacency.shape[0]

    @property
    def neighbors(self):
        return [np.flatnonzero(row) for row in self.adjacency]

    @property
    def degrees(self):
        return self.adjacency.sum(axis=1).astype(int)

    def csr(self):
        """Neighbor lists as ``(indptr, indices)`` int64 arrays."""
        nbrs = self.neighbors
        indptr = np.zeros(self.N + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(n) for n in nbrs])
        indices = np.concatenate(nbrs).astype(np.int64) if indptr[-1] else np.zeros(0, dtype=np.int64)
        return indptr, indices

    def to_json(self):
        return {"kind": self.kind, "adjacency": self.adjacency.astype(int).tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["adjacency"], dtype=bool), obj.get("kind", "custom"))


def _connected(adj):
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        k = stack.pop()
        for j in np.flatnonzero(adj[k] & ~seen):
            seen[j] = True
            stack.append(j)
    return bool(seen.all())


def build_topology(kind, N=6, adjacency=None) -> Topology:
    """Build a ``line``, ``regular3-hexagon`` or ``custom`` topology.

    The 3-regular hexagon is the 6-cycle plus the three long diagonals.
    """
    if kind == "custom":
        if adjacency is None:
            raise ConfigurationError("custom topology needs an adjacency matrix")
        return Topology(adjacency, "custom")
    if N < 2:
        raise ConfigurationError("need at least two nodes")
    adj = np.zeros((N, N), dtype=bool)
    if kind == "line":
        for k in range(N - 1):
            adj[k, k + 1] = adj[k + 1, k] = True
    elif kind == "regular3-hexagon":
        if N != 6:
            raise ConfigurationError("the 3-regular hexagon has exactly 6 nodes")
        for k in range(6):
            adj[k, (k + 1) % 6] = adj[(k + 1) % 6, k] = True
            adj[k, (k + 3) % 6] = True
    else:
        raise ConfigurationError(f"unknown topology kind {kind!r}")
    return Topology(adj, kind)


@dataclass
class KcfGains:
    """Kalman gains ``G[k]`` (q x p_k) and consensus gains ``C[k]`` (q x q)."""

    G: list
    C: list
    consensus_scale: float = 1.0

    def to_json(self):
        return {
            "G": [matrix_to_json(g) for g in self.G],
            "C": [matrix_to_json(c) for c in self.C],
            "consensus_scale": self.consensus_scale,
        }

    @classmethod
    def from_json(cls, obj):
        return cls([matrix_from_json(g) for g in obj["G"]], [matrix_from_json(c) for c in obj["C"]],
                   obj.get("consensus_scale", 1.0))


@dataclass
class NetworkModel:
    """Everything the agent nodes know: plant, sensors, graph and gains."""

    process: ProcessModel
    sensors: list
    topology: Topology
    gains: KcfGains

    def __post_init__(self):
        check_dims(self.process, self.sensors)
        if len(self.sensors) != self.topology.N:
            raise ConfigurationError("one sensor model per node is required")
        for k, (g, c, s) in enumerate(zip(self.gains.G, self.gains.C, self.sensors)):
            if g.shape != (self.q, s.p) or c.shape != (self.q, self.q):
                raise ConfigurationError(f"node {k}: gain shapes {g.shape}, {c.shape} do not match sensors")

    @property
    def N(self):
        return self.topology.N

    @property
    def q(self):
        return self.process.q

    @property
    def p(self):
        ps = {s.p for s in self.sensors}
        if len(ps) != 1:
            raise ConfigurationError("the fused simulator needs the same p_k at every node")
        return ps.pop()


@dataclass
class NodeState:
    xhat: np.ndarray
    xbar: np.ndarray
    theta: np.ndarray


def _local_prior_covariance(A, H, Q, R):
    try:
        P = solve_discrete_are(A.T, H.T, Q, R)
    except (np.linalg.LinAlgError, ValueError):
        # the Riccati solver needs a stabilizing solution; iterate the recursion instead
        P = Q.copy()
        for _ in range(100000):
            S = H @ P @ H.T + R
            Pn = symmetrize(A @ (P - P @ H.T @ np.linalg.solve(S, H @ P)) @ A.T + Q)
            if not np.all(np.isfinite(Pn)) or np.abs(Pn).max() > 1e12:
                raise GainSynthesisError("local Riccati recursion diverges; (A, H_k) is not detectable")
            if np.abs(Pn - P).max() < 1e-14:
                P = Pn
                break
            P = Pn
    return symmetrize(P)


def closed_loop_matrix(A, Hs, Gs, Cs, Ts, topology: Topology):
    """Block matrix with diagonal ``A - G T H A - N_k C A`` and neighbor blocks ``C A``."""
    q, N = A.shape[0], topology.N
    M = np.zeros((N * q, N * q))
    deg = topology.degrees
    for k, nbrs in enumerate(topology.neighbors):
        blk = slice(k * q, (k + 1) * q)
        M[blk, blk] = A - Gs[k] @ Ts[k] @ Hs[k] @ A - deg[k] * Cs[k] @ A
        for j in nbrs:
            M[blk, j * q:(j + 1) * q] = Cs[k] @ A
    return M


def _radius(M):
    return float(np.abs(np.linalg.eigvals(M)).max()) if M.size else 0.0


def compute_kcf_gains(process: ProcessModel, sensors: Sequence[SensorModel], topology: Topology,
                      consensus_weight=1.0, margin=1e-3) -> KcfGains:
    """Steady-state local Kalman gains plus a consensus gain proportional to the local prior covariance.

    ``C_k = s * w / (1 + ||P_k||_F) * P_k`` where ``s`` is 1 if the closed loop is
    already stable, otherwise the largest scale in ``[0, 1]`` found by bisection
    that keeps the spectral radius below ``1 - margin``.
    """
    check_dims(process, sensors)
    if len(sensors) != topology.N:
        raise ConfigurationError("one sensor model per node is required")
    if consensus_weight < 0:
        raise ConfigurationError("consensus_weight must be non-negative")
    A, Q = process.A, process.Q
    Gs, Cbase = [], []
    for s in sensors:
        P = _local_prior_covariance(A, s.H, Q, s.R)
        Gs.append(np.linalg.solve(s.H @ P @ s.H.T + s.R, s.H @ P).T)
        Cbase.append(consensus_weight / (1.0 + np.linalg.norm(P)) * P)
    Hs = [s.H for s in sensors]
    Ts = [np.eye(s.p) for s in sensors]

    def rho(scale):
        return _radius(closed_loop_matrix(A, Hs, Gs, [scale * c for c in Cbase], Ts, topology))

    scale = 1.0
    if rho(1.0) >= 1.0 - margin:
        lo, hi = 0.0, 1.0
        if rho(0.0) >= 1.0 - margin:
            raise GainSynthesisError("decoupled local filters are unstable; check observability of (A, H_k)")
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if rho(mid) < 1.0 - margin:
                lo = mid
            else:
                hi = mid
        scale = lo
    Cs = [scale * c for c in Cbase]
    if rho(scale) >= 1.0:
        raise GainSynthesisError("closed loop unstable; use a smaller consensus_weight")
    return KcfGains(Gs, Cs, scale)


def kcf_step(states, inputs, net: NetworkModel, x_star=None):
    """Synchronous three-step KCF update of every node.

    ``states`` is a list of :class:`NodeState` (or an ``(N, q)`` array of
    previous estimates); ``inputs`` holds the observation each node receives.
    """
    if isinstance(states, np.ndarray):
        xprev = np.asarray(states, dtype=float)
    else:
        xprev = np.array([s.xhat for s in states], dtype=float)
    if xprev.shape != (net.N, net.q):
        raise ConfigurationError(f"expected {net.N} estimates of dimension {net.q}")
    if len(inputs) != net.N:
        raise ConfigurationError("one observation per node is required")
    x_star = np.zeros(net.q) if x_star is None else np.asarray(x_star, dtype=float)
    A = net.process.A
    xbar = xprev @ A.T
    out = []
    for k, nbrs in enumerate(net.topology.neighbors):
        H = net.sensors[k].H
        y = np.asarray(inputs[k], dtype=float)
        if y.shape != (H.shape[0],):
            raise ConfigurationError(f"node {k}: observation has shape {y.shape}")
        consensus = (xbar[nbrs] - xbar[k]).sum(axis=0) if len(nbrs) else np.zeros(net.q)
        xhat = xbar[k] + net.gains.G[k] @ (y - H @ xbar[k]) + net.gains.C[k] @ consensus
        out.append(NodeState(xhat, xbar[k].copy(), xhat - x_star))
    return out


@dataclass
class TrajectoryRecord:
    """Per-step record of a simulated path, rows ``t = 1 .. steps``."""

    x: np.ndarray            # (steps, q) true states
    xhat: np.ndarray         # (steps, N, q) node estimates
    innovations: np.ndarray  # (steps, N, p) innovations seen by the nodes
    x0: np.ndarray = field(default=None)

    def __len__(self):
        return self.x.shape[0]

    def to_csv(self, path):
        steps, N, q = self.xhat.shape
        p = self.innovations.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "node"] + [f"xhat_{i}" for i in range(q)] + [f"innov_{i}" for i in range(p)])
            for t in range(steps):
                for k in range(N):
                    w.writerow([t + 1, k] + [repr(float(v)) for v in self.xhat[t, k]]
                               + [repr(float(v)) for v in self.innovations[t, k]])


def simulate_no_attack(net: NetworkModel, steps, seed, stream_base=0, xhat0=None, sigma0=None,
                       backend=None) -> TrajectoryRecord:
    """Simulate the KCF without attack and record innovations and estimates."""
    from .engine import PathState, SimInstance, run_block, no_attack_policy

    inst = SimInstance.from_network(net, x_star=np.zeros(net.q), sigma=None, eta=np.inf, J=1, sigma0=sigma0,
                                   attacker_filter=False)
    state = PathState.start(inst, seed, stream_base=stream_base, xhat0=xhat0)
    res = run_block(inst, state, no_attack_policy(), steps, record=True, backend=backend)
    if res.diverged:
        raise InstabilityError(f"estimates diverged at t={res.diverged_at}")
    return TrajectoryRecord(res.x, res.xhat, res.z, state.x0.copy())


def save_network(net: NetworkModel, path):
    from .lgcore import models_to_json

    obj = models_to_json(net.process, net.sensors)
    obj["topology"] = net.topology.to_json()
    obj["gains"] = net.gains.to_json()
    Path(path).write_text(json.dumps(obj, indent=2))


def load_network(path) -> NetworkModel:
    from .lgcore import models_from_json

    obj = json.loads(Path(path).read_text())
    process, sensors = models_from_json(obj)
    return NetworkModel(process, sensors, Topology.from_json(obj["topology"]), KcfGains.from_json(obj["gains"]))
