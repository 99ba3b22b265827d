"""Linear attack model, one-step conditional moments and error-dynamics stability.

Given everything the attacker knows at ``t-1`` (the node estimates and its own
filter ``N(xhat, R)`` for the true state), node ``k``'s innovation is Gaussian:

    z_k ~ N(H A (xhat - xhat_k),  H A R A' H' + H Q H' + R_k)

so the attacked innovation ``z~ = T z + b`` has mean ``mu = T h + M theta + d`` and
covariance ``Z = T P T' + U'U``, and the next deviation is
``theta_k(t) = r0_k + G_k z~`` with ``r0_k = xbar_k - x* + C_k sum_j (xbar_j - xbar_k)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError
from .lgcore import AttackerFilterState
from .network import NetworkModel, closed_loop_matrix
from .rng import as_generator


@dataclass
class AttackParams:
    """Per-node linear attack ``z~ = T z + b``, ``b ~ N(M theta + d, U'U)``.

    ``attacked`` lists the nodes whose innovation is modified; the others
    behave as ``T = I`` and ``b = 0`` regardless of their stored parameters.
    """

    T: list
    U: list
    M: list
    d: list
    x_star: np.ndarray
    attacked: tuple = None

    def __post_init__(self):
        self.T = [np.array(t, dtype=float, ndmin=2) for t in self.T]
        self.U = [np.array(u, dtype=float, ndmin=2) for u in self.U]
        self.M = [np.array(m, dtype=float, ndmin=2) for m in self.M]
        self.d = [np.array(v, dtype=float, ndmin=1) for v in self.d]
        self.x_star = np.asarray(self.x_star, dtype=float)
        n = len(self.T)
        if not len(self.U) == len(self.M) == len(self.d) == n:
            raise ConfigurationError("T, U, M and d need one entry per node")
        q = self.x_star.shape[0]
        for k in range(n):
            p = self.T[k].shape[0]
            if self.T[k].shape != (p, p) or self.U[k].shape != (p, p) or self.M[k].shape != (p, q) \
                    or self.d[k].shape != (p,):
                raise ConfigurationError(f"node {k}: attack parameter shapes are inconsistent")
        self.attacked = tuple(range(n)) if self.attacked is None else tuple(sorted(set(self.attacked)))
        if any(k < 0 or k >= n for k in self.attacked):
            raise ConfigurationError("attacked node index out of range")

    @property
    def N(self):
        return len(self.T)

    @classmethod
    def identity(cls, net: NetworkModel, x_star, attacked=None):
        ps = [s.p for s in net.sensors]
        return cls([np.eye(p) for p in ps], [np.zeros((p, p)) for p in ps],
                   [np.zeros((p, net.q)) for p in ps], [np.zeros(p) for p in ps], x_star, attacked)

    def is_attacked(self, k):
        return k in self.attacked

    def S(self, k):
        return self.U[k].T @ self.U[k]

    def effective(self, k):
        """``(T, S, M, d)`` actually applied at node ``k``."""
        if self.is_attacked(k):
            return self.T[k], self.S(k), self.M[k], self.d[k]
        p, q = self.M[k].shape
        return np.eye(p), np.zeros((p, p)), np.zeros((p, q)), np.zeros(p)

    def copy(self):
        return AttackParams([t.copy() for t in self.T], [u.copy() for u in self.U], [m.copy() for m in self.M],
                            [v.copy() for v in self.d], self.x_star.copy(), self.attacked)

    def stacked(self):
        """``(T, U, M, d)`` as stacked arrays (requires equal ``p_k``)."""
        return np.array(self.T), np.array(self.U), np.array(self.M), np.array(self.d)


@dataclass
class MomentReport:
    theta_sq: np.ndarray   # per node E ||theta_k(t)||^2
    z_quad: np.ndarray     # per node E z~' Sigma^-1 z~
    f_t: float
    f_reg: float


@dataclass
class StepContext:
    """Everything the moments need at ``t-1`` that does not depend on the attack parameters."""

    theta: np.ndarray   # (N, q) theta_k(t-1)
    r0: list            # deterministic part of theta_k(t) before the innovation term
    h: list             # mean of the un-attacked innovation, H A (xhat - xhat_k)
    P: list             # covariance of the un-attacked innovation
    G: list
    Sinv: list

    @classmethod
    def build(cls, theta_prev, filt: AttackerFilterState, net: NetworkModel, Sigma=None):
        theta = np.asarray(theta_prev, dtype=float)
        if theta.shape != (net.N, net.q):
            raise ConfigurationError(f"theta_prev must have shape {(net.N, net.q)}")
        A, Q = net.process.A, net.process.Q
        x_star = filt.x_star
        xhat_nodes = theta + x_star
        xbar = xhat_nodes @ A.T
        r0, h, P = [], [], []
        for k, nbrs in enumerate(net.topology.neighbors):
            H, R = net.sensors[k].H, net.sensors[k].R
            cons = (xbar[nbrs] - xbar[k]).sum(axis=0) if len(nbrs) else np.zeros(net.q)
            r0.append(xbar[k] - x_star + net.gains.C[k] @ cons)
            HA = H @ A
            h.append(HA @ (filt.xhat - xhat_nodes[k]))
            P.append(HA @ filt.Rcov @ HA.T + H @ Q @ H.T + R)
        if Sigma is None:
            Sinv = [np.eye(s.p) for s in net.sensors]
        else:
            Sinv = [np.linalg.inv(np.asarray(S, dtype=float)) for S in Sigma]
        return cls(theta, r0, h, P, list(net.gains.G), Sinv)

    def node(self, k, T, S, M, d):
        """Mean and covariance of ``z~_k`` and the two conditional moments."""
        mu = T @ self.h[k] + M @ self.theta[k] + d
        Z = T @ self.P[k] @ T.T + S
        G = self.G[k]
        m = self.r0[k] + G @ mu
        theta_sq = float(m @ m + np.trace(G @ Z @ G.T))
        z_quad = float(mu @ self.Sinv[k] @ mu + np.trace(self.Sinv[k] @ Z))
        return theta_sq, z_quad

    def report(self, params: AttackParams, lam=0.0, xi=0.0) -> MomentReport:
        ts, zq = np.zeros(params.N), np.zeros(params.N)
        for k in range(params.N):
            ts[k], zq[k] = self.node(k, *params.effective(k))
        f_t = float(ts.sum() + lam * zq.sum())
        reg = sum(float(np.sum(params.M[k] ** 2)) for k in params.attacked)
        return MomentReport(ts, zq, f_t, f_t + xi * reg)


def apply_attack(z, theta_prev, params: AttackParams, node, rng=None, prediction=None):
    """Attacked innovation for one node, and the matching forged observation.

    ``prediction`` is ``H_k A xhat_k(t-1)``; when given, the forged observation
    ``y~ = z~ + prediction`` is returned as the second element (else ``None``).
    """
    z = np.asarray(z, dtype=float)
    T, S, M, d = params.effective(node)
    mean = M @ np.asarray(theta_prev, dtype=float) + d
    U = params.U[node] if params.is_attacked(node) else np.zeros_like(S)
    if np.any(U):
        b = mean + U.T @ as_generator(rng).standard_normal(U.shape[0])
    else:
        b = mean
    z_tilde = T @ z + b
    y_tilde = None if prediction is None else z_tilde + prediction
    return z_tilde, y_tilde


def expected_theta_sq(node, theta_prev, filt: AttackerFilterState, params: AttackParams, net: NetworkModel):
    """``E[||theta_k(t)||^2 | F_{t-1}]``."""
    ctx = StepContext.build(theta_prev, filt, net)
    return ctx.node(node, *params.effective(node))[0]


def expected_z_quad(node, theta_prev, filt: AttackerFilterState, params: AttackParams, net: NetworkModel, Sigma):
    """``E[z~_k' Sigma_k^{-1} z~_k | F_{t-1}]``."""
    ctx = StepContext.build(theta_prev, filt, net, Sigma)
    return ctx.node(node, *params.effective(node))[1]


def composite_f(theta_prev, filt: AttackerFilterState, params: AttackParams, net: NetworkModel, Sigma,
                lam=0.0, xi=0.0) -> MomentReport:
    """Sum over nodes of ``theta_sq + lam * z_quad``, plus the ``xi ||M||_F^2`` regularized value."""
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    return StepContext.build(theta_prev, filt, net, Sigma).report(params, lam, xi)


def monte_carlo_moments(theta_prev, filt: AttackerFilterState, params: AttackParams, net: NetworkModel, Sigma,
                        n, rng):
    """Brute-force one-step propagation with ``n`` draws; returns per-node ``(theta_sq, z_quad)`` arrays.

    Draws the true state from the attacker's posterior, propagates plant,
    sensors, attack and the consensus update directly.
    """
    gen = as_generator(rng)
    A, q, N = net.process.A, net.q, net.N
    theta = np.asarray(theta_prev, dtype=float)
    xhat_nodes = theta + filt.x_star
    xbar = xhat_nodes @ A.T
    Lr0 = np.linalg.cholesky(filt.Rcov + 1e-300 * np.eye(q)) if np.any(filt.Rcov) else np.zeros((q, q))
    x_prev = filt.xhat + gen.standard_normal((n, q)) @ Lr0.T
    x = x_prev @ A.T + gen.standard_normal((n, q)) @ net.process.noise_factor.T
    ts, zq = np.zeros(N), np.zeros(N)
    Sinv = [np.linalg.inv(S) for S in Sigma]
    for k, nbrs in enumerate(net.topology.neighbors):
        s = net.sensors[k]
        y = x @ s.H.T + gen.standard_normal((n, s.p)) @ s.noise_factor.T
        z = y - s.H @ xbar[k]
        T, S, M, d = params.effective(k)
        U = params.U[k] if params.is_attacked(k) else np.zeros((s.p, s.p))
        b = (M @ theta[k] + d) + gen.standard_normal((n, s.p)) @ U
        zt = z @ T.T + b
        cons = (xbar[nbrs] - xbar[k]).sum(axis=0) if len(nbrs) else np.zeros(q)
        th = xbar[k] + zt @ net.gains.G[k].T + net.gains.C[k] @ cons - filt.x_star
        ts[k] = np.mean(np.sum(th * th, axis=1))
        zq[k] = np.mean(np.einsum("ni,ij,nj->n", zt, Sinv[k], zt))
    return ts, zq


@dataclass
class StabilityMatrix:
    M: np.ndarray
    q: int

    @property
    def N(self):
        return self.M.shape[0] // self.q


def build_stability_matrix(params: AttackParams, net: NetworkModel) -> StabilityMatrix:
    """Block matrix of the attacked error recursion ``theta(t) = M theta(t-1) + noise``."""
    Ts = [params.effective(k)[0] for k in range(net.N)]
    return StabilityMatrix(closed_loop_matrix(net.process.A, [s.H for s in net.sensors], net.gains.G,
                                              net.gains.C, Ts, net.topology), net.q)


def spectral_radius(M, method="eig", tol=1e-12, max_iter=200):
    """Largest eigenvalue modulus.

    ``method="power"`` uses normalized repeated squaring, ``||M^(2^j)||^(1/2^j)``,
    which also handles complex dominant pairs.
    """
    M = M.M if isinstance(M, StabilityMatrix) else np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    if method == "eig":
        return float(np.abs(np.linalg.eigvals(M)).max())
    if method != "power":
        raise ConfigurationError(f"unknown method {method!r}")
    B = M.copy()
    log_scale, est, prev = 0.0, None, None
    for j in range(max_iter):
        nrm = np.linalg.norm(B, 2)
        if nrm == 0.0:
            return 0.0
        if not np.isfinite(nrm):
            break
        est = np.exp((log_scale + np.log(nrm)) / 2.0 ** j)
        if prev is not None and abs(est - prev) <= tol * max(est, 1e-300):
            return float(est)
        prev = est
        log_scale = 2.0 * (log_scale + np.log(nrm))
        B = B / nrm
        B = B @ B
    raise NumericalError(f"spectral radius iteration did not converge (last estimate {est})")
