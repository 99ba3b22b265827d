"""Fused closed-loop simulator shared by the baseline, the attacks and the harness.

A :class:`SimInstance` packs the network, detector and attacker-filter data
into the contiguous arrays the step kernel consumes.  A :class:`PathState`
carries one sample path (true state, node estimates, attacker filter,
detector ring buffer and random streams).  :func:`run_block` advances a path
by a number of steps under an attack :class:`Policy`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .lgcore import gain_schedule, initial_state
from .rng import ATTACK_NOISE, INITIAL_STATE, PERTURBATION, PLANT_NOISE, SENSOR_NOISE, RngStream

MODE_NONE, MODE_STATIC, MODE_KKT, MODE_SPSA = 0, 1, 2, 3


def _c(a, dtype=np.float64):
    return np.ascontiguousarray(a, dtype=dtype)


@dataclass
class SimInstance:
    """Kernel-ready arrays for one network, detector and target."""

    net: object
    x_star: np.ndarray
    Sigma: np.ndarray      # (N, p, p) detector covariances
    eta: float
    J: int
    sigma0: np.ndarray
    attacked: np.ndarray   # (N,) int8 mask of the attack set
    attacker_filter: bool = True
    A: np.ndarray = field(init=False, repr=False)
    Lq: np.ndarray = field(init=False, repr=False)
    H: np.ndarray = field(init=False, repr=False)
    Lr: np.ndarray = field(init=False, repr=False)
    G: np.ndarray = field(init=False, repr=False)
    C: np.ndarray = field(init=False, repr=False)
    Sinv: np.ndarray = field(init=False, repr=False)
    GtG: np.ndarray = field(init=False, repr=False)
    Pbase: np.ndarray = field(init=False, repr=False)
    Ksched: np.ndarray = field(init=False, repr=False)
    Rsched: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        net = self.net
        N, q, p = net.N, net.q, net.p
        if self.J < 1:
            raise ConfigurationError("window length J must be at least 1")
        if not self.eta > 0:
            raise ConfigurationError("threshold eta must be positive")
        self.x_star = _c(self.x_star)
        if self.x_star.shape != (q,):
            raise ConfigurationError(f"x_star must have shape ({q},)")
        self.Sigma = _c(self.Sigma)
        if self.Sigma.shape != (N, p, p):
            raise ConfigurationError(f"Sigma must have shape {(N, p, p)}")
        self.attacked = _c(self.attacked, np.int8)
        self.A = _c(net.process.A)
        self.Lq = _c(net.process.noise_factor)
        self.H = _c([s.H for s in net.sensors])
        self.Lr = _c([s.noise_factor for s in net.sensors])
        self.G = _c(net.gains.G)
        self.C = _c(net.gains.C)
        self.Sinv = _c(np.linalg.inv(self.Sigma))
        self.GtG = _c(self.G.transpose(0, 2, 1) @ self.G)
        Q = net.process.Q
        self.Pbase = _c([s.H @ Q @ s.H.T + s.R for s in net.sensors])
        if self.attacker_filter:
            sched = gain_schedule(net.process, net.sensors, self.sigma0, tol=1e-13)
            self.Ksched, self.Rsched = _c(sched.K), _c(sched.Rcov)
        else:
            # no attack policy reads the attacker's filter; keep it frozen at x(0) = 0
            self.Ksched = np.zeros((1, q, N * p))
            self.Rsched = _c(self.sigma0[None])
        self.nbr_ptr, self.nbr_idx = net.topology.csr()

    @classmethod
    def from_network(cls, net, x_star, sigma=None, eta=300.0, J=10, sigma0=None, attacked=None,
                     attacker_filter=True):
        """``sigma=None`` uses identity detector covariances.

        ``attacker_filter=False`` skips the attacker's filter, which only the
        no-attack simulation may do.
        """
        N, p, q = net.N, net.p, net.q
        Sigma = np.broadcast_to(np.eye(p), (N, p, p)) if sigma is None else np.asarray(sigma, dtype=float)
        mask = np.ones(N, dtype=np.int8)
        if attacked is not None:
            mask[:] = 0
            mask[list(attacked)] = 1
        sigma0 = np.eye(q) if sigma0 is None else np.asarray(sigma0, dtype=float)
        return cls(net, np.asarray(x_star, dtype=float), Sigma, float(eta), int(J), sigma0, mask, attacker_filter)

    @property
    def N(self):
        return self.H.shape[0]

    @property
    def p(self):
        return self.H.shape[1]

    @property
    def q(self):
        return self.H.shape[2]


@dataclass
class PathState:
    """Mutable state of one sample path."""

    x: np.ndarray
    xhat: np.ndarray
    xatt: np.ndarray
    ring: np.ndarray
    meta: np.ndarray
    x0: np.ndarray
    seed: int
    stream_base: int
    plant: RngStream
    sensor: RngStream
    attack: RngStream
    perturb: RngStream

    @classmethod
    def start(cls, inst: SimInstance, seed, stream_base=0, xhat0=None):
        q, N = inst.q, inst.N
        x0 = initial_state(q, RngStream(seed, stream_base + INITIAL_STATE), inst.sigma0)
        if xhat0 is None:
            xhat = np.zeros((N, q))
        else:
            xhat = _c(np.broadcast_to(np.asarray(xhat0, dtype=float), (N, q)))
        return cls(
            x=x0.copy(), xhat=_c(xhat), xatt=np.zeros(q), ring=np.zeros((N, inst.J)),
            meta=np.zeros(3, dtype=np.int64), x0=x0, seed=seed, stream_base=stream_base,
            plant=RngStream(seed, stream_base + PLANT_NOISE),
            sensor=RngStream(seed, stream_base + SENSOR_NOISE),
            attack=RngStream(seed, stream_base + ATTACK_NOISE),
            perturb=RngStream(seed, stream_base + PERTURBATION),
        )

    @property
    def t(self):
        return int(self.meta[0])

    def theta(self, x_star):
        return self.xhat - x_star


@dataclass
class Policy:
    """What the attacker injects at every step.

    ``T``, ``M`` and ``d`` are updated in place by the SPSA mode.
    ``a`` and ``c`` are the SPSA step and perturbation schedules as functions of ``t``.
    """

    mode: int
    T: np.ndarray = None
    U: np.ndarray = None
    M: np.ndarray = None
    d: np.ndarray = None
    WiGt: np.ndarray = None
    lam: float = 0.0
    xi: float = 0.0
    bound: float = 1e3
    update_T: bool = False
    a: object = None
    c: object = None

    def materialize(self, inst: SimInstance):
        N, p, q = inst.N, inst.p, inst.q
        if self.T is None:
            self.T = np.tile(np.eye(p), (N, 1, 1))
        if self.U is None:
            self.U = np.zeros((N, p, p))
        if self.M is None:
            self.M = np.zeros((N, p, q))
        if self.d is None:
            self.d = np.zeros((N, p))
        if self.WiGt is None:
            self.WiGt = np.zeros((N, p, q))
        for name, shape in (("T", (N, p, p)), ("U", (N, p, p)), ("M", (N, p, q)), ("d", (N, p)),
                            ("WiGt", (N, p, q))):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ConfigurationError(f"policy {name} has shape {arr.shape}, expected {shape}")
            if not (arr.flags.c_contiguous and arr.dtype == np.float64):
                setattr(self, name, _c(arr))
        return self


def no_attack_policy():
    return Policy(MODE_NONE)


def static_policy(T=None, U=None, M=None, d=None):
    """Fixed linear attack ``z~ = T z + M theta + d + U' n``."""
    return Policy(MODE_STATIC, T=T, U=U, M=M, d=d)


def kkt_gain(inst: SimInstance, lam):
    """``(G'G + lam Sigma^{-1})^{-1} G'`` per node; minimum-norm solution when singular."""
    out = np.empty((inst.N, inst.p, inst.q))
    for k in range(inst.N):
        W = inst.GtG[k] + lam * inst.Sinv[k]
        Gt = inst.G[k].T
        try:
            if lam <= 0.0:
                raise np.linalg.LinAlgError
            out[k] = np.linalg.solve(W, Gt)
        except np.linalg.LinAlgError:
            out[k] = np.linalg.lstsq(W, Gt, rcond=None)[0]
    return out


def kkt_policy(inst: SimInstance, lam, T=None):
    """Per-step KKT-optimal injection at multiplier ``lam`` (``M = 0``, state-dependent ``d``)."""
    return Policy(MODE_KKT, T=T, WiGt=kkt_gain(inst, lam), lam=float(lam))


def spsa_policy(T, M, d, lam, xi, a, c, bound=1e3, update_T=False):
    return Policy(MODE_SPSA, T=T, M=M, d=d, lam=float(lam), xi=float(xi), bound=float(bound),
                  update_T=bool(update_T), a=a, c=c)


@dataclass
class BlockResult:
    steps: int
    dev: np.ndarray
    It: np.ndarray
    score_sum: np.ndarray
    scores: np.ndarray
    exp_theta: np.ndarray
    exp_zq: np.ndarray
    x: np.ndarray = None
    xhat: np.ndarray = None
    z: np.ndarray = None
    ztil: np.ndarray = None
    window: np.ndarray = None
    alarms: np.ndarray = None
    diverged: bool = False
    diverged_at: int = None


def draw_noise(inst: SimInstance, state: PathState, policy: Policy, steps):
    """Pre-draw a block of noise; draw order does not depend on the block size."""
    N, p, q = inst.N, inst.p, inst.q
    wn = state.plant.standard_normal((steps, q))
    vn = state.sensor.standard_normal((steps, N, p))
    bn = state.attack.standard_normal((steps, N, p)) if policy.mode == MODE_STATIC else np.zeros((0, N, p))
    if policy.mode == MODE_SPSA:
        nT = N * p * p if policy.update_T else 0
        raw = state.perturb.rademacher((steps, nT + N * p * q + N * p))
        pT = _c(raw[:, :nT].reshape(steps, N, p, p)) if nT else np.zeros((0, N, p, p))
        pM = _c(raw[:, nT:nT + N * p * q].reshape(steps, N, p, q))
        pd = _c(raw[:, nT + N * p * q:].reshape(steps, N, p))
    else:
        pT, pM, pd = np.zeros((0, N, p, p)), np.zeros((0, N, p, q)), np.zeros((0, N, p))
    return wn, vn, bn, pT, pM, pd


def run_block(inst: SimInstance, state: PathState, policy: Policy, steps, record=False, moments=False,
              backend=None, diverge_at=1e9) -> BlockResult:
    """Advance ``state`` by ``steps`` steps under ``policy``."""
    steps = int(steps)
    if steps < 0:
        raise ConfigurationError("steps must be non-negative")
    if not inst.attacker_filter and (policy.mode in (MODE_KKT, MODE_SPSA) or moments):
        raise ConfigurationError("this instance was built without the attacker's filter")
    policy.materialize(inst)
    N, p, q = inst.N, inst.p, inst.q
    wn, vn, bn, pT, pM, pd = draw_noise(inst, state, policy, steps)
    t0 = state.t
    if policy.mode == MODE_SPSA:
        ts = np.arange(t0 + 1, t0 + steps + 1)
        a_s = _c([policy.a(t) for t in ts]) if steps else np.zeros(0)
        c_s = _c([policy.c(t) for t in ts]) if steps else np.zeros(0)
    else:
        a_s = c_s = np.zeros(0)
    dev = np.zeros(steps)
    It = np.zeros(steps, dtype=np.int8)
    score_sum = np.zeros(steps)
    scores = np.zeros((steps, N))
    exp_theta = np.zeros(steps)
    exp_zq = np.zeros(steps)
    rs = steps if record else 0
    x_out, xhat_out = np.zeros((rs, q)), np.zeros((rs, N, q))
    z_out, ztil_out = np.zeros((rs, N, p)), np.zeros((rs, N, p))
    window_out, alarm_out = np.zeros((rs, N)), np.zeros((rs, N), dtype=np.int8)
    kern = kernels.get_backend(backend)
    done = kern.simulate_block(
        int(policy.mode), inst.A, inst.Lq, inst.H, inst.Lr, inst.G, inst.C, inst.nbr_ptr, inst.nbr_idx,
        inst.x_star, inst.Sinv, inst.GtG, inst.Pbase, inst.Ksched, inst.Rsched, inst.attacked,
        policy.T, policy.U, policy.M, policy.d, policy.WiGt, float(policy.lam), float(policy.xi),
        float(policy.bound), int(policy.update_T), a_s, c_s, pT, pM, pd, _c(wn), _c(vn), _c(bn),
        state.x, state.xhat, state.xatt, state.ring, state.meta, float(inst.eta),
        dev, It, score_sum, scores, int(bool(moments)), exp_theta, exp_zq,
        int(bool(record)), x_out, xhat_out, z_out, ztil_out, window_out, alarm_out, float(diverge_at))
    n = done if done else steps
    res = BlockResult(n, dev[:n], It[:n].astype(bool), score_sum[:n], scores[:n], exp_theta[:n], exp_zq[:n])
    if record:
        res.x, res.xhat, res.z, res.ztil = x_out[:n], xhat_out[:n], z_out[:n], ztil_out[:n]
        res.window, res.alarms = window_out[:n], alarm_out[:n].astype(bool)
    if done:
        res.diverged = True
        res.diverged_at = t0 + done
    return res
