"""Two-timescale simultaneous-perturbation attack with an online multiplier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import AttackParams, StepContext
from .engine import run_block, spsa_policy
from .errors import ConfigurationError
from .online import OnlineRun, OptimizerState, check_finite, check_variant


@dataclass(frozen=True)
class PowerLaw:
    """``scale / (1 + offset + t)^exponent``; the offset only delays the decay."""

    scale: float
    exponent: float
    offset: float = 0.0

    def __call__(self, t):
        return self.scale / (1.0 + self.offset + t) ** self.exponent

    @property
    def diverges(self):
        return self.exponent <= 1.0

    @property
    def square_summable(self):
        return 2.0 * self.exponent > 1.0


@dataclass(frozen=True)
class SpsaSchedules:
    """Step ``a(t)``, multiplier step ``b(t)`` and perturbation size ``c(t)``.

    Construction checks, through the summability rules of power-law series,
    that ``sum a = sum b = inf``, ``sum a^2, sum b^2 < inf``, ``b/a -> 0``,
    ``c -> 0`` and ``sum a^2/c^2 < inf``.
    """

    a: PowerLaw = PowerLaw(0.01, 0.602)
    b: PowerLaw = PowerLaw(0.5, 0.9)
    c: PowerLaw = PowerLaw(0.1, 0.101)

    def __post_init__(self):
        for name in ("a", "b", "c"):
            if getattr(self, name).scale <= 0 or getattr(self, name).offset < 0:
                raise ConfigurationError(f"{name}(t) needs a positive scale and a non-negative offset")
        failed = [msg for ok, msg in self.conditions() if not ok]
        if failed:
            raise ConfigurationError("invalid SPSA schedules: " + "; ".join(failed))

    def conditions(self):
        a, b, c = self.a, self.b, self.c
        return [
            (a.diverges and b.diverges, "sum a(t) and sum b(t) must diverge"),
            (a.square_summable and b.square_summable, "sum a(t)^2 and sum b(t)^2 must converge"),
            (b.exponent > a.exponent, "b(t)/a(t) must tend to 0"),
            (c.exponent > 0, "c(t) must tend to 0"),
            (2.0 * (a.exponent - c.exponent) > 1.0, "sum a(t)^2/c(t)^2 must converge"),
        ]

    @classmethod
    def from_constants(cls, a0=0.01, b0=0.5, c0=0.1, a_exp=0.602, b_exp=0.9, c_exp=0.101, a_offset=0.0):
        return cls(PowerLaw(a0, a_exp, a_offset), PowerLaw(b0, b_exp), PowerLaw(c0, c_exp))

    def optimizer(self, lam0=4.0, A0=1e3, timescale_ratio=10, hyper_c=1.0, adam=True):
        """Multiplier optimizer driven by ``b(n)`` for the ``n``-th slow update."""
        return OptimizerState(lam=lam0, A0=A0, b0=self.b.scale, b_exp=self.b.exponent, hyper_c=hyper_c,
                              timescale_ratio=timescale_ratio, adam=adam)


@dataclass
class SpsaIterate:
    """Stacked ``T (N,p,p)``, ``M (N,p,q)``, ``d (N,p)`` and the multiplier."""

    T: np.ndarray
    M: np.ndarray
    d: np.ndarray
    lam: float = 4.0
    bound: float = 1e3

    def __post_init__(self):
        self.T = np.ascontiguousarray(self.T, dtype=float)
        self.M = np.ascontiguousarray(self.M, dtype=float)
        self.d = np.ascontiguousarray(self.d, dtype=float)
        self.clamp()

    @classmethod
    def initial(cls, N, p, q, lam=4.0, bound=1e3):
        return cls(np.tile(np.eye(p), (N, 1, 1)), np.zeros((N, p, q)), np.zeros((N, p)), lam, bound)

    def clamp(self):
        for arr in (self.T, self.M, self.d):
            np.clip(arr, -self.bound, self.bound, out=arr)
        return self

    def params(self, x_star, attacked=None) -> AttackParams:
        N, p = self.d.shape
        return AttackParams(list(self.T), [np.zeros((p, p))] * N, list(self.M), list(self.d), x_star, attacked)

    def copy(self):
        return SpsaIterate(self.T.copy(), self.M.copy(), self.d.copy(), self.lam, self.bound)


def rademacher_perturbations(N, p, q, rng, include_T=True):
    """Independent +-1 entries shaped like ``(T, M, d)``; ``T`` part is ``None`` when excluded.

    Entries are drawn as one flat vector in the order ``T, M, d`` (the order
    the fused simulator uses).
    """
    nT = N * p * p if include_T else 0
    raw = rng.rademacher(nT + N * p * q + N * p)
    Delta = raw[:nT].reshape(N, p, p) if include_T else None
    Pi = raw[nT:nT + N * p * q].reshape(N, p, q)
    beta = raw[nT + N * p * q:].reshape(N, p)
    return Delta, Pi, beta


def _objective(ctx, it: SpsaIterate, x_star, lam, xi, attacked):
    return ctx.report(it.params(x_star, attacked), lam, xi).f_reg


def spsa_gradient_estimate(iterate: SpsaIterate, ctx: StepContext, c, perturbation, lam, xi, x_star,
                           attacked=None):
    """Two-evaluation estimate ``(kappa+ - kappa-) / (2 c pert)`` for every entry."""
    Delta, Pi, beta = perturbation
    plus, minus = iterate.copy(), iterate.copy()
    plus.bound = minus.bound = np.inf
    if Delta is not None:
        plus.T += c * Delta
        minus.T -= c * Delta
    plus.M += c * Pi
    minus.M -= c * Pi
    plus.d += c * beta
    minus.d -= c * beta
    diff = (_objective(ctx, plus, x_star, lam, xi, attacked)
            - _objective(ctx, minus, x_star, lam, xi, attacked)) / (2.0 * c)
    gT = None if Delta is None else diff / Delta
    return gT, diff / Pi, diff / beta


def spsa_gradient_step(iterate: SpsaIterate, schedules: SpsaSchedules, ctx: StepContext, t, perturbation,
                       xi, x_star, attacked=None) -> SpsaIterate:
    """Projected update of ``(T, M, d)`` at time ``t``; ``T`` is left alone when its perturbation is ``None``."""
    a, c = schedules.a(t), schedules.c(t)
    if c <= 0:
        raise ConfigurationError("c(t) must be positive")
    gT, gM, gd = spsa_gradient_estimate(iterate, ctx, c, perturbation, iterate.lam, xi, x_star, attacked)
    out = iterate.copy()
    nodes = list(range(out.d.shape[0]) if attacked is None else attacked)
    if gT is not None:
        out.T[nodes] -= a * gT[nodes]
    out.M[nodes] -= a * gM[nodes]
    out.d[nodes] -= a * gd[nodes]
    return out.clamp()


def online_spsa_step(run: OnlineRun, iterate: SpsaIterate, schedules: SpsaSchedules, opt: OptimizerState,
                     variant="2", xi=0.5, update_T=False, moments=False):
    """``timescale_ratio`` fast steps (perturb, estimate, update, attack with
    ``b = M theta + d``) followed by one multiplier update from the main path."""
    variant = check_variant(variant)
    if variant not in ("1", "2"):
        raise ConfigurationError("the SPSA attack has variants 1 and 2 only")
    iterate.lam = opt.lam
    policy = spsa_policy(iterate.T, iterate.M, iterate.d, opt.lam, xi, schedules.a, schedules.c,
                         bound=iterate.bound, update_T=update_T)
    res = run_block(run.inst, run.main, policy, opt.timescale_ratio, moments=moments)
    check_finite(res)
    stat = run.statistic(variant, res)
    run.record(opt.lam, stat, res)
    iterate.lam = opt.update(stat - run.target(variant, opt))
    return res
