"""Slow-timescale Lagrange multiplier updates and per-path bookkeeping for the online attacks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import PathState, SimInstance
from .errors import ConfigurationError, InstabilityError
from .rng import SHADOW_OFFSET

VARIANTS = ("1", "2", "1-LC", "2-LC")


def check_variant(variant):
    variant = str(variant).upper()
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    return variant


@dataclass
class OptimizerState:
    """Projected, ADAM-scaled ascent on the multiplier ``lam``.

    The raw step is ``b(n) = b0 / (1 + n)^b_exp`` for the ``n``-th update;
    with ``adam`` set the constraint violation is replaced by its bias-corrected
    first moment divided by the root of its second moment.
    """

    lam: float = 4.0
    A0: float = 1e3
    b0: float = 0.5
    b_exp: float = 0.7
    hyper_c: float = 1.0
    timescale_ratio: int = 10
    adam: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: float = 0.0
    v: float = 0.0
    n: int = 0

    def __post_init__(self):
        if self.A0 <= 0:
            raise ConfigurationError("A0 must be positive")
        if not 0.0 <= self.lam <= self.A0:
            raise ConfigurationError("initial lambda must lie in [0, A0]")
        if self.b0 < 0 or not 0.5 < self.b_exp <= 1.0:
            raise ConfigurationError("b(t) must be non-negative with exponent in (0.5, 1] so that "
                                     "sum b = inf and sum b^2 < inf")
        if int(self.timescale_ratio) != self.timescale_ratio or self.timescale_ratio < 1:
            raise ConfigurationError("timescale_ratio must be a positive integer")
        if self.hyper_c <= 0:
            raise ConfigurationError("hyper_c must be positive")

    def step_size(self, n=None):
        n = self.n if n is None else n
        return self.b0 / (1.0 + n) ** self.b_exp

    def update(self, violation):
        """One projected step driven by ``violation`` (statistic minus its target)."""
        g = float(violation)
        b = self.step_size()
        self.n += 1
        if self.adam:
            self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
            self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
            mh = self.m / (1.0 - self.beta1 ** self.n)
            vh = self.v / (1.0 - self.beta2 ** self.n)
            g = mh / (np.sqrt(vh) + self.eps)
        self.lam = float(min(max(self.lam + b * g, 0.0), self.A0))
        return self.lam


@dataclass
class OnlineRun:
    """One attacked sample path, plus an optional independent shadow path."""

    inst: SimInstance
    main: PathState
    alpha: float
    shadow: PathState = None
    strict_replay: bool = False
    lam_trace: list = field(default_factory=list)
    stat_trace: list = field(default_factory=list)
    alarm_trace: list = field(default_factory=list)
    dev_trace: list = field(default_factory=list)
    zq_trace: list = field(default_factory=list)

    @classmethod
    def start(cls, inst, seed, alpha, variant="2-LC", strict_replay=False, xhat0=None):
        variant = check_variant(variant)
        main = PathState.start(inst, seed, xhat0=xhat0)
        shadow = None
        if variant in ("1", "2") and not strict_replay:
            shadow = PathState.start(inst, seed, stream_base=SHADOW_OFFSET, xhat0=xhat0)
        return cls(inst, main, float(alpha), shadow, strict_replay)

    def target(self, variant, opt: OptimizerState):
        if variant in ("1", "1-LC"):
            return opt.hyper_c * self.alpha * self.inst.eta / self.inst.J
        return self.alpha

    @staticmethod
    def statistic(variant, res):
        """Block mean of the summed score (variant 1) or of the global alarm (variant 2)."""
        if variant in ("1", "1-LC"):
            return float(res.score_sum.mean())
        return float(res.It.mean())

    def record(self, lam, stat, res):
        self.lam_trace.append(lam)
        self.stat_trace.append(stat)
        self.alarm_trace.append(float(res.It.mean()))
        self.dev_trace.append(float(res.dev.mean()))
        self.zq_trace.append(float(res.score_sum.mean()))


def check_finite(res, what="main path"):
    if res.diverged:
        raise InstabilityError(f"{what}: estimates diverged at t={res.diverged_at}")


def replay_statistic(run: OnlineRun, variant, policy_factory, steps_done, block):
    """Statistic for the non-LC variants from an independently simulated sequence.

    By default the persistent shadow path is advanced by one block; with
    ``strict_replay`` a fresh path is simulated from ``t = 0`` every time,
    which costs ``O(t)`` per update.
    """
    from .engine import run_block

    if run.strict_replay:
        seq = len(run.lam_trace)
        path = PathState.start(run.inst, run.main.seed, stream_base=2 * SHADOW_OFFSET + 10 * seq)
        res = run_block(run.inst, path, policy_factory(), steps_done + block)
        check_finite(res, "replay path")
        tail = res.score_sum[-block:] if variant == "1" else res.It[-block:]
        return float(np.mean(tail))
    res = run_block(run.inst, run.shadow, policy_factory(), block)
    check_finite(res, "shadow path")
    return OnlineRun.statistic(variant, res)
