"""Per-step attack synthesis from the stationarity conditions, and the online multiplier variants.

For node ``k`` with ``U = 0`` the regularized objective is

    ||r0 + G mu||^2 + lam mu' Sinv mu + tr(W T P T') + xi ||M||_F^2,
    mu = T h + M theta + d,   W = G'G + lam Sinv,

which is quadratic in ``v = (vec T, vec M, d)`` (column-major ``vec``, so
``M theta = (theta' kron I) vec M``).  Setting its gradient to zero gives one
linear system per node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import AttackParams, StepContext
from .engine import kkt_policy, run_block
from .errors import ConfigurationError, SolverError
from .online import OnlineRun, OptimizerState, check_finite, check_variant, replay_statistic

COND_LIMIT = 1e12


@dataclass
class KktSolution:
    """Stationary attack parameters; ``U`` is identically zero."""

    T: list
    U: list
    M: list
    d: list
    lambda_used: float
    residual_norm: float
    stationary_only: bool = False
    least_squares: bool = False

    def params(self, x_star, attacked=None) -> AttackParams:
        return AttackParams(self.T, self.U, self.M, self.d, x_star, attacked)


def _solve(Hh, rhs, node):
    if not np.all(np.isfinite(Hh)) or not np.all(np.isfinite(rhs)):
        raise SolverError("stationarity system has non-finite entries", node)
    cond = np.linalg.cond(Hh)
    if np.isfinite(cond) and cond < COND_LIMIT:
        return np.linalg.solve(Hh, rhs), False
    return np.linalg.lstsq(Hh, rhs, rcond=None)[0], True


def _design(ctx: StepContext, k, lam):
    G = ctx.G[k]
    W = G.T @ G + lam * ctx.Sinv[k]
    p, q = G.shape[1], ctx.theta.shape[1]
    Bm = np.kron(ctx.theta[k][None, :], np.eye(p))     # M theta = Bm vec M
    return G, W, p, q, Bm


def _unpack(v, p, q, with_T):
    off = 0
    T = None
    if with_T:
        T = v[:p * p].reshape(p, p, order="F")
        off = p * p
    M = v[off:off + p * q].reshape(p, q, order="F")
    d = v[off + p * q:].copy()
    return T, M, d


def _check(lam, xi):
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    if xi <= 0:
        raise ConfigurationError("xi must be positive")


def solve_fixed_T_context(ctx: StepContext, lam, xi, T=None, attacked=None) -> KktSolution:
    _check(lam, xi)
    N = len(ctx.G)
    attacked = set(range(N) if attacked is None else attacked)
    Ts, Us, Ms, ds = [], [], [], []
    worst, lsq = 0.0, False
    for k in range(N):
        G, W, p, q, Bm = _design(ctx, k, lam)
        Tk = np.eye(p) if T is None else np.asarray(T[k], dtype=float)
        Ts.append(Tk)
        Us.append(np.zeros((p, p)))
        if k not in attacked:
            Ms.append(np.zeros((p, q)))
            ds.append(np.zeros(p))
            continue
        B = np.hstack([Bm, np.eye(p)])
        D = np.zeros(p * q + p)
        D[:p * q] = xi
        c = Tk @ ctx.h[k]
        Hh = B.T @ W @ B + np.diag(D)
        rhs = -B.T @ (G.T @ ctx.r0[k] + W @ c)
        v, used_lsq = _solve(Hh, rhs, k)
        lsq |= used_lsq
        worst = max(worst, 2.0 * np.linalg.norm(Hh @ v - rhs))
        _, M, d = _unpack(v, p, q, False)
        Ms.append(M)
        ds.append(d)
    return KktSolution(Ts, Us, Ms, ds, float(lam), float(worst), False, lsq)


def solve_kkt_fixed_T(lam, theta_prev, filt, net, xi, Sigma=None, T=None, attacked=None) -> KktSolution:
    """Global minimizer over ``(M, d)`` with ``T`` fixed (identity by default)."""
    return solve_fixed_T_context(StepContext.build(theta_prev, filt, net, Sigma), lam, xi, T, attacked)


def solve_general_T_context(ctx: StepContext, lam, xi, attacked=None) -> KktSolution:
    _check(lam, xi)
    N = len(ctx.G)
    attacked = set(range(N) if attacked is None else attacked)
    Ts, Us, Ms, ds = [], [], [], []
    worst, lsq = 0.0, False
    for k in range(N):
        G, W, p, q, Bm = _design(ctx, k, lam)
        Us.append(np.zeros((p, p)))
        if k not in attacked:
            Ts.append(np.eye(p))
            Ms.append(np.zeros((p, q)))
            ds.append(np.zeros(p))
            continue
        Bt = np.kron(ctx.h[k][None, :], np.eye(p))      # T h = Bt vec T
        B = np.hstack([Bt, Bm, np.eye(p)])
        Hh = B.T @ W @ B
        Hh[:p * p, :p * p] += np.kron(ctx.P[k], W)       # tr(W T P T') = vecT' (P kron W) vecT
        Hh[p * p:p * p + p * q, p * p:p * p + p * q] += xi * np.eye(p * q)
        rhs = -B.T @ (G.T @ ctx.r0[k])
        v, used_lsq = _solve(Hh, rhs, k)
        lsq |= used_lsq
        worst = max(worst, 2.0 * np.linalg.norm(Hh @ v - rhs))
        T, M, d = _unpack(v, p, q, True)
        Ts.append(T)
        Ms.append(M)
        ds.append(d)
    return KktSolution(Ts, Us, Ms, ds, float(lam), float(worst), True, lsq)


def solve_kkt_general_T(lam, theta_prev, filt, net, xi, Sigma=None, attacked=None) -> KktSolution:
    """Stationary point over ``(T, M, d)``; not guaranteed to be a global minimizer."""
    return solve_general_T_context(StepContext.build(theta_prev, filt, net, Sigma), lam, xi, attacked)


def constraint_value(ctx: StepContext, sol: KktSolution, x_star, attacked=None):
    """Summed expected score ``sum_k E z~' Sigma^-1 z~`` under a solution."""
    return float(ctx.report(sol.params(x_star, attacked)).z_quad.sum())


def find_lambda_star(rhs, ctx: StepContext, xi, x_star, A0=1e3, T=None, attacked=None, rtol=1e-6,
                     max_iter=200):
    """Bisection for the multiplier at which the expected score meets ``rhs``.

    Returns ``(0, solution)`` when the constraint is already slack at ``lam = 0``.
    """
    if rhs <= 0:
        raise ConfigurationError("constraint right-hand side must be positive")

    def g(lam):
        sol = solve_fixed_T_context(ctx, lam, xi, T, attacked)
        return constraint_value(ctx, sol, x_star, attacked) - rhs, sol

    g0, sol0 = g(0.0)
    if g0 <= 0:
        return 0.0, sol0
    gA, solA = g(A0)
    if gA > 0:
        raise ConfigurationError(f"constraint is not met even at lambda={A0:g}; increase A0 "
                                 f"(or the constraint is below its noise floor)")
    lo, hi, sol = 0.0, A0, solA
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        gm, sol = g(mid)
        if abs(gm) < rtol * rhs:
            return mid, sol
        if gm > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return 0.5 * (lo + hi), sol


def online_kkt_step(run: OnlineRun, opt: OptimizerState, variant="2-LC", T=None, moments=False):
    """One slow-timescale iteration: ``timescale_ratio`` attacked steps at the current
    multiplier, then one projected multiplier update."""
    variant = check_variant(variant)
    lam = opt.lam
    block = opt.timescale_ratio
    t_before = run.main.t

    def policy():
        return kkt_policy(run.inst, lam, T)

    res = run_block(run.inst, run.main, policy(), block, moments=moments)
    check_finite(res)
    if variant.endswith("LC"):
        stat = run.statistic(variant, res)
    else:
        stat = replay_statistic(run, variant, policy, t_before, block)
    run.record(lam, stat, res)
    opt.update(stat - run.target(variant, opt))
    return res
