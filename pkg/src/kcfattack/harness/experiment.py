"""Train-then-evaluate experiment protocol and its report."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import engine as E
from ..detector import calibrate_sigma
from ..errors import InstabilityError
from ..kkt import online_kkt_step
from ..network import NetworkModel, simulate_no_attack
from ..online import OnlineRun, OptimizerState, check_variant
from ..spsa import SpsaIterate, SpsaSchedules, online_spsa_step
from .config import ExperimentConfig
from .instance import generate_instance

log = logging.getLogger(__name__)

TABLE_COLUMNS = (
    "Permissible detection probability (alpha)",
    "Detection probability (no attack)",
    "Detection probability under FDI",
    "Deviation from x* (no attack)",
    "Deviation from x* under FDI",
)


@dataclass
class Prepared:
    net: NetworkModel
    Sigma: list
    inst: E.SimInstance


def calibrate(config: ExperimentConfig, net: NetworkModel):
    traj = simulate_no_attack(net, config.calibration_steps, config.calibration_seed, backend=config.backend)
    return calibrate_sigma(traj, config.calibration_burn_in)


def prepare(config: ExperimentConfig, net=None, Sigma=None) -> Prepared:
    net = generate_instance(config) if net is None else net
    Sigma = calibrate(config, net) if Sigma is None else Sigma
    inst = E.SimInstance.from_network(net, config.x_star, sigma=Sigma, eta=config.eta, J=config.J,
                                      attacked=config.attacked)
    return Prepared(net, Sigma, inst)


def schedules(config: ExperimentConfig) -> SpsaSchedules:
    return SpsaSchedules.from_constants(a0=config.spsa_a0, b0=config.spsa_b0, c0=config.spsa_c0,
                                        a_exp=config.spsa_a_exp, b_exp=config.spsa_b_exp,
                                        c_exp=config.spsa_c_exp, a_offset=config.spsa_a_offset)


def optimizer(config: ExperimentConfig) -> OptimizerState:
    if config.method == "spsa":
        return schedules(config).optimizer(config.lam0, config.A0, config.timescale_ratio, config.hyper_c,
                                           config.adam)
    return OptimizerState(lam=config.lam0, A0=config.A0, b0=config.b0, b_exp=config.b_exp,
                          hyper_c=config.hyper_c, timescale_ratio=config.timescale_ratio, adam=config.adam)


@dataclass
class TrainResult:
    lam_star: float
    converged: bool
    updates: int
    steps: int
    lam_trace: np.ndarray
    stat_trace: np.ndarray
    alarm_trace: np.ndarray
    dev_trace: np.ndarray
    iterate: SpsaIterate = None
    error: str = None

    def to_json(self):
        obj = {
            "lam_star": self.lam_star, "converged": self.converged, "updates": self.updates,
            "steps": self.steps, "error": self.error,
            "lam_trace": self.lam_trace.tolist(), "stat_trace": self.stat_trace.tolist(),
            "alarm_trace": self.alarm_trace.tolist(), "dev_trace": self.dev_trace.tolist(),
        }
        if self.iterate is not None:
            it = self.iterate
            obj["iterate"] = {"T": it.T.tolist(), "M": it.M.tolist(), "d": it.d.tolist(), "lam": it.lam,
                              "bound": it.bound}
        return obj

    @classmethod
    def from_json(cls, obj):
        it = obj.get("iterate")
        iterate = None if it is None else SpsaIterate(np.array(it["T"]), np.array(it["M"]), np.array(it["d"]),
                                                      it["lam"], it["bound"])
        return cls(obj["lam_star"], obj["converged"], obj["updates"], obj["steps"],
                   *(np.asarray(obj[k], dtype=float) for k in ("lam_trace", "stat_trace", "alarm_trace",
                                                               "dev_trace")),
                   iterate, obj.get("error"))

    def summary(self):
        lam = self.lam_trace
        return {
            "lambda_star": self.lam_star,
            "converged": self.converged,
            "updates": self.updates,
            "lambda_initial": float(lam[0]) if lam.size else None,
            "lambda_final": float(lam[-1]) if lam.size else None,
            "lambda_min": float(lam.min()) if lam.size else None,
            "lambda_max": float(lam.max()) if lam.size else None,
            "error": self.error,
        }


def converged(trace, lag, tol, checks):
    """``|lam(n) - lam(n - lag)| < tol`` at the last ``checks`` multiples of ``lag``."""
    n = len(trace)
    if n <= lag * checks:
        return False
    return all(abs(trace[n - 1 - i * lag] - trace[n - 1 - (i + 1) * lag]) < tol for i in range(checks))


def train(config: ExperimentConfig, prep: Prepared) -> TrainResult:
    """Run the online attack until the multiplier settles or the update budget is spent."""
    variant = check_variant(config.variant)
    inst = prep.inst
    run = OnlineRun.start(inst, config.train_seed, config.alpha, variant, config.strict_replay)
    opt = optimizer(config)
    iterate = sched = None
    if config.method == "spsa":
        iterate = SpsaIterate.initial(inst.N, inst.p, inst.q, config.lam0, config.param_bound)
        sched = schedules(config)
    error = None
    done = False
    try:
        for n in range(config.max_updates):
            if config.method == "kkt":
                online_kkt_step(run, opt, variant)
            else:
                online_spsa_step(run, iterate, sched, opt, variant, config.xi, config.update_T)
            if n + 1 >= config.min_updates and (n + 1) % config.convergence_lag == 0:
                done = converged(run.lam_trace + [opt.lam], config.convergence_lag, config.convergence_tol,
                                 config.convergence_checks)
                if done:
                    break
    except InstabilityError as exc:
        error = str(exc)
        log.warning("training aborted: %s", exc)
    lam = np.asarray(run.lam_trace + [opt.lam])
    window = lam[-config.lambda_avg_window:]
    return TrainResult(float(window.mean()), bool(done), opt.n, run.main.t, lam, np.asarray(run.stat_trace),
                       np.asarray(run.alarm_trace), np.asarray(run.dev_trace), iterate, error)


@dataclass
class PathMetrics:
    detection: float
    deviation: float
    markov_bound: float
    diverged: bool = False


def _path_metrics(inst, res, burn_in):
    det = float(res.It[burn_in:].mean())
    dev = float(res.dev[burn_in:].mean())
    bound = inst.J / inst.eta * float(res.exp_zq[burn_in:].mean())
    return PathMetrics(det, dev, bound, res.diverged)


def eval_policy(config: ExperimentConfig, prep: Prepared, trained: TrainResult):
    """Factory of fresh frozen-multiplier policies for the evaluation paths."""
    if config.method == "kkt":
        return lambda: E.kkt_policy(prep.inst, trained.lam_star)
    sched = schedules(config)
    t0 = trained.steps
    it = trained.iterate

    def make():
        i2 = it.copy()
        # the parameter iterate keeps adapting online with the schedules continuing from training
        return E.spsa_policy(i2.T, i2.M, i2.d, trained.lam_star, config.xi, lambda t: sched.a(t + t0),
                             lambda t: sched.c(t + t0), bound=config.param_bound, update_T=config.update_T)
    return make


def step_trace(config: ExperimentConfig, prep: Prepared, make_policy, path=0):
    """Per-step record of evaluation path ``path``, advanced one step at a time.

    Noise is drawn in a block-size independent order, so the record describes
    exactly the path that :func:`evaluate` simulates with the same index.
    """
    inst = prep.inst
    state = E.PathState.start(inst, config.eval_seed + path)
    policy = make_policy()
    rows = {"t": [], "lambda": [], "score_sum": [], "expected_score_sum": [], "alarm": []}
    dev_nodes, m_norm, d_norm = [], [], []
    for _ in range(config.steps):
        res = E.run_block(inst, state, policy, 1, record=True, moments=True, backend=config.backend)
        if res.steps == 0:
            break
        rows["t"].append(state.t)
        rows["lambda"].append(policy.lam)
        rows["score_sum"].append(res.score_sum[0])
        rows["expected_score_sum"].append(res.exp_zq[0])
        rows["alarm"].append(int(res.It[0]))
        dev_nodes.append(((res.xhat[0] - inst.x_star) ** 2).sum(axis=1))
        if policy.mode == E.MODE_SPSA:
            m_norm.append(np.linalg.norm(policy.M, axis=(1, 2)))
            d_norm.append(np.linalg.norm(policy.d, axis=1))
        if res.diverged:
            break
    out = {k: np.asarray(v) for k, v in rows.items()}
    out["deviation"] = np.asarray(dev_nodes)
    if m_norm:
        out["M_norm"] = np.asarray(m_norm)
        out["d_norm"] = np.asarray(d_norm)
    return out


def evaluate(config: ExperimentConfig, prep: Prepared, make_policy):
    """Simulate ``eval_paths`` independent paths; metrics are taken after ``burn_in``."""
    out = []
    for i in range(config.eval_paths):
        state = E.PathState.start(prep.inst, config.eval_seed + i)
        res = E.run_block(prep.inst, state, make_policy(), config.steps, moments=True, backend=config.backend)
        out.append(_path_metrics(prep.inst, res, config.burn_in))
    return out


@dataclass
class ReportRow:
    variant: str
    alpha: float
    det_noattack: tuple
    det_fdi: tuple
    dev_noattack: tuple
    dev_fdi: tuple
    markov_bound: tuple
    lambda_star: float
    converged: bool
    paths: int
    bound_dominates: bool

    def table_cells(self):
        return [repr(self.alpha)] + [f"{m!r} +/- {s!r}" for m, s in
                                     (self.det_noattack, self.det_fdi, self.dev_noattack, self.dev_fdi)]


@dataclass
class RunReport:
    config: dict
    variant: str = ""
    rows: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def paths(self):
        return min((r.paths for r in self.rows), default=0)


def _ms(values):
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std())


def evaluate_trained(config: ExperimentConfig, prep: Prepared, trained: dict, traces=True) -> RunReport:
    """Evaluation phase for already trained multipliers ``{alpha: TrainResult}``."""
    label = f"{config.method.upper()}-{config.variant}"
    report = RunReport(config.to_json(), label)
    base = evaluate(config, prep, E.no_attack_policy)
    nan = (float("nan"), float("nan"))
    for alpha, result in trained.items():
        cfg = config.replace(alpha=alpha)
        if result.error:
            report.flags.append(f"alpha={alpha}: {result.error}")
        elif not result.converged:
            report.flags.append(f"alpha={alpha}: multiplier did not converge within {cfg.max_updates} updates")
        fdi = [] if result.error else evaluate(cfg, prep, eval_policy(cfg, prep, result))
        if any(m.diverged for m in fdi):
            report.flags.append(f"alpha={alpha}: an evaluation path diverged")
        dominates = all(m.markov_bound >= m.detection for m in fdi)
        if fdi and not dominates:
            report.flags.append(f"alpha={alpha}: Markov bound below empirical detection probability")

        def ms(attr, paths):
            return _ms([getattr(m, attr) for m in paths]) if paths else nan

        report.rows.append(ReportRow(
            label, float(alpha), ms("detection", base), ms("detection", fdi), ms("deviation", base),
            ms("deviation", fdi), ms("markov_bound", fdi), result.lam_star, result.converged, len(fdi),
            dominates))
        report.traces[float(alpha)] = {
            "summary": result.summary(),
            "train": {
                "lambda": result.lam_trace[:-1],
                "statistic": result.stat_trace,
                "alarm_rate": result.alarm_trace,
                "deviation": result.dev_trace,
            },
        }
        if traces and fdi:
            report.traces[float(alpha)]["steps"] = step_trace(cfg, prep, eval_policy(cfg, prep, result))
    return report


def train_all(config: ExperimentConfig, prep: Prepared, alphas=None) -> dict:
    alphas = (config.alpha,) if alphas is None else tuple(alphas)
    return {float(a): train(config.replace(alpha=a), prep) for a in alphas}


def run_experiment(config: ExperimentConfig, prep: Prepared = None, alphas=None, traces=True) -> RunReport:
    """Train and evaluate the configured attack for every ``alpha`` in ``alphas`` (default: ``config.alpha``).

    With ``traces`` set, a per-step record of the first attacked evaluation
    path is kept alongside the per-update training traces.
    """
    prep = prepare(config) if prep is None else prep
    return evaluate_trained(config, prep, train_all(config, prep, alphas), traces)
