"""Wall-clock comparison of the compiled and pure-Python simulation kernels.

Usage: python benchmarks/bench_kernels.py [--steps 2000] [--repeat 3]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from kcfattack import engine as E
from kcfattack.harness.config import ExperimentConfig
from kcfattack.harness.experiment import prepare
from kcfattack.kernels import available_backends
from kcfattack.spsa import SpsaSchedules


def policies(inst):
    sched = SpsaSchedules.from_constants(a0=0.3, b0=1.0, a_offset=1e4)
    N, p, q = inst.N, inst.p, inst.q
    return {
        "no attack": E.no_attack_policy,
        "static": lambda: E.static_policy(d=np.ones((N, p))),
        "kkt": lambda: E.kkt_policy(inst, 0.05),
        "spsa": lambda: E.spsa_policy(np.tile(np.eye(p), (N, 1, 1)), np.zeros((N, p, q)), np.zeros((N, p)),
                                      0.05, 0.5, sched.a, sched.c),
    }


def time_block(inst, make_policy, backend, steps, repeat, moments):
    best = np.inf
    for r in range(repeat):
        state = E.PathState.start(inst, 100 + r)
        t0 = time.perf_counter()
        E.run_block(inst, state, make_policy(), steps, moments=moments, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    prep = prepare(ExperimentConfig(calibration_steps=5000))
    backends = available_backends()
    print(f"backends: {', '.join(backends)}; N={prep.inst.N} q={prep.inst.q} p={prep.inst.p} "
          f"steps={args.steps}")
    print(f"{'policy':<10} {'moments':<8} " + " ".join(f"{b + ' [us/step]':>20}" for b in backends)
          + (f" {'speedup':>8}" if len(backends) == 2 else ""))
    for name, make in policies(prep.inst).items():
        for moments in (False, True):
            secs = [time_block(prep.inst, make, b, args.steps, args.repeat, moments) for b in backends]
            line = f"{name:<10} {str(moments):<8} " + " ".join(f"{1e6 * s / args.steps:>20.2f}" for s in secs)
            if len(secs) == 2:
                line += f" {secs[1] / secs[0]:>7.1f}x"
            print(line)


if __name__ == "__main__":
    main()
