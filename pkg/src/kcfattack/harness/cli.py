"""Command line entry point.

Every subcommand reads one JSON config (``--config``), applies ``--set key=value``
overrides and works inside an output directory (``--out``, defaulting to
``$KCFATTACK_OUTPUT_DIR`` or ``./runs``).  Later stages reuse the files written
by earlier ones when present::

    kcfattack generate            -> instance.json
    kcfattack calibrate           -> sigma.json
    kcfattack train               -> trained.json
    kcfattack evaluate            -> report.csv, metadata.json, trace CSVs
    kcfattack report              prints report.csv
    kcfattack sweep [--hyper-c]   one report per alpha grid (and hyper_c) point
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import KcfAttackError
from ..lgcore import matrix_from_json, matrix_to_json
from ..network import load_network, save_network
from . import experiment as X
from .config import ExperimentConfig, output_dir
from .instance import generate_instance
from .report import METADATA_JSON, REPORT_CSV, emit_report, read_report_csv

log = logging.getLogger("kcfattack")

INSTANCE_JSON = "instance.json"
SIGMA_JSON = "sigma.json"
TRAINED_JSON = "trained.json"
CONFIG_JSON = "config.json"


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(args.set or [])


def _out(args) -> Path:
    out = Path(args.out) if args.out else output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _network(cfg, out):
    path = out / INSTANCE_JSON
    if path.exists():
        return load_network(path)
    net = generate_instance(cfg)
    save_network(net, path)
    return net


def _sigma(cfg, out, net):
    path = out / SIGMA_JSON
    if path.exists():
        return [matrix_from_json(m) for m in json.loads(path.read_text())]
    Sigma = X.calibrate(cfg, net)
    path.write_text(json.dumps([matrix_to_json(S) for S in Sigma], indent=2))
    return Sigma


def _prepare(cfg, out):
    net = _network(cfg, out)
    return X.prepare(cfg, net, _sigma(cfg, out, net))


def _alphas(cfg, args):
    return tuple(args.alpha) if args.alpha else (cfg.alpha,)


def cmd_generate(cfg, args):
    out = _out(args)
    net = generate_instance(cfg)
    save_network(net, out / INSTANCE_JSON)
    print(out / INSTANCE_JSON)


def cmd_calibrate(cfg, args):
    out = _out(args)
    (out / SIGMA_JSON).unlink(missing_ok=True)
    _sigma(cfg, out, _network(cfg, out))
    print(out / SIGMA_JSON)


def cmd_train(cfg, args):
    out = _out(args)
    prep = _prepare(cfg, out)
    trained = X.train_all(cfg, prep, _alphas(cfg, args))
    cfg.save(out / CONFIG_JSON)
    (out / TRAINED_JSON).write_text(json.dumps({repr(a): r.to_json() for a, r in trained.items()}))
    for a, r in trained.items():
        print(f"alpha={a}: lambda*={r.lam_star:.6g} converged={r.converged} updates={r.updates}")


def cmd_evaluate(cfg, args):
    out = _out(args)
    path = out / TRAINED_JSON
    if not path.exists():
        raise KcfAttackError(f"{path} not found; run 'kcfattack train' first")
    trained = {float(a): X.TrainResult.from_json(r) for a, r in json.loads(path.read_text()).items()}
    report = X.evaluate_trained(cfg, _prepare(cfg, out), trained, traces=not args.no_traces)
    emit_report(report, out)
    _print_report(out)


def _print_report(out):
    rows = read_report_csv(out / REPORT_CSV)
    meta = json.loads((out / METADATA_JSON).read_text())
    print(meta["variant"])
    print(f"{'alpha':>6} {'det (none)':>18} {'det (FDI)':>18} {'dev (none)':>18} {'dev (FDI)':>18}")
    for alpha, *cells in rows:
        print(f"{alpha:>6.3g} " + " ".join(f"{m:>9.4f} +/- {s:<6.4f}" for m, s in cells))
    for flag in meta["flags"]:
        print("flag:", flag)


def cmd_report(cfg, args):
    _print_report(_out(args))


def cmd_sweep(cfg, args):
    out = _out(args)
    prep = _prepare(cfg, out)
    alphas = tuple(args.alpha) if args.alpha else cfg.alpha_grid
    grid = cfg.hyper_c_grid if args.hyper_c else (cfg.hyper_c,)
    for c in grid:
        run_cfg = cfg.replace(hyper_c=c)
        report = X.run_experiment(run_cfg, prep, alphas, traces=not args.no_traces)
        target = out / f"hyper_c_{c!r}" if args.hyper_c else out
        emit_report(report, target)
        _print_report(target)


COMMANDS = {
    "generate": cmd_generate,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="kcfattack", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        p.add_argument("--out", help="output directory")
        if name in ("train", "sweep"):
            p.add_argument("--alpha", type=float, action="append", help="permissible detection probability")
        if name in ("evaluate", "sweep"):
            p.add_argument("--no-traces", action="store_true", help="skip the per-step evaluation trace")
        if name == "sweep":
            p.add_argument("--hyper-c", action="store_true", help="also sweep the hyper_c grid")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg, args)
    except KcfAttackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
