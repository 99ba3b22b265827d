import csv
import json

import numpy as np
import pytest

from kcfattack.errors import ConfigurationError, KcfAttackError
from kcfattack.harness import experiment as X
from kcfattack.harness.cli import main
from kcfattack.harness.config import OUTPUT_ENV, ExperimentConfig, default_alpha_grid, output_dir
from kcfattack.harness.instance import generate_instance, observable
from kcfattack.harness.report import emit_report, read_report_csv, report_rows

SMALL = dict(min_updates=200, max_updates=200, steps=300, burn_in=100, eval_paths=2, calibration_steps=3000)


def test_config_defaults():
    cfg = ExperimentConfig()
    assert cfg.eval_paths == 10
    assert cfg.eta == 300.0 and cfg.J == 10
    assert default_alpha_grid("line") == (0.25, 0.4)
    assert default_alpha_grid("regular3-hexagon") == (0.2, 0.3)


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(alpha=1.5), dict(method="pso"), dict(steps=100, burn_in=100),
                                dict(eval_paths=0), dict(x_star=(1.0,)), dict(plant_radius=(0.5, 1.2)),
                                dict(method="spsa", variant="2-LC"), dict(min_updates=10, max_updates=5)])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        ExperimentConfig(**kw)


def test_full_detection_budget_is_allowed():
    assert ExperimentConfig(alpha=1.0).alpha == 1.0


def test_config_json_round_trip(tmp_path):
    cfg = ExperimentConfig(alpha=0.25, topology="line", attacked=(0, 2))
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_config_overrides_and_unknown_fields():
    cfg = ExperimentConfig().with_overrides(["alpha=0.2", "topology=line", "x_star=[1, 3]", "eval-paths=3"])
    assert cfg.alpha == 0.2 and cfg.topology == "line" and cfg.x_star == (1.0, 3.0) and cfg.eval_paths == 3
    with pytest.raises(ConfigurationError):
        ExperimentConfig().with_overrides(["bogus=1"])
    with pytest.raises(ConfigurationError):
        ExperimentConfig().with_overrides(["alpha"])
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_json({"alpha": 0.3, "colour": "red"})
    with pytest.raises(ConfigurationError):
        ExperimentConfig(schema_version=99)


def test_output_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "x"))
    assert output_dir() == tmp_path / "x"
    monkeypatch.delenv(OUTPUT_ENV)
    assert str(output_dir()) == "runs"


@pytest.mark.parametrize("topology", ["regular3-hexagon", "line"])
def test_generated_instance_is_deterministic_and_observable(topology):
    cfg = ExperimentConfig(topology=topology, instance_seed=4)
    a, b = generate_instance(cfg), generate_instance(cfg)
    assert np.array_equal(a.process.A, b.process.A)
    assert all(np.array_equal(s.R, t.R) for s, t in zip(a.sensors, b.sensors))
    assert all(observable(a.process.A, s.H) for s in a.sensors)
    assert np.abs(np.linalg.eigvals(a.process.A)).max() < 1.0
    c = generate_instance(cfg.replace(instance_seed=5))
    assert not np.array_equal(a.process.A, c.process.A)


def test_observability_rank_test():
    A = np.diag([0.5, 0.7])
    assert observable(A, np.array([[1.0, 1.0]]))
    assert not observable(A, np.array([[1.0, 0.0]]))


def test_no_attack_detection_is_small(hexagon):
    cfg = ExperimentConfig()
    det = [m.detection for m in X.evaluate(cfg, hexagon, lambda: X.E.no_attack_policy())]
    assert len(det) == 10
    assert 0.0 <= np.mean(det) <= 0.15


@pytest.fixture(scope="module")
def small_report(hexagon):
    cfg = ExperimentConfig(**SMALL)
    return cfg, X.run_experiment(cfg, hexagon, alphas=(0.2, 0.3))


def test_report_csv_round_trip(tmp_path, small_report):
    cfg, report = small_report
    files = emit_report(report, tmp_path)
    with open(files["report"], newline="") as fh:
        assert tuple(next(csv.reader(fh))) == X.TABLE_COLUMNS
    rows = read_report_csv(files["report"])
    assert rows == report_rows(report)
    assert [r[0] for r in rows] == [0.2, 0.3]
    meta = json.loads(files["metadata"].read_text())
    assert meta["paths"] == 2 and meta["variant"] == "KKT-2-LC"
    for alpha in ("0.2", "0.3"):
        entry = meta["files"]["traces"][alpha]
        assert (tmp_path / entry["train"]).exists() and (tmp_path / entry["steps"]).exists()


def test_report_rejects_empty(tmp_path):
    with pytest.raises(ConfigurationError):
        emit_report(X.RunReport(ExperimentConfig().to_json()), tmp_path)


def test_report_header_is_checked(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigurationError):
        read_report_csv(path)


def test_no_attack_arm_shared_across_variants(hexagon):
    cfg = ExperimentConfig(**SMALL)
    a = X.run_experiment(cfg, hexagon, alphas=(0.3,), traces=False)
    b = X.run_experiment(cfg.replace(variant="2"), hexagon, alphas=(0.3,), traces=False)
    assert a.rows[0].det_noattack == b.rows[0].det_noattack
    assert a.rows[0].dev_noattack == b.rows[0].dev_noattack


def test_step_trace_matches_first_evaluation_path(hexagon, small_report):
    cfg, report = small_report
    trained = X.train(cfg.replace(alpha=0.3), hexagon)
    make = X.eval_policy(cfg, hexagon, trained)
    steps = X.step_trace(cfg, hexagon, make)
    first = X.evaluate(cfg, hexagon, make)[0]
    assert len(steps["t"]) == cfg.steps
    assert steps["alarm"][cfg.burn_in:].mean() == pytest.approx(first.detection, abs=1e-12)
    assert steps["deviation"].sum(axis=1)[cfg.burn_in:].mean() == pytest.approx(first.deviation, rel=1e-12)


def test_spsa_trace_has_parameter_norms(hexagon):
    cfg = ExperimentConfig(**SMALL, method="spsa", variant="2")
    trained = X.train(cfg, hexagon)
    steps = X.step_trace(cfg, hexagon, X.eval_policy(cfg, hexagon, trained))
    assert steps["M_norm"].shape == (cfg.steps, 6) and steps["d_norm"].shape == (cfg.steps, 6)


def test_unconstrained_attack_gets_closest_to_target(hexagon):
    # a detection budget of one never binds, so the multiplier is driven to zero
    cfg = ExperimentConfig(**{**SMALL, "min_updates": 2000, "max_updates": 2000})
    strict = X.run_experiment(cfg.replace(alpha=0.2), hexagon, traces=False)
    loose = X.run_experiment(cfg.replace(alpha=1.0, eta=1e9), hexagon, traces=False)
    assert loose.rows[0].lambda_star < 1e-3
    assert loose.rows[0].dev_fdi[0] <= strict.rows[0].dev_fdi[0]


def test_train_result_json_round_trip(hexagon):
    cfg = ExperimentConfig(**SMALL, method="spsa", variant="2")
    tr = X.train(cfg, hexagon)
    back = X.TrainResult.from_json(json.loads(json.dumps(tr.to_json())))
    assert back.lam_star == tr.lam_star and np.array_equal(back.lam_trace, tr.lam_trace)
    assert np.array_equal(back.iterate.M, tr.iterate.M)
    assert len(tr.lam_trace) == tr.updates + 1


def _cli(args, tmp_path):
    sets = []
    for k, v in SMALL.items():
        sets += ["--set", f"{k}={v}"]
    return main(args + ["--out", str(tmp_path)] + sets)


def test_cli_pipeline(tmp_path, capsys):
    assert _cli(["generate"], tmp_path) == 0
    assert _cli(["calibrate"], tmp_path) == 0
    assert _cli(["train", "--alpha", "0.3"], tmp_path) == 0
    assert _cli(["evaluate", "--no-traces"], tmp_path) == 0
    assert _cli(["report"], tmp_path) == 0
    out = capsys.readouterr().out
    assert "KKT-2-LC" in out
    for name in ("instance.json", "sigma.json", "trained.json", "config.json", "report.csv", "metadata.json"):
        assert (tmp_path / name).exists()
    assert [r[0] for r in read_report_csv(tmp_path / "report.csv")] == [0.3]


def test_cli_sweep_hyper_c(tmp_path):
    assert _cli(["sweep", "--alpha", "0.3", "--no-traces", "--hyper-c", "--set", "variant=1-LC",
                 "--set", "hyper_c_grid=[3.0, 4.0]"], tmp_path) == 0
    assert (tmp_path / "hyper_c_3.0" / "report.csv").exists()
    assert (tmp_path / "hyper_c_4.0" / "report.csv").exists()


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["evaluate", "--out", str(tmp_path)]) == 2
    assert main(["train", "--out", str(tmp_path), "--set", "nope=1"]) == 2
    assert "error:" in capsys.readouterr().err


def test_error_hierarchy():
    assert issubclass(ConfigurationError, KcfAttackError)
