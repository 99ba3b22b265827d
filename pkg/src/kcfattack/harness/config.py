"""Experiment configuration: a single versioned JSON document with CLI overrides."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigurationError

SCHEMA_VERSION = 1
OUTPUT_ENV = "KCFATTACK_OUTPUT_DIR"
METHODS = ("kkt", "spsa")


@dataclass
class ExperimentConfig:
    # instance
    topology: str = "regular3-hexagon"
    N: int = 6
    q: int = 2
    p: int = 3
    instance_seed: int = 0
    plant_radius: tuple = (0.5, 0.95)
    noise_scale: float = 0.1
    consensus_weight: float = 1.0
    x_star: tuple = (2.0, 2.0)
    attacked: tuple = None
    # detector
    alpha: float = 0.3
    eta: float = 300.0
    J: int = 10
    calibration_steps: int = 20000
    calibration_burn_in: int = 1000
    calibration_seed: int = 10_000
    # attack design
    method: str = "kkt"
    variant: str = "2-LC"
    xi: float = 0.5
    lam0: float = 4.0
    A0: float = 1e3
    param_bound: float = 1e3
    b0: float = 1.0
    b_exp: float = 1.0
    hyper_c: float = 1.0
    hyper_c_grid: tuple = (1.0, 1.5, 2.0, 3.0, 4.0)
    timescale_ratio: int = 10
    adam: bool = True
    update_T: bool = False
    strict_replay: bool = False
    spsa_a0: float = 0.3
    spsa_a_offset: float = 1e4
    spsa_a_exp: float = 0.602
    spsa_b0: float = 1.0
    spsa_b_exp: float = 0.9
    spsa_c0: float = 0.1
    spsa_c_exp: float = 0.101
    # training
    train_seed: int = 20_000
    min_updates: int = 50_000
    max_updates: int = 50_000
    convergence_lag: int = 500
    convergence_tol: float = 0.01
    convergence_checks: int = 3
    lambda_avg_window: int = 500
    # evaluation
    eval_paths: int = 10
    eval_seed: int = 30_000
    steps: int = 1200
    burn_in: int = 200
    alpha_grid: tuple = (0.2, 0.3)
    backend: str = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in ("plant_radius", "x_star", "hyper_c_grid", "alpha_grid"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.attacked is not None:
            self.attacked = tuple(int(k) for k in self.attacked)
        self.validate()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported config schema version {self.schema_version}")
        if self.N < 1 or self.q < 1 or self.p < 1:
            raise ConfigurationError("N, q and p must be positive")
        if len(self.x_star) != self.q:
            raise ConfigurationError(f"x_star must have {self.q} entries")
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        if self.method == "spsa" and str(self.variant).upper() not in ("1", "2"):
            raise ConfigurationError("the SPSA attack has variants 1 and 2 only")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in (0, 1]")
        if self.steps <= self.burn_in:
            raise ConfigurationError("steps must exceed burn_in")
        if self.eval_paths < 1:
            raise ConfigurationError("need at least one evaluation path")
        if not 0.0 < self.plant_radius[0] <= self.plant_radius[1] < 1.0:
            raise ConfigurationError("plant_radius must be an interval inside (0, 1)")
        if self.min_updates > self.max_updates:
            raise ConfigurationError("min_updates exceeds max_updates")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))

    def with_overrides(self, pairs):
        """Apply ``key=value`` strings; values are parsed as JSON when possible."""
        types = {f.name: f for f in dataclasses.fields(self)}
        changes = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigurationError(f"override {pair!r} is not of the form key=value")
            key, raw = pair.split("=", 1)
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigurationError(f"unknown config field {key!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            changes[key] = value
        return self.replace(**changes)


def output_dir(default="runs"):
    return Path(os.environ.get(OUTPUT_ENV, default))


def default_alpha_grid(topology):
    return (0.25, 0.4) if topology == "line" else (0.2, 0.3)

