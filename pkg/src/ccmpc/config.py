"""Run configuration: a JSON document validated against a published schema.

Every section is optional; omitted values fall back to the defaults of the
reference experiment. Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .ipm import SolverConfig
from .powertrain import PlantParams, PowertrainConfig, PowertrainSpecMaps, SpeedScenarioModel
from .stacked import ConfigurationError

OUTPUT_ENV = "CCMPC_OUTPUT_DIR"

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_NUM_LIST = {"type": "array", "items": _NUM, "minItems": 1}
_NUM3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ccmpc run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "powertrain": _section({
            "dt": {"type": "number", "exclusiveMinimum": 0},
            "horizon": {"type": "integer", "minimum": 1},
            "steps": {"type": "integer", "minimum": 1},
            "x0": _NUM3,
            "soc_ref": _NUM,
            "w_req": {"type": "number", "minimum": 0},
            "w_eng": {"type": "number", "exclusiveMinimum": 0},
            "w_mot": {"type": "number", "exclusiveMinimum": 0},
            "w_brk": {"type": "number", "exclusiveMinimum": 0},
            "w_soc": {"type": "number", "exclusiveMinimum": 0},
            "w_delta": {"type": "number", "minimum": 0},
            "soc_lo": _NUM, "soc_hi": _NUM,
            "mot_lo": _NUM, "mot_hi": _NUM,
            "power_lo": _NUM, "power_hi": _NUM,
            "brk_hi": _NUM,
            "delta_bar": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "samples": {"type": "integer", "minimum": 2},
            "speed_floor": {"type": "number", "exclusiveMinimum": 0},
            "mode": {"enum": ["mv", "bd", "cdf"]},
        }),
        "spec_maps": _section({
            "engine_speeds": _NUM_LIST, "engine_torques": _NUM_LIST,
            "soc_speeds": _NUM_LIST, "soc_targets": _NUM_LIST,
        }),
        "scenarios": _section({
            "mean_accel": _NUM_LIST,
            "std_accel": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            "v0": _NUM,
            "steps": {"type": "integer", "minimum": 1},
            "dt": {"type": "number", "exclusiveMinimum": 0},
        }),
        "plant": _section({
            "phi_a": _NUM3, "phi_b": _NUM3, "psi_d": _NUM3,
            "psi_weights": {"type": "array", "items": _NUM3, "minItems": 3, "maxItems": 3},
            "psi_bias": _NUM3, "psi_amplitude": _NUM3,
            "engine_lag": _NUM, "drag": _NUM, "torque_gain": _NUM, "charge_gain": _NUM,
            "bias": _NUM3,
        }),
        "solver": _section({
            "tol_kkt": {"type": "number", "exclusiveMinimum": 0},
            "tol_gap": {"type": "number", "exclusiveMinimum": 0},
            "mu0": {"type": "number", "exclusiveMinimum": 0},
            "mu_shrink": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "max_newton": {"type": "integer", "minimum": 1},
            "epsilon_floor": {"type": "number", "exclusiveMinimum": 0},
            "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
            "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "polish": {"type": "boolean"},
        }),
    },
}


def _tuples(value):
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def _build(cls, data: dict):
    known = {f.name for f in fields(cls)}
    return cls(**{k: _tuples(v) for k, v in data.items() if k in known})


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one closed-loop experiment."""

    powertrain: PowertrainConfig = field(default_factory=PowertrainConfig)
    spec_maps: PowertrainSpecMaps = field(default_factory=PowertrainSpecMaps)
    scenarios: SpeedScenarioModel = field(default_factory=SpeedScenarioModel)
    plant: PlantParams = field(default_factory=PlantParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigurationError(f"invalid configuration at {path}: {exc.message}") from exc
        try:
            cfg = cls(
                powertrain=_build(PowertrainConfig, data.get("powertrain", {})),
                spec_maps=_build(PowertrainSpecMaps, data.get("spec_maps", {})),
                scenarios=_build(SpeedScenarioModel, data.get("scenarios", {})),
                plant=_build(PlantParams, data.get("plant", {})),
                solver=_build(SolverConfig, data.get("solver", {})),
                seed=int(data.get("seed", 0)),
                output_dir=data.get("output_dir"),
            )
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        cfg.spec_maps.check(cfg.powertrain)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read configuration {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"configuration is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        solver = asdict(self.solver)
        solver.pop("trace", None)
        out = {
            "seed": self.seed,
            "powertrain": asdict(self.powertrain),
            "spec_maps": asdict(self.spec_maps),
            "scenarios": asdict(self.scenarios),
            "plant": asdict(self.plant),
            "solver": solver,
        }
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return json.loads(json.dumps(out))  # tuples -> lists

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(self.powertrain, self.spec_maps, self.scenarios, self.plant, self.solver,
                         seed, self.output_dir)
