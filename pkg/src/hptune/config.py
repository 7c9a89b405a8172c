"""JSON run configuration with strict, sectioned keys.

Every section mirrors a module-level dataclass; omitted keys take that
dataclass's default, unknown keys are rejected by name.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .perception import KalmanConfig, SensorConfig
from .planner import PlannerConfig, TunableParams
from .sim import EpisodeConfig, Scenario, Strategy
from .tuning import LossWeights, MarginConfig
from .vehicle import ActionBounds


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class VehicleConfig:
    v_min: float = 0.0
    v_max: float = 8.0
    psi_min: float = -1.0
    psi_max: float = 1.0
    length: float = 4.0
    width: float = 2.0


@dataclass(frozen=True)
class TuningConfig:
    phi_base: float = 0.2
    phi_max: float = 2.0
    d_min: float = 1e-3
    eta1: float = 1e-1
    eta2: float = 1e-1
    eta3: float = 1e-3
    T: int = 5
    epsilon: float = 1e-3
    alpha0: float = 0.2
    beta0: float = 5.0
    alpha_box: tuple = (0.01, 0.99)
    beta_box: tuple = (0.0, 100.0)


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"


_PLANNER_KEYS = tuple(f.name for f in fields(PlannerConfig) if f.name not in ("ego_length", "ego_width"))
_SECTIONS = {
    "scenario": Scenario,
    "vehicle": VehicleConfig,
    "planner": PlannerConfig,
    "tuning": TuningConfig,
    "sensor": SensorConfig,
    "tracking": KalmanConfig,
    "output": OutputConfig,
}


def _coerce(key: str, value, default):
    """Convert a JSON value to the type of ``default``."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{key}: expected a finite number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if default and isinstance(default[0], tuple):
            return tuple(_coerce(f"{key}[{i}]", row, default[0]) for i, row in enumerate(value))
        if default and len(value) != len(default):
            raise ConfigError(f"{key}: expected {len(default)} entries, got {len(value)}")
        proto = default[0] if default else 0.0
        return tuple(_coerce(f"{key}[{i}]", v, proto) for i, v in enumerate(value))
    raise ConfigError(f"{key}: unsupported value {value!r}")


def _section(name: str, cls, data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    allowed = _PLANNER_KEYS if cls is PlannerConfig else tuple(f.name for f in fields(cls))
    base = cls()
    kwargs = {}
    for k, v in data.items():
        if k not in allowed:
            raise ConfigError(f"{name}.{k}: unknown key")
        kwargs[k] = _coerce(f"{name}.{k}", v, getattr(base, k))
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario = field(default_factory=Scenario)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    tuning: TuningConfig = field(default_factory=TuningConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    tracking: KalmanConfig = field(default_factory=KalmanConfig)
    strategy: Strategy = Strategy.HPTUNE
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be an object")
        for k in data:
            if k not in _SECTIONS and k != "strategy":
                raise ConfigError(f"{k}: unknown section")
        parts = {name: _section(name, sc, data.get(name)) for name, sc in _SECTIONS.items()}
        strategy = data.get("strategy", Strategy.HPTUNE.value)
        try:
            parts["strategy"] = Strategy(strategy)
        except ValueError:
            raise ConfigError(f"strategy: unknown value {strategy!r}") from None
        v = parts["vehicle"]
        try:
            ActionBounds(v.v_min, v.v_max, v.psi_min, v.psi_max)
            MarginConfig(parts["tuning"].phi_base, parts["tuning"].phi_max, parts["tuning"].d_min)
            _weights(parts["tuning"])
        except ValueError as exc:
            raise ConfigError(f"vehicle/tuning: {exc}") from None
        try:
            parts["scenario"].path
        except ValueError as exc:
            raise ConfigError(f"scenario.waypoints: {exc}") from None
        parts["planner"] = replace(parts["planner"], ego_length=v.length, ego_width=v.width)
        return cls(**parts)

    def to_dict(self) -> dict:
        planner = {k: v for k, v in asdict(self.planner).items() if k in _PLANNER_KEYS}
        out = {
            "scenario": asdict(self.scenario),
            "vehicle": asdict(self.vehicle),
            "planner": planner,
            "tuning": asdict(self.tuning),
            "sensor": asdict(self.sensor),
            "tracking": asdict(self.tracking),
            "strategy": self.strategy.value,
            "output": asdict(self.output),
        }
        return json.loads(json.dumps(out))  # tuples -> lists

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, scenario=replace(self.scenario, seed=int(seed)))

    def with_strategy(self, strategy) -> "RunConfig":
        return replace(self, strategy=Strategy(strategy))

    def episode_config(self) -> EpisodeConfig:
        v, t = self.vehicle, self.tuning
        return EpisodeConfig(
            planner=self.planner,
            bounds=ActionBounds(v.v_min, v.v_max, v.psi_min, v.psi_max),
            margins=MarginConfig(t.phi_base, t.phi_max, t.d_min),
            weights=_weights(t),
            sensor=self.sensor,
            kalman=self.tracking,
        )

    def initial_params(self) -> TunableParams:
        return TunableParams(self.tuning.alpha0, self.tuning.beta0)


def _weights(t: TuningConfig) -> LossWeights:
    return LossWeights(t.eta1, t.eta2, t.eta3, t.T, t.epsilon, tuple(t.alpha_box), tuple(t.beta_box))


def load_config(path: str | None) -> RunConfig:
    """Read a JSON config file; ``None`` gives the all-defaults config."""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return RunConfig.from_dict(data)


def dumps(obj) -> str:
    """Canonical JSON text used for every embedded config copy."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
