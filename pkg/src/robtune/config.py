"""Experiment configuration: a strict TOML schema over the library defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .lti import FrequencyGrid
from .rollout import DEFAULT_Q
from .scenario import TABLE_II, Scenario
from .trainer import TrainerConfig
from .vehicle import UncertaintyRanges, VehicleParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSection:
    seed: int = 0
    out: str = "results"


@dataclass(frozen=True)
class ActualPlantSection:
    """Overrides applied to the nominal vehicle to get the "actual" plant."""

    cf: float = 40e3
    cr: float = 40e3


@dataclass(frozen=True)
class CoverSection:
    n_samples: int = 60
    n_corners: int = -1  # -1: n_samples // 6
    order: int = 2
    margin: float = 0.05
    balance_inputs: bool = True


@dataclass(frozen=True)
class GridSection:
    lo: float = 1e-3
    hi: float = 1e3
    n: int = 600
    certify_factor: int = 3

    def grid(self) -> FrequencyGrid:
        return FrequencyGrid.logspace(self.lo, self.hi, self.n)


@dataclass(frozen=True)
class RolloutSection:
    ts: float = 0.02
    q_diag: tuple = DEFAULT_Q


@dataclass(frozen=True)
class BaselineSection:
    init_controller: str = ""  # optional JSON path; empty means built-in baseline
    speed_kp: float = 2000.0
    speed_ki: float = 400.0
    q_lat: tuple = (0.0, 0.0, 1.0, 1e-2, 0.0)
    r_lat: float = 1.0
    lateral_pole: float = 5.0
    output_scale: float = 1e-3
    max_tries: int = 200


@dataclass(frozen=True)
class GpSection:
    restarts: int = 2
    steps: int = 500
    collect_scenario: str = "1"


@dataclass(frozen=True)
class AdaptationSection:
    """Epoch budget for tuning on the learned model; -1 inherits from ``[trainer]``."""

    epochs_short: int = -1
    epochs_long: int = -1


@dataclass(frozen=True)
class EvaluateSection:
    t_end: float = 8.0


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    actual_plant: ActualPlantSection = field(default_factory=ActualPlantSection)
    uncertainty: UncertaintyRanges = field(default_factory=UncertaintyRanges)
    cover: CoverSection = field(default_factory=CoverSection)
    grid: GridSection = field(default_factory=GridSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    gp: GpSection = field(default_factory=GpSection)
    adaptation: AdaptationSection = field(default_factory=AdaptationSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    scenarios: tuple = TABLE_II
    train_scenarios: tuple = ("1", "2", "3")

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            experiment=dataclasses.replace(self.experiment, seed=seed),
            trainer=dataclasses.replace(self.trainer, seed=seed),
        )

    def actual_params(self) -> VehicleParams:
        return dataclasses.replace(self.vehicle, cf=self.actual_plant.cf, cr=self.actual_plant.cr)

    def scenario(self, name: str) -> Scenario:
        for sc in self.scenarios:
            if sc.name == name:
                return sc
        raise ConfigError(f"unknown scenario {name!r}")

    def trainer_config(self) -> TrainerConfig:
        return dataclasses.replace(self.trainer, ts=self.rollout.ts, q_diag=tuple(self.rollout.q_diag),
                                   certify_factor=self.grid.certify_factor, seed=self.seed)

    def adaptation_config(self) -> TrainerConfig:
        cfg = self.trainer_config()
        a = self.adaptation
        return dataclasses.replace(
            cfg,
            epochs_short=cfg.epochs_short if a.epochs_short < 0 else a.epochs_short,
            epochs_long=cfg.epochs_long if a.epochs_long < 0 else a.epochs_long,
        )


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
# fields owned by other sections or set from the command line
_HIDDEN = {"trainer": {"ts", "q_diag", "seed", "certify_factor"}}


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or (default and len(value) != len(default)):
            raise ConfigError(f"{where}: expected a list of {len(default)} numbers")
        return tuple(_coerce(v, 0.0, where) for v in value)
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _section(cls_default, data: dict, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name for f in dataclasses.fields(cls_default)} - _HIDDEN.get(name, set())
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {', '.join(unknown)}")
    kw = {k: _coerce(v, getattr(cls_default, k), f"{name}.{k}") for k, v in data.items()}
    try:
        return dataclasses.replace(cls_default, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def _scenarios(items) -> tuple:
    if not isinstance(items, list) or not items:
        raise ConfigError("[[scenarios]] must be a non-empty array of tables")
    out = []
    keys = {"name", "xpf", "tf1", "amax", "yf", "tf2"}
    for i, it in enumerate(items):
        if not isinstance(it, dict):
            raise ConfigError(f"scenarios[{i}] must be a table")
        if set(it) != keys:
            raise ConfigError(f"scenarios[{i}] needs exactly the keys {sorted(keys)}")
        try:
            out.append(Scenario(float(it["xpf"]), float(it["tf1"]), float(it["amax"]),
                                float(it["yf"]), float(it["tf2"]), str(it["name"])))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scenarios[{i}]: {exc}") from exc
    names = [s.name for s in out]
    if len(set(names)) != len(names):
        raise ConfigError("scenario names must be unique")
    return tuple(out)


def config_from_dict(data: dict) -> ExperimentConfig:
    base = ExperimentConfig()
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    kw = {}
    for name, value in data.items():
        if name == "scenarios":
            kw[name] = _scenarios(value)
        elif name == "train_scenarios":
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError("train_scenarios must be a list of scenario names")
            kw[name] = tuple(value)
        else:
            kw[name] = _section(getattr(base, name), value, name)
    cfg = dataclasses.replace(base, **kw)
    for n in cfg.train_scenarios + (cfg.gp.collect_scenario,):
        cfg.scenario(n)
    if cfg.cover.order not in (0, 1, 2):
        raise ConfigError("cover.order must be 0, 1 or 2")
    return cfg.with_seed(cfg.seed)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def default_config_text(name: str = "default.toml") -> str:
    return resources.files("robtune").joinpath("data").joinpath(name).read_text()


def default_config() -> ExperimentConfig:
    return config_from_dict(tomllib.loads(default_config_text()))
