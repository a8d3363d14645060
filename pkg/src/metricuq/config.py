"""Run configuration: YAML files mapped onto nested dataclasses with strict key checking."""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .driver import AdaptOptions, Schedule, TotalTargets
from .models import MODELS, PDF_KINDS
from .remesh import MesherOptions


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    mode: str = "multiply"
    factor: float = 2.0
    n_steps: int = 8
    c_start: float | None = None
    C_xi_max: float = math.inf
    C_x_max: float = math.inf
    C_x_default: float = 100.0


@dataclass
class DetModelConfig:
    kind: str = "analytic"
    K: float = 1.0
    d_x: int = 2


@dataclass
class TotalConfig:
    delta_j: float = 1e-3
    it_max: int = 20


@dataclass
class MesherConfig:
    max_passes: int = 10
    change_tol: float = 0.01
    smooth_iterations: int = 3
    smooth_relax: float = 0.5
    flip_rounds: int = 8
    flip_quality: float = 0.95
    collapse_quality: float = 0.3


@dataclass
class RunConfig:
    model: str = "jakeman2d"
    pdf: str = "uniform"
    algorithm: str = "stoch"
    seed: int = 0
    output: str = "runs/out"
    n_initial: int = 10
    threads: int = 1
    quad_degree: int | None = None
    gradation: float | None = 2.0
    interpolate_C_x: bool = False
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    det_model: DetModelConfig = field(default_factory=DetModelConfig)
    total: TotalConfig = field(default_factory=TotalConfig)
    mesher: MesherConfig = field(default_factory=MesherConfig)

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; available: {sorted(MODELS)}")
        if self.pdf not in PDF_KINDS:
            raise ConfigError(f"unknown pdf {self.pdf!r}; available: {list(PDF_KINDS)}")
        if self.algorithm not in ("stoch", "total"):
            raise ConfigError(f"algorithm must be 'stoch' or 'total', got {self.algorithm!r}")
        if self.det_model.kind not in ("analytic", "synthetic"):
            raise ConfigError(f"det_model.kind must be 'analytic' or 'synthetic', got {self.det_model.kind!r}")
        if self.n_initial < 1:
            raise ConfigError("n_initial must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        try:
            self.schedule_obj()
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from None
        return self

    def schedule_obj(self) -> Schedule:
        return Schedule(**dataclasses.asdict(self.schedule))

    def targets(self) -> TotalTargets:
        return TotalTargets(self.total.delta_j, self.total.it_max)

    def sub_seeds(self):
        """Independent seeds for the DoE and the mesher, split from the run seed."""
        children = np.random.SeedSequence(self.seed).spawn(2)
        return tuple(int(c.generate_state(1, dtype=np.uint32)[0]) for c in children)

    def adapt_options(self) -> AdaptOptions:
        doe_seed, mesh_seed = self.sub_seeds()
        mopts = MesherOptions(**dataclasses.asdict(self.mesher), seed=mesh_seed)
        return AdaptOptions(
            n_initial=self.n_initial,
            seed=doe_seed,
            quad_degree=self.quad_degree,
            gradation=self.gradation,
            threads=self.threads,
            mesher=mopts,
            interpolate_C_x=self.interpolate_C_x,
        )


def _convert(tp, value, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(inner, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, path=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"unknown config key {where!r}")
    kwargs = {}
    for name in names & set(data):
        where = f"{path}.{name}" if path else name
        kwargs[name] = _convert(hints[name], data[name], where)
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return _build(RunConfig, data).validate()


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(cfg: RunConfig) -> str:
    """Resolved configuration as YAML; parse_config(dump_config(c)) == c."""
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False)
