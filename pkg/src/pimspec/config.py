"""Experiment configuration: one YAML file describes the model, hardware, scheduler and sweep."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .hwmodel import DRAMConfig, EnergyParams, NPUConfig, PIMConfig, SystemConfig
from .nmc import TimingParams
from .scheduler import (
    HeadStats, PartitionTable, SchedulerConfig, eligible_weight_bytes, optimal_ratio,
)
from .simloop import MODES, OracleConfig, RunConfig
from .workload import ModelSpec, build_model_spec, total_weight_bytes

DEFAULT_CONFIG = "default.yaml"


@dataclass(frozen=True)
class SweepConfig:
    models: tuple = ("llama2-7b",)
    modes: tuple = MODES
    l_in_out: tuple = ((128, 256), (256, 512))
    l_spec: tuple = (2, 4, 8, 16, 32)
    seeds: tuple = (1,)
    trials: int = 1
    oracle: str = "independent"
    bonus_token: bool = True

    def points(self):
        """Sweep points in a fixed order: model, (l_in, l_out), l_spec, seed, mode."""
        for model in self.models:
            for l_in, l_out in self.l_in_out:
                for l_spec in self.l_spec:
                    for seed in self.seeds:
                        for mode in self.modes:
                            yield model, RunConfig(mode, l_in, l_out, l_spec, seed, self.trials,
                                                   self.oracle, self.bonus_token)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    system: SystemConfig
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    model_overrides: dict = field(default_factory=dict)
    out_dir: str = "results"
    source: str = "<defaults>"

    def model_named(self, preset: str) -> ModelSpec:
        if preset == self.model.name:
            return self.model
        return build_model_spec(preset, **self.model_overrides)

    def validate(self) -> list[str]:
        """Every violated invariant across all blocks; empty when the config is usable."""
        problems = list(self.system.validate())
        problems += self.scheduler.validate()
        try:
            HeadStats.from_rows(self.oracle.rows)
        except Exception as exc:
            problems.append(f"oracle.rows: {exc}")
        s = self.sweep
        if not s.modes or not s.l_in_out or not s.l_spec or not s.seeds or not s.models:
            problems.append("run: sweep lists (models, modes, l_in_out, l_spec, seeds) must be nonempty")
        problems += [f"run.modes: unknown mode {m!r}" for m in s.modes if m not in MODES]
        problems += [f"run.l_spec: {l} must be >= 1" for l in s.l_spec if l < 1]
        problems += [f"run.l_in_out: {p} must be two positive counts" for p in s.l_in_out
                      if len(p) != 2 or min(p) < 1]
        if problems:
            return problems
        max_seq = max(a + b for a, b in s.l_in_out)
        for preset in s.models:
            try:
                model = self.model_named(preset)
            except ConfigurationError as exc:
                problems.append(f"run.models: {exc}")
                continue
            problems += capacity_problems(model, self.system, max_seq)
        return problems


def capacity_problems(model: ModelSpec, sys: SystemConfig, max_seq: int) -> list[str]:
    problems = []
    need = total_weight_bytes(model) + max_seq * model.kv_bytes_per_token()
    if need > sys.total_capacity:
        problems.append(
            f"capacity: {model.name} weights + KV at {max_seq} tokens need {need / 1e9:.2f} GB, "
            f"memory holds {sys.total_capacity / 1e9:.2f} GB")
    want = optimal_ratio(1, sys) * eligible_weight_bytes(model)
    if want > sys.pim.capacity:
        problems.append(
            f"capacity: {model.name} co-processing split puts {want / 1e9:.2f} GB in PIM ranks "
            f"holding {sys.pim.capacity / 1e9:.2f} GB")
    return problems


_BLOCKS = {"npu": NPUConfig, "pim": PIMConfig, "dram": DRAMConfig, "timing": TimingParams,
           "energy": EnergyParams}


def _build(cls, data, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) {unknown}")
    kw = {}
    for key, value in data.items():
        default = known[key].default
        if isinstance(value, str) and isinstance(default, (int, float)) and not isinstance(default, bool):
            # YAML 1.1 reads "51.2e9" (no sign on the exponent) as a string
            try:
                value = float(value)
            except ValueError:
                raise ConfigurationError(f"{path}.{key}: expected a number, got {value!r}") from None
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        elif isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
            value = float(value)
        elif isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigurationError(f"{path}.{key}: expected true/false, got {value!r}")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigurationError(f"{path}.{key}: expected an integer, got {value!r}")
        kw[key] = value
    try:
        return cls(**kw)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def from_dict(data: dict, source: str = "<dict>") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")
    unknown = sorted(set(data) - {"model", "system", "scheduler", "oracle", "run", "output"})
    if unknown:
        raise ConfigurationError(f"{source}: unknown section(s) {unknown}")

    model_block = dict(data.get("model") or {})
    preset = model_block.pop("preset", "llama2-7b")
    overrides = model_block.pop("overrides", None) or {}
    if model_block:
        raise ConfigurationError(f"model: unknown key(s) {sorted(model_block)}")
    model = build_model_spec(preset, **overrides)

    sys_block = dict(data.get("system") or {})
    combine = sys_block.pop("latency_combine", "max")
    unknown = sorted(set(sys_block) - set(_BLOCKS))
    if unknown:
        raise ConfigurationError(f"system: unknown block(s) {unknown}")
    parts = {name: _build(cls, sys_block.get(name), f"system.{name}") for name, cls in _BLOCKS.items()}
    system = SystemConfig(latency_combine=combine, **parts)

    scheduler = _build(SchedulerConfig, data.get("scheduler"), "scheduler")
    oracle = _build(OracleConfig, data.get("oracle"), "oracle")
    run = dict(data.get("run") or {})
    run.setdefault("models", [preset])
    sweep = _build(SweepConfig, run, "run")
    out = (data.get("output") or {}).get("dir", "results")
    return ExperimentConfig(model, system, scheduler, oracle, sweep, dict(overrides), str(out), source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc.strerror or exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigurationError(f"{path}:{where}: {getattr(exc, 'problem', None) or exc}") from None
    return from_dict(data or {}, str(path))


def default_config_text() -> str:
    return resources.files("pimspec").joinpath("data", DEFAULT_CONFIG).read_text()


def default_config() -> ExperimentConfig:
    return from_dict(yaml.safe_load(default_config_text()), f"<shipped {DEFAULT_CONFIG}>")
