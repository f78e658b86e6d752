"""Run configuration: one JSON document covering the pipeline, grid, gate,
scene, sensor and dataset settings.  Unknown keys are rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import SceneConfig, SensorModel, Weather
from .detector.model import Mode, PipelineConfig
from .fusion import GateConfig, GateMode
from .voxel import VoxelGridSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 200
    base_seed: int = 42
    paired_rain_val: bool = True


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    sensor: SensorModel = field(default_factory=SensorModel)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, pipeline=replace(self.pipeline, seed=seed))

    def with_mode(self, mode: str, gate_mode: str | None = None) -> "RunConfig":
        pipe = replace(self.pipeline, mode=Mode(mode))
        if gate_mode is not None:
            pipe = replace(pipe, gate=replace(pipe.gate, mode=GateMode(gate_mode)))
        return replace(self, pipeline=pipe)


_PIPELINE_NESTED = {"grid", "gate"}


def _plain(value):
    if isinstance(value, (Mode, GateMode, Weather)):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    return value


def to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _build(cls, data: dict, where: str, nested: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if nested and key in nested:
            kwargs[key] = nested[key](value)
        else:
            kwargs[key] = _tupled(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(data) - {"pipeline", "scene", "sensor", "dataset"})
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    nested = {
        "grid": lambda d: _build(VoxelGridSpec, d, "pipeline.grid"),
        "gate": lambda d: _build(GateConfig, d, "pipeline.gate"),
    }
    return RunConfig(
        pipeline=_build(PipelineConfig, data.get("pipeline", {}), "pipeline", nested),
        scene=_build(SceneConfig, data.get("scene", {}), "scene"),
        sensor=_build(SensorModel, data.get("sensor", {}), "sensor"),
        dataset=_build(DatasetConfig, data.get("dataset", {}), "dataset"),
    )


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def dump(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
