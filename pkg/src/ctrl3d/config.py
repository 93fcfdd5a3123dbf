"""Run configuration: one YAML schema binding every module together.

Values resolve with precedence CLI ``--set`` > environment > file > default.
Environment overrides use double-underscore paths, e.g.
``CTRL3D_SURF__SCHEDULE__BASE_LR=5e-5``. Unknown keys are rejected rather
than ignored, and every run writes its fully resolved configuration next to
its checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adapters import ImageFolderDataset
from .errors import ConfigError
from .injection import InjectionTrainConfig
from .synthetic import SphereDataset
from .training import SurfTrainConfig

ENV_PREFIX = "CTRL3D_"

_ADAPTER_KINDS = ("encoder", "decoder", "perceptual", "identity", "pose_estimator")


@dataclass
class DatasetConfig:
    kind: str = "spheres"  # "spheres" (synthetic) or "folder"
    path: str | None = None
    size: int = 64  # synthetic dataset size
    native_resolution: int = 64


@dataclass
class InjectionRunConfig:
    train: InjectionTrainConfig = field(default_factory=InjectionTrainConfig)
    steps: int = 1000
    source: str = "mock"  # "mock" or "generator"
    surf_checkpoint: str | None = None
    render_resolution: int = 256
    num_directions: int = 5


def _default_adapters() -> dict:
    return {kind: {"backend": "mock"} for kind in _ADAPTER_KINDS}


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    surf: SurfTrainConfig = field(default_factory=SurfTrainConfig)
    injection: InjectionRunConfig = field(default_factory=InjectionRunConfig)
    adapters: dict = field(default_factory=_default_adapters)


def _coerce_primitive(value, type_str, path: str):
    """Nudge scalars toward the declared field type (YAML leaves values like
    '3e-5' as strings)."""
    if value is None or not isinstance(type_str, str):
        return value
    base = type_str.replace(" ", "").split("|")[0]
    try:
        if base == "float" and not isinstance(value, float):
            return float(value)
        if base == "int" and not isinstance(value, int):
            as_float = float(value)
            if as_float != int(as_float):
                raise ValueError(f"{value!r} is not an integer")
            return int(as_float)
        if base == "bool" and isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ("true", "yes", "1"):
                return True
            if lowered in ("false", "no", "0"):
                return False
            raise ValueError(f"{value!r} is not a boolean")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {path}: {exc}") from exc
    return value


def _bind(cls, data, path: str):
    """Strictly bind a plain dict onto a dataclass tree."""
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub_path = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type in _DATACLASS_NAMES
        ):
            target = f.type if dataclasses.is_dataclass(f.type) else _DATACLASS_NAMES[f.type]
            kwargs[name] = _bind(target, value, sub_path)
        else:
            kwargs[name] = _coerce_primitive(value, f.type, sub_path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration at {path or 'top level'}: {exc}") from exc


def _collect_dataclass_names() -> dict:
    # resolve postponed annotations ("GeneratorConfig" etc.) used by dataclasses
    from . import camera, generator, training

    names = {}
    for module in (camera, generator, training):
        for attr in vars(module).values():
            if dataclasses.is_dataclass(attr) and isinstance(attr, type):
                names[attr.__name__] = attr
    from .injection import InjectionLossWeights

    for extra in (DatasetConfig, InjectionRunConfig, InjectionTrainConfig, InjectionLossWeights):
        names[extra.__name__] = extra
    return names


_DATACLASS_NAMES = _collect_dataclass_names()


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _nested_from_path(path: list[str], value):
    for key in reversed(path):
        value = {key: value}
    return value


def _env_overrides(environ) -> dict:
    overrides: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        overrides = _deep_merge(
            overrides, _nested_from_path(path, yaml.safe_load(raw))
        )
    return overrides


def parse_set_option(expr: str) -> dict:
    """One ``--set section.key=value`` expression as a nested dict."""
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"--set expects a dotted key, got {expr!r}")
    return _nested_from_path(path, yaml.safe_load(raw))


def load_config(
    path=None,
    sets: list[str] | tuple[str, ...] = (),
    environ=None,
) -> RunConfig:
    """Resolve a run configuration from file, environment and --set options."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        data = loaded
    data = _deep_merge(data, _env_overrides(environ if environ is not None else os.environ))
    for expr in sets:
        data = _deep_merge(data, parse_set_option(expr))
    cfg = _bind(RunConfig, data, "")
    validate_adapters(cfg.adapters)
    return cfg


def validate_adapters(adapters: dict) -> None:
    unknown = sorted(set(adapters) - set(_ADAPTER_KINDS))
    if unknown:
        raise ConfigError(f"unknown adapter kinds: {unknown}")


def resolved_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(resolved_dict(cfg), sort_keys=False))
    return path


def build_dataset(cfg: DatasetConfig, camera=None):
    if cfg.kind == "spheres":
        return SphereDataset(
            size=cfg.size, native_resolution=cfg.native_resolution, camera=camera
        )
    if cfg.kind == "folder":
        if not cfg.path:
            raise ConfigError("dataset.kind=folder requires dataset.path")
        return ImageFolderDataset(cfg.path)
    raise ConfigError(f"unknown dataset kind {cfg.kind!r}")
