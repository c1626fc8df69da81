"""Run configuration: YAML file -> nested dataclasses, with key-path errors and provenance.

Every leaf of the resolved configuration carries a provenance tag: ``default``,
``file:<path>``, ``override:<flag>`` or ``env:DEXRAND_OUT``. Unknown keys are
rejected with their full dotted path. ``randomization.physics.params``, when
given, replaces the default table as a whole so entries can be removed.
"""
from __future__ import annotations

import copy
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from dexrand import randstack, sysid, toyenv
from dexrand.randstack import ConfigError, Distribution, RandomizationSpec
from dexrand.trainer import TrainConfig
from dexrand.visrand import CalibratedColor, PoseAugmentConfig

OUT_ENV = "DEXRAND_OUT"
PROVENANCE_KEY = "_provenance"
# fields that exist on the dataclasses but are set from elsewhere in the run config
_SKIP = {TrainConfig: {"seed"}}


@dataclass
class CalibrationConfig:
    params: list[str] = field(default_factory=lambda: ["damping", "stiffness", "gain", "friction", "joint_inertia"])
    perturb_low: float = 0.5  # hidden ground truth is the base env; the start is perturbed by a factor in this range
    perturb_high: float = 2.0
    perturb_seed: int = 1
    trajectory_seed: int = 0
    max_passes: int = 100

    def validate(self) -> None:
        if not self.params:
            raise ConfigError("calibration.params: empty parameter list")
        for p in self.params:
            try:
                sysid.get_value(toyenv.EnvParams(), p)
            except (KeyError, ValueError, IndexError) as exc:
                raise ConfigError(f"calibration.params: {exc}") from None
        if not 0 < self.perturb_low <= self.perturb_high:
            raise ConfigError("calibration.perturb_low/perturb_high: need 0 < low <= high")
        if self.max_passes < 1:
            raise ConfigError("calibration.max_passes: must be >= 1")


@dataclass
class EvalConfig:
    episodes: int = 20
    greedy: bool = True

    def validate(self) -> None:
        if self.episodes < 1:
            raise ConfigError("eval.episodes: must be >= 1")


@dataclass
class RandcheckConfig:
    seed: int = 0
    episodes: int = 20_000  # shared pool of per-episode draws
    noise_steps: int = 200_000
    action_samples: int = 500_000
    dropout_steps: int = 200_000
    timing_repeats: int = 100  # substep draws per pooled episode = 10 x repeats
    force_steps: int = 300_000
    vision_draws: int = 1_000_000
    pose_draws: int = 100_000

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if f.name != "seed" and getattr(self, f.name) < 1:
                raise ConfigError(f"randcheck.{f.name}: sample count must be >= 1")


@dataclass
class VisionConfig:
    hue: float = 0.6
    saturation: float = 0.7
    value: float = 0.8
    pose: PoseAugmentConfig = field(default_factory=PoseAugmentConfig)

    def calibrated(self) -> CalibratedColor:
        return CalibratedColor(self.hue, self.saturation, self.value)

    def validate(self) -> None:
        try:
            self.calibrated().check()
            self.pose.check()
        except ValueError as exc:
            raise ConfigError(f"vision: {exc}") from None


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    disable_layers: list[str] = field(default_factory=list)
    env: toyenv.EnvParams = field(default_factory=toyenv.EnvParams)
    randomization: RandomizationSpec = field(default_factory=RandomizationSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    randcheck: RandcheckConfig = field(default_factory=RandcheckConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)

    def __post_init__(self):
        self.train.seed = self.seed

    def validate(self) -> "RunConfig":
        for name in self.disable_layers:
            if name not in randstack.LAYERS:
                raise ConfigError(f"disable_layers: unknown layer {name!r} (choose from {', '.join(randstack.LAYERS)})")
        try:
            self.env.validate()
        except toyenv.InvalidParamsError as exc:
            raise ConfigError(f"env: {exc}") from None
        self.randomization.validate()
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.calibration.validate()
        self.eval.validate()
        self.randcheck.validate()
        self.vision.validate()
        return self

    def effective_spec(self) -> RandomizationSpec:
        """The randomization spec with ``disable_layers`` applied."""
        spec = copy.deepcopy(self.randomization)
        for name in self.disable_layers:
            spec.layer(name).enabled = False
        return spec

    def train_config(self) -> TrainConfig:
        cfg = copy.deepcopy(self.train)
        cfg.seed = self.seed
        return cfg


# dict conversion ------------------------------------------------------------

def _schema_fields(cls):
    skip = _SKIP.get(cls, set())
    return [f for f in dataclasses.fields(cls) if f.name not in skip]


def to_dict(obj) -> Any:
    """Plain YAML-safe structure with every default materialized."""
    if isinstance(obj, Distribution):
        return {"kind": obj.kind, "a": float(obj.a), "b": float(obj.b)}
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in _schema_fields(type(obj))}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):  # YAML 1.1 reads "3e-4" as a string
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        (item,) = typing.get_args(tp)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        _, item = typing.get_args(tp)
        return {str(k): _coerce(v, item, f"{path}.{k}") for k, v in value.items()}
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    raise ConfigError(f"{path}: unsupported field type {tp!r}")


def _env_params(data, path: str) -> toyenv.EnvParams:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    base = toyenv.EnvParams()
    for key, value in data.items():
        if not hasattr(base, key):
            raise ConfigError(f"{path}.{key}: unknown key")
        default = np.asarray(getattr(base, key))
        try:
            arr = np.asarray(value, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}.{key}: expected a number or list of numbers") from None
        if arr.shape != default.shape:
            if arr.ndim == 0:
                arr = np.full(default.shape, float(arr))
            else:
                raise ConfigError(f"{path}.{key}: expected shape {default.shape}, got {arr.shape}")
        setattr(base, key, arr)
    return base


def from_dict(cls, data, path: str = ""):
    if cls is toyenv.EnvParams:
        return _env_params(data, path or "env")
    if cls is Distribution:
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping with kind/a/b")
        extra = set(data) - {"kind", "a", "b"}
        if extra:
            raise ConfigError(f"{path}.{sorted(extra)[0]}: unknown key")
        if "kind" not in data or "a" not in data:
            raise ConfigError(f"{path}: distribution needs 'kind' and 'a'")
        return Distribution(_coerce(data["kind"], str, f"{path}.kind"), _coerce(data["a"], float, f"{path}.a"),
                            _coerce(data.get("b", 0.0), float, f"{path}.b"))
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in _schema_fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{_join(path, key)}: unknown key")
    kwargs = {name: _coerce(data[name], hints[name], _join(path, name)) for name in names if name in data}
    return cls(**kwargs)


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


# loading with provenance ----------------------------------------------------

def _leaves(d, prefix=""):
    if isinstance(d, dict) and d:
        for k, v in d.items():
            yield from _leaves(v, _join(prefix, str(k)))
    else:
        yield prefix, d


def _merge(base: dict, update: Mapping, prov: dict, source: str, prefix: str = "") -> None:
    for key, value in update.items():
        path = _join(prefix, str(key))
        if not isinstance(base, dict) or key not in base:
            raise ConfigError(f"{path}: unknown key")
        replace = path == "randomization.physics.params" or not isinstance(value, dict) \
            or not isinstance(base[key], dict)
        if replace:
            for old, _ in list(_leaves(base[key], path)):
                prov.pop(old, None)
            base[key] = copy.deepcopy(value)
            for leaf, _ in _leaves(value, path):
                prov[leaf] = source
        else:
            _merge(base[key], value, prov, source, path)


def set_path(tree: dict, dotted: str, value, prov: dict, source: str) -> None:
    *parents, last = dotted.split(".")
    update: dict = {last: value}
    for p in reversed(parents):
        update = {p: update}
    _merge(tree, update, prov, source)


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None,
                environ: Mapping[str, str] | None = None) -> tuple[RunConfig, dict[str, str]]:
    """Resolve defaults <- file <- DEXRAND_OUT <- overrides; returns ``(config, provenance)``.

    ``overrides`` maps dotted key paths to values and a flag name for the
    provenance tag: ``{"seed": (7, "--seed")}``.
    """
    environ = os.environ if environ is None else environ
    tree = to_dict(RunConfig())
    prov = {leaf: "default" for leaf, _ in _leaves(tree)}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: not valid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        data = dict(data)
        data.pop(PROVENANCE_KEY, None)
        _merge(tree, data, prov, f"file:{p}")
    if environ.get(OUT_ENV):
        set_path(tree, "out_dir", environ[OUT_ENV], prov, f"env:{OUT_ENV}")
    for dotted, (value, flag) in (overrides or {}).items():
        set_path(tree, dotted, value, prov, f"override:{flag}")
    cfg = from_dict(RunConfig, tree)
    return cfg.validate(), prov


def snapshot(cfg: RunConfig, provenance: Mapping[str, str]) -> dict:
    out = to_dict(cfg)
    out[PROVENANCE_KEY] = dict(sorted(provenance.items()))
    return out


def write_snapshot(path, cfg: RunConfig, provenance: Mapping[str, str]) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(snapshot(cfg, provenance), fh, sort_keys=False)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
