"""JSON run configuration with dotted-path overrides.

Unknown keys are rejected at every nesting level. Precedence for the seed is
FLOWGUIDE_SEED env var > ``--seed`` flag > ``--set`` / config file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field

from .oracles import CheckerboardTask, ConditionalGaussianTask
from .samplers import SamplerConfig
from .trainer import TrainConfig

SEED_ENV = "FLOWGUIDE_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "gaussian"
    means: tuple[tuple[float, ...], ...] = ((3.0, 3.0), (3.0, -3.0), (-3.0, 3.0), (-3.0, -3.0))
    sigma: float = 0.5
    cond_dim: int = 8
    encoder_seed: int = 0
    # checkerboard only
    cells: int = 4
    extent: float = 4.0
    classes: int = 2

    def build(self):
        if self.kind == "gaussian":
            return ConditionalGaussianTask(self.means, self.sigma, self.cond_dim, self.encoder_seed)
        if self.kind == "checkerboard":
            return CheckerboardTask(self.cells, self.extent, self.classes, self.cond_dim, self.encoder_seed)
        raise ConfigError(f"unknown task kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return 2 if self.kind == "checkerboard" else len(self.means[0])


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    output_dir: str = "runs/default"
    # samples per condition for periodic and final evaluation
    eval_samples: int = 1000


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return build_dataclass(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    return value


def build_dataclass(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        where = path or "config"
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict; value is parsed as JSON when possible.

    Keys of the ``train`` section may omit the ``train.`` prefix.
    """
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if parts[0] not in data and isinstance(data.get("train"), dict) and parts[0] in data["train"]:
        # shorthand: guidance.w means train.guidance.w
        parts = ["train"] + parts
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"override {key!r}: unknown section {part!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"override {key!r}: unknown key {parts[-1]!r}")
    node[parts[-1]] = value


def load_run_config(path: str | None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    data = to_dict(RunConfig())
    if path:
        try:
            with open(path) as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _merge(data, user, "")
    for o in overrides:
        apply_override(data, o)
    if seed is not None:
        data["train"]["seed"] = seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            data["train"]["seed"] = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    cfg = build_dataclass(RunConfig, data)
    _check_consistency(cfg)
    return cfg


def _merge(base: dict, user: dict, path: str) -> None:
    for k, v in user.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, where)
        else:
            base[k] = v


def _check_consistency(cfg: RunConfig) -> None:
    if cfg.train.net.data_dim != cfg.task.dim:
        raise ConfigError(f"train.net.data_dim={cfg.train.net.data_dim} but the task is {cfg.task.dim}-D")
    if cfg.train.net.cond_dim != cfg.task.cond_dim:
        raise ConfigError("train.net.cond_dim must equal task.cond_dim")
    if cfg.eval_samples < 1:
        raise ConfigError("eval_samples must be >= 1")


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
