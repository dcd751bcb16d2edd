"""Experiment configuration: TOML file <-> nested dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import tomli
import tomli_w

from .mpc import MpcConfig
from .narx import ModelError, RegressorSpec
from .plant import PlantError, PlantParams, steady_state
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class SamplingConfig:
    ts: float = 0.2
    substep: float = 0.01

    def __post_init__(self):
        if not (self.ts > 0 and self.substep > 0):
            raise ValueError("ts and substep must be positive")


@dataclass(frozen=True)
class ExcitationConfig:
    kind: str = "aprbs"
    n: int = 3000
    u_min: float = 0.0
    u_max: float = 0.3
    hold_min: int = 5
    hold_max: int = 20
    train_fraction: float = 0.7
    noise_std: float = 0.0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class NarxConfig:
    ny: int = 2
    nu: int = 2
    delay: int = 1
    hidden: int = 7

    @property
    def spec(self) -> RegressorSpec:
        return RegressorSpec(self.ny, self.nu, self.delay)


@dataclass(frozen=True)
class TrainSettings:
    """``TrainConfig`` minus the seed, which comes from the experiment seed."""

    max_iterations: int = 500
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e10
    tol_gradient: float = 1e-9
    tol_loss: float = 1e-12
    init_range: float = 0.5

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **dataclasses.asdict(self))


DEFAULT_REFERENCE = ((0, 12.147), (50, 13.0), (150, 11.5))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    duration: int = 250
    operating_flow: float = 0.1
    reference_preview: bool = False
    reference: tuple[tuple[int, float], ...] = DEFAULT_REFERENCE
    plant: PlantParams = field(default_factory=PlantParams)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)
    narx: NarxConfig = field(default_factory=NarxConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    mpc: MpcConfig = field(default_factory=MpcConfig)

    @property
    def train_config(self) -> TrainConfig:
        return self.train.to_train_config(self.seed)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["reference"] = [[int(s), float(v)] for s, v in self.reference]
        return {"schema_version": SCHEMA_VERSION, **d}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


_SECTIONS = {
    "plant": PlantParams,
    "sampling": SamplingConfig,
    "excitation": ExcitationConfig,
    "narx": NarxConfig,
    "train": TrainSettings,
    "mpc": MpcConfig,
}
_TOP_LEVEL = {"seed": int, "duration": int, "operating_flow": float, "reference_preview": bool}


def _coerce(value, kind, key: str):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise ConfigError(key, "unsupported field type")


def _field_kind(f: dataclasses.Field):
    return {"int": int, "float": float, "bool": bool, "str": str}.get(str(f.type), float)


def _build_section(name: str, cls, table) -> Any:
    if not isinstance(table, dict):
        raise ConfigError(name, "expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        path = f"{name}.{key}"
        if key not in fields:
            raise ConfigError(path, "unknown key")
        kwargs[key] = _coerce(value, _field_kind(fields[key]), path)
    try:
        return cls(**kwargs)
    except (ValueError, PlantError, ModelError) as exc:
        raise ConfigError(name, str(exc)) from exc


def _reference(value) -> tuple[tuple[int, float], ...]:
    if not isinstance(value, list) or not value:
        raise ConfigError("reference", "expected a non-empty list of [start, level] pairs")
    out = []
    for i, item in enumerate(value):
        path = f"reference[{i}]"
        if not isinstance(item, list) or len(item) != 2:
            raise ConfigError(path, "expected a [start, level] pair")
        out.append((_coerce(item[0], int, path + "[0]"), _coerce(item[1], float, path + "[1]")))
    return tuple(out)


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build and validate a config from a parsed TOML tree; missing keys take defaults."""
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported schema version {version!r}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key == "schema_version":
            continue
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        elif key in _TOP_LEVEL:
            kwargs[key] = _coerce(value, _TOP_LEVEL[key], key)
        elif key == "reference":
            kwargs[key] = _reference(value)
        else:
            raise ConfigError(key, "unknown key")
    cfg = ExperimentConfig(**kwargs)
    check_config(cfg)
    return cfg


def reachable_range(params: PlantParams, u_min: float, u_max: float, n: int = 401) -> tuple[float, float]:
    """Min and max equilibrium concentration over a grid of admissible flows."""
    flows = np.linspace(max(u_min, 0.0), u_max, n)
    cbs = [steady_state(float(w), params).cb for w in flows if w + params.w2_fixed > 0]
    return float(min(cbs)), float(max(cbs))


def check_config(cfg: ExperimentConfig) -> None:
    """Cross-section invariants that single sections cannot check."""
    if cfg.duration < 1:
        raise ConfigError("duration", "must be >= 1")
    if cfg.operating_flow < 0:
        raise ConfigError("operating_flow", "must be non-negative")
    if not cfg.mpc.u_min <= cfg.operating_flow <= cfg.mpc.u_max:
        raise ConfigError("operating_flow", "must lie within the controller input bounds")
    try:
        cfg.mpc.check_delay(cfg.narx.delay)
    except ValueError as exc:
        raise ConfigError("mpc.nu", str(exc)) from exc
    try:
        cfg.narx.spec
    except ModelError as exc:
        raise ConfigError("narx", str(exc)) from exc
    if cfg.mpc.u_min < 0:
        raise ConfigError("mpc.u_min", "flows cannot be negative")
    starts = [s for s, _ in cfg.reference]
    if starts[0] != 0:
        raise ConfigError("reference[0][0]", "reference profile must start at sample 0")
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise ConfigError("reference", "start samples must be strictly increasing")
    lo, hi = reachable_range(cfg.plant, cfg.mpc.u_min, cfg.mpc.u_max)
    for i, (_, level) in enumerate(cfg.reference):
        if not lo <= level <= hi:
            raise ConfigError(
                f"reference[{i}][1]", f"level {level} outside reachable range [{lo:.4g}, {hi:.4g}]"
            )


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"invalid TOML: {exc}") from exc
    return config_from_dict(data)


def load(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        text = fh.read().decode()
    return loads(text)


def reference_at(profile, k: int) -> float:
    """Level of a piecewise-constant profile at sample ``k``."""
    level = profile[0][1]
    for start, value in profile:
        if k >= start:
            level = value
        else:
            break
    return float(level)
