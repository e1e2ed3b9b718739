"""Experiment configuration: dataclasses plus validation from a JSON document.

JSON keys mirror the field names below.  Unknown keys are rejected so that
typos surface as config errors instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, InputError
from .inference import HmcSettings, HyperPrior
from .kernels import KernelFamily


class ZMode(str, enum.Enum):
    UPPER = "upper"  # safe when z < z_bar
    LOWER = "lower"  # safe when z > z_bar


class Pipeline(str, enum.Enum):
    AL_MOGP = "AL_MOGP"
    RS_MOGP = "RS_MOGP"
    AL_INDGPS = "AL_indGPs"
    AL_MOGP_NOSAFE = "AL_MOGP_nosafe"


class ObservationMode(str, enum.Enum):
    POO = "POO"
    FOO = "FOO"


class InferenceMethod(str, enum.Enum):
    TYPE2 = "type2"
    HMC = "hmc"
    FIXED = "fixed"


@dataclass(frozen=True)
class SafetySpec:
    """Threshold rule.  ``z_bar=None`` defers threshold and mode to the dataset."""
    z_bar: float = None
    z_mode: ZMode = ZMode.LOWER
    delta: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "z_mode", ZMode(self.z_mode))
        if not 0.0 < self.delta <= 1.0:
            raise InputError(f"delta must lie in (0, 1], got {self.delta}")


@dataclass(frozen=True)
class InferenceSpec:
    method: InferenceMethod = InferenceMethod.HMC
    hmc: HmcSettings = field(default_factory=HmcSettings)
    restarts: int = 5
    warm_start: bool = True
    # "previous": start each chain at the last state of the previous chain;
    # "type2": start at a type-II estimate refined from the previous state
    hmc_init: str = "previous"
    kernel: KernelFamily = KernelFamily.MATERN52
    latent_count: int = None
    # used by method == "fixed": unconstrained vectors for the main and safety models
    fixed_theta: tuple = None
    fixed_safety_theta: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "method", InferenceMethod(self.method))
        object.__setattr__(self, "kernel", KernelFamily(self.kernel))
        if self.restarts < 1:
            raise InputError("restarts must be >= 1")
        if self.hmc_init not in ("previous", "type2"):
            raise InputError(f"hmc_init must be 'previous' or 'type2', got {self.hmc_init!r}")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "sin_sigmoid"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sin_sigmoid", "mogp_samples", "csv"):
            raise InputError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    pipeline: tuple = (Pipeline.AL_MOGP,)
    observation_mode: ObservationMode = ObservationMode.POO
    safety: SafetySpec = field(default_factory=SafetySpec)
    inference: InferenceSpec = field(default_factory=InferenceSpec)
    priors: HyperPrior = field(default_factory=HyperPrior)
    iter_num: int = 30
    repeats: int = 1
    seed: int = 0
    n_init: int = 12
    output_dir: str = "runs"

    def __post_init__(self):
        pipes = self.pipeline
        if isinstance(pipes, (str, Pipeline)):
            pipes = (pipes,)
        try:
            object.__setattr__(self, "pipeline", tuple(Pipeline(p) for p in pipes))
        except ValueError as exc:
            raise ConfigError("pipeline", str(exc)) from None
        try:
            object.__setattr__(self, "observation_mode", ObservationMode(self.observation_mode))
        except ValueError as exc:
            raise ConfigError("observation_mode", str(exc)) from None
        if not self.pipeline:
            raise ConfigError("pipeline", "at least one pipeline is required")
        if self.iter_num < 0:
            raise ConfigError("iter_num", "must be >= 0")
        if self.repeats < 1:
            raise ConfigError("repeats", "must be >= 1")
        if self.n_init < 1:
            raise ConfigError("n_init", "must be >= 1")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")

    def to_dict(self):
        return _to_jsonable(dataclasses.asdict(self))


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        nested = _NESTED.get((cls, key))
        if nested is not None:
            value = _build(nested, value, sub)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (InputError, ValueError, TypeError) as exc:
        msg = str(exc)
        # validation messages lead with the offending field name
        field_name = next((n for n in sorted(names, key=len, reverse=True) if msg.startswith(n)), None)
        where = ".".join(x for x in (path, field_name) if x) or cls.__name__
        raise ConfigError(where, msg) from exc


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetSpec,
    (ExperimentConfig, "safety"): SafetySpec,
    (ExperimentConfig, "inference"): InferenceSpec,
    (ExperimentConfig, "priors"): HyperPrior,
    (InferenceSpec, "hmc"): HmcSettings,
}


def config_from_dict(data) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    return config_from_dict(data)
