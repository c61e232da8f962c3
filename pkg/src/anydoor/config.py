"""Strict experiment configuration.

A config is one JSON document. Unknown keys are rejected, every default is
materialized into the parsed object, and errors name the offending key path.
Perturbation budgets accept the short aliases ``eps``, ``p`` and ``b``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .attack import (
    DEFAULT_TARGET,
    DEFAULT_TRIGGER,
    AttackConfig,
    SsaConfig,
    TriggerSpec,
    TriggerTargetPair,
    WeightSchedule,
    default_step_size,
)
from .model.mllm import ModelConfig
from .perturbation import DEFAULT_BORDER_WIDTH, DEFAULT_EPSILON, DEFAULT_PATCH_WIDTH, PerturbationSpec
from .robustness import CorruptionSpec, default_corruptions

# top-level shorthands that belong to the perturbation section
_PERT_KEYS = ("strategy", "eps", "epsilon", "p", "patch_width", "b", "border_width")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key path at fault."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True, strict=False)


class DataSection(_Section):
    seed: int = 0
    n_train: int = Field(2000, ge=1)
    n_holdout: int = Field(200, ge=1)
    n_eval: int = Field(40, ge=1)


class ModelSection(_Section):
    seed: int = 0
    d_model: int = Field(64, ge=1)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(128, ge=1)
    epochs: int = Field(40, ge=0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(8, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    warmup_steps: int = Field(100, ge=0)
    clip_norm: float = Field(1.0, ge=0)
    optimizer: Literal["sgd", "adam"] = "adam"
    augment: bool = True

    def model_config_obj(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads, d_ff=self.d_ff)


class PerturbationSection(_Section):
    strategy: Literal["pixel", "corner", "border"] = "border"
    epsilon: Optional[float] = Field(None, alias="eps", gt=0, le=1)
    patch_width: Optional[int] = Field(None, alias="p", ge=1)
    border_width: Optional[int] = Field(None, alias="b", ge=1)

    @model_validator(mode="after")
    def _one_budget(self):
        spec = PerturbationSpec(self.strategy, self.epsilon, self.patch_width, self.border_width)
        object.__setattr__(self, spec.budget_field, spec.budget)
        return self

    def spec(self) -> PerturbationSpec:
        return PerturbationSpec(self.strategy, self.epsilon, self.patch_width, self.border_width)


class SsaSection(_Section):
    enabled: bool = False
    n: int = Field(20, ge=1)
    sigma: float = Field(16.0, ge=0)
    rho: float = Field(0.5, ge=0, lt=1)


class WeightsSection(_Section):
    kind: Literal["static", "dynamic_beta"] = "static"
    w1: float = Field(1.0, ge=0)
    w2: float = Field(1.0, ge=0)
    alpha: float = Field(0.5, gt=0)


class AttackSection(_Section):
    ensemble_size: int = Field(40, ge=1)
    iterations: int = Field(500, ge=0)
    step_size: Optional[float] = Field(None, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(8, ge=1)
    ssa: SsaSection = SsaSection()
    weights: WeightsSection = WeightsSection()
    seed: int = 0


class TriggerSection(_Section):
    trigger: str = DEFAULT_TRIGGER.decode()
    placement: Literal["prefix", "suffix", "random_word_boundary"] = "prefix"
    target: str = DEFAULT_TARGET.decode()

    @model_validator(mode="after")
    def _nonempty(self):
        if not self.trigger:
            raise ValueError("trigger must be non-empty")
        if not self.target:
            raise ValueError("target must be non-empty")
        return self

    def pair(self) -> TriggerTargetPair:
        return TriggerTargetPair(TriggerSpec(self.trigger.encode(), self.placement), self.target.encode())


class PoolSection(_Section):
    file: Optional[str] = None
    k_pairs: int = Field(5, ge=1)
    seed: int = 0


class RobustnessSection(_Section):
    corruptions: bool = True
    crop_fraction: float = Field(0.875, gt=0, le=1)
    scale: float = Field(0.5, gt=0, le=1)
    noise_sigma: float = Field(8.0, ge=0)
    seed: int = 0
    n_frames: int = Field(30, ge=0)
    frame_seed: int = 0
    frame_speed: int = Field(2, ge=0)

    def specs(self) -> list[CorruptionSpec]:
        return default_corruptions(self.crop_fraction, self.scale, self.noise_sigma)


class ExperimentConfig(_Section):
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    perturbation: PerturbationSection = PerturbationSection()
    attack: AttackSection = AttackSection()
    trigger: TriggerSection = TriggerSection()
    pool: PoolSection = PoolSection()
    robustness: RobustnessSection = RobustnessSection()
    n_previews: int = Field(4, ge=0)
    output_dir: str = "runs/default"

    @model_validator(mode="before")
    @classmethod
    def _hoist_shorthand(cls, data):
        if isinstance(data, dict) and any(k in data for k in _PERT_KEYS):
            data = dict(data)
            pert = dict(data.get("perturbation") or {})
            for k in _PERT_KEYS:
                if k in data:
                    if k in pert:
                        raise ValueError(f"{k} given both at top level and under perturbation")
                    pert[k] = data.pop(k)
            data["perturbation"] = pert
        return data

    @model_validator(mode="after")
    def _materialize(self):
        size = ModelConfig().image_size
        spec = self.perturbation.spec()
        try:
            spec.validate(size, size)
        except ValueError as e:
            raise ValueError(f"perturbation.{spec.budget_field}: {e}") from None
        if self.attack.step_size is None:
            attack = self.attack.model_copy(update={"step_size": default_step_size(spec.strategy)})
            object.__setattr__(self, "attack", attack)
        if self.attack.batch_size > self.attack.ensemble_size:
            raise ValueError(
                f"attack.batch_size: {self.attack.batch_size} exceeds attack.ensemble_size "
                f"{self.attack.ensemble_size}"
            )
        if self.model.d_model % self.model.n_heads:
            raise ValueError("model.n_heads: must divide model.d_model")
        return self

    # ------------------------------------------------------------ converters
    def attack_config(self) -> AttackConfig:
        a = self.attack
        return AttackConfig(
            iterations=a.iterations,
            step_size=a.step_size,
            momentum=a.momentum,
            batch_size=a.batch_size,
            ensemble_size=a.ensemble_size,
            ssa=SsaConfig(a.ssa.enabled, a.ssa.n, a.ssa.sigma, a.ssa.rho),
            weights=WeightSchedule(a.weights.kind, a.weights.w1, a.weights.w2, a.weights.alpha),
            seed=a.seed,
        )

    def index_ranges(self) -> dict:
        """Sample index ranges in the shared corpus; disjoint by construction."""
        d = self.data
        train = (0, d.n_train)
        holdout = (train[1], train[1] + d.n_holdout)
        evals = (holdout[1], holdout[1] + d.n_eval)
        ensemble = (evals[1], evals[1] + self.attack.ensemble_size)
        return {"train": train, "holdout": holdout, "eval": evals, "ensemble": ensemble}

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _path(loc) -> str:
    return ".".join(str(p) for p in loc)


def from_dict(data: dict) -> ExperimentConfig:
    """Validate ``data``; any problem becomes a ConfigError naming its key path."""
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        path = _path(err["loc"])
        msg = err["msg"]
        if not path and ": " in msg:
            # validators report their own key path in the message
            head, _, rest = msg.removeprefix("Value error, ").partition(": ")
            if "." in head and " " not in head:
                path, msg = head, rest
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        raise ConfigError(path, msg.removeprefix("Value error, ")) from None


def parse_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"{path}: invalid JSON ({e})") from None
    return from_dict(data)


def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides) -> dict:
    """Set dotted ``key=value`` (or ``(key, value)``) pairs into a nested dict copy."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        key, value = item if isinstance(item, tuple) else item.split("=", 1)
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            child = node.setdefault(p, {})
            if not isinstance(child, dict):
                raise ConfigError(key, f"{p} is not a section")
            node = child
        node[parts[-1]] = _coerce(value) if isinstance(value, str) else value
    return out


__all__ = [
    "ConfigError", "ExperimentConfig", "apply_overrides", "from_dict", "parse_config",
    "DEFAULT_BORDER_WIDTH", "DEFAULT_EPSILON", "DEFAULT_PATCH_WIDTH",
]
