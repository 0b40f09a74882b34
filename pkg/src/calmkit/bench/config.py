"""Structured key-value experiment configs.

A config is a plain text document of `key = value` lines with `#` comments.
Keys are dotted paths into the sections below; unknown keys are rejected with
the list of valid ones. Every key has a documented default, so the empty
document is a complete default experiment.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from ..calm import MergePlan, STRATEGIES
from ..nn import ACTIVATIONS, ContractError
from ..tasks import TaskFamily, TrainConfig

METHODS = ("avg", "ta", "ties", "calm")
SAMPLING_MODES = ("ems", "cb_ems")
MASK_OBJECTIVES = ("pseudo", "supervised", "entropy")
REPORT_TOKENS = ("accuracy", "layer_density", "density_trace", "objective_trace",
                 "magnitude_overlap")
SUITES = ("sampling_rate", "strategy", "order", "reg_coef", "lr", "components")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class SamplingConfig:
    mode: str = "cb_ems"
    rate: float = 0.9
    objective: str = "pseudo"

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise ConfigError(f"sampling.mode must be one of {SAMPLING_MODES}")
        if not 0.0 < self.rate <= 1.0:
            raise ConfigError(f"sampling.rate must lie in (0, 1], got {self.rate}")
        if self.objective not in MASK_OBJECTIVES:
            raise ConfigError(f"sampling.objective must be one of {MASK_OBJECTIVES}")


@dataclass(frozen=True)
class PlanConfig:
    """MergePlan hyperparameters; the task split itself is drawn at run time."""

    num_sequential: int = 2
    lambda_efficient: float = 0.3
    l1_weight: float = 1.0
    iterations_per_task: int = 100
    batches_per_task: int = 2
    batch_size: int = 128
    mask_lr: float = 500.0
    init_active_fraction: float = 1e-5
    strategy: str = "both"
    reinit_mask_per_task: bool = True

    def __post_init__(self):
        if self.num_sequential < 0:
            raise ConfigError("plan.num_sequential must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"plan.strategy must be one of {STRATEGIES}")


@dataclass(frozen=True)
class TiesSettings:
    trim_fraction: float = 0.2
    scale: float = 0.3


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    method: str = "calm"
    report: tuple[str, ...] = ("accuracy",)
    family: TaskFamily = field(default_factory=TaskFamily)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    ties: TiesSettings = field(default_factory=TiesSettings)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        for token in self.report:
            if token not in REPORT_TOKENS:
                raise ConfigError(f"unknown report token {token!r}; valid: {REPORT_TOKENS}")
        if self.family.num_tasks < 2:
            raise ConfigError("family.num_tasks must be >= 2 for merging experiments")
        if self.plan.num_sequential > self.family.num_tasks:
            raise ConfigError("plan.num_sequential cannot exceed family.num_tasks")

    def merge_plan_overrides(self) -> dict[str, Any]:
        keys = ("lambda_efficient", "l1_weight", "iterations_per_task", "batches_per_task",
                "batch_size", "mask_lr", "init_active_fraction", "strategy",
                "reinit_mask_per_task")
        return {k: getattr(self.plan, k) for k in keys}


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _str_tuple(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


# key -> (section, field, parser); section None targets ExperimentConfig itself
_KEYS: dict[str, tuple[str | None, str, Any]] = {
    "seed": (None, "seed", int),
    "method": (None, "method", str),
    "report": (None, "report", _str_tuple),
    "family.num_tasks": ("family", "num_tasks", int),
    "family.classes_per_task": ("family", "classes_per_task", int),
    "family.input_dim": ("family", "input_dim", int),
    "family.cluster_sep": ("family", "cluster_sep", float),
    "family.task_offset": ("family", "task_offset", float),
    "family.noise_sigma": ("family", "noise_sigma", float),
    "family.frame_align": ("family", "frame_align", float),
    "family.train_per_task": ("family", "train_per_task", int),
    "family.unlabeled_per_task": ("family", "unlabeled_per_task", int),
    "family.test_per_task": ("family", "test_per_task", int),
    "train.hidden_dims": ("train", "hidden_dims", _int_tuple),
    "train.activation": ("train", "activation", str),
    "train.pretrain_epochs": ("train", "pretrain_epochs", int),
    "train.pretrain_lr": ("train", "pretrain_lr", float),
    "train.finetune_epochs": ("train", "finetune_epochs", int),
    "train.finetune_lr": ("train", "finetune_lr", float),
    "train.batch_size": ("train", "batch_size", int),
    "train.head_mode": ("train", "head_mode", str),
    "train.accuracy_floor": ("train", "accuracy_floor", float),
    "sampling.mode": ("sampling", "mode", str),
    "sampling.rate": ("sampling", "rate", float),
    "sampling.objective": ("sampling", "objective", str),
    "plan.num_sequential": ("plan", "num_sequential", int),
    "plan.lambda_efficient": ("plan", "lambda_efficient", float),
    "plan.l1_weight": ("plan", "l1_weight", float),
    "plan.iterations_per_task": ("plan", "iterations_per_task", int),
    "plan.batches_per_task": ("plan", "batches_per_task", int),
    "plan.batch_size": ("plan", "batch_size", int),
    "plan.mask_lr": ("plan", "mask_lr", float),
    "plan.init_active_fraction": ("plan", "init_active_fraction", float),
    "plan.strategy": ("plan", "strategy", str),
    "plan.reinit_mask_per_task": ("plan", "reinit_mask_per_task", _bool),
    "ties.trim_fraction": ("ties", "trim_fraction", float),
    "ties.scale": ("ties", "scale", float),
}

CONFIG_KEYS = tuple(_KEYS)


def parse_entries(text: str) -> dict[str, str]:
    """Raw `key = value` pairs from a config document."""
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(
                f"line {lineno}: unknown key {key!r}; valid keys: {', '.join(CONFIG_KEYS)}"
            )
        entries[key] = value
    return entries


def build_config(entries: dict[str, str]) -> ExperimentConfig:
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {"family": {}, "train": {}, "sampling": {},
                                           "plan": {}, "ties": {}}
    for key, raw in entries.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(CONFIG_KEYS)}")
        section, name, parser = _KEYS[key]
        try:
            value = parser(raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: cannot parse {raw!r} ({exc})") from exc
        if section is None:
            top[name] = value
        else:
            sections[section][name] = value
    seed = top.get("seed", 0)
    sections["family"].setdefault("seed", seed)
    try:
        return ExperimentConfig(
            seed=seed,
            method=top.get("method", "calm"),
            report=top.get("report", ("accuracy",)),
            family=TaskFamily(**sections["family"]),
            train=TrainConfig(**sections["train"]),
            sampling=SamplingConfig(**sections["sampling"]),
            plan=PlanConfig(**sections["plan"]),
            ties=TiesSettings(**sections["ties"]),
        )
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str) -> ExperimentConfig:
    return build_config(parse_entries(text))


def apply_overrides(config: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    """Re-resolve a config with extra `key = value` pairs on top."""
    merged = dict(config_entries(config))
    merged.update(overrides)
    return build_config(merged)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_entries(config: ExperimentConfig) -> dict[str, str]:
    entries: dict[str, str] = {}
    for key, (section, name, _) in _KEYS.items():
        holder = config if section is None else getattr(config, section)
        entries[key] = _format_value(getattr(holder, name))
    return entries


def config_text(config: ExperimentConfig) -> str:
    """Deterministic textual form of a fully resolved config."""
    lines = [f"{key} = {value}" for key, value in config_entries(config).items()]
    return "\n".join(lines) + "\n"


def default_config_text() -> str:
    return config_text(ExperimentConfig())


def plan_for(config: ExperimentConfig) -> MergePlan:
    """The seeded merge plan this config describes."""
    from ..calm import partition, plan_with

    plan = partition(range(config.family.num_tasks), config.plan.num_sequential,
                     seed=config.seed)
    return plan_with(plan, **config.merge_plan_overrides())


def with_entries(config: ExperimentConfig, **pairs: str) -> ExperimentConfig:
    return apply_overrides(config, {k: v for k, v in pairs.items()})
