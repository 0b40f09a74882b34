"""Reference merging rules: weight averaging, task arithmetic, ties-merging.

All three are deterministic elementwise reductions over flat parameter
vectors. Sums always run in list-index order (numpy pairwise reduction over a
stacked axis), so repeated calls are bit-reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import ContractError, ParamVector


@dataclass(frozen=True)
class TaskVector:
    """Difference between a fine-tuned and the pretrained parameter vector."""

    values: np.ndarray
    task_id: int | str = ""

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ContractError(f"task vector must be 1-D, got shape {values.shape}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class TiesConfig:
    trim_fraction: float = 0.2
    scale: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.trim_fraction <= 1.0:
            raise ContractError(f"trim_fraction must be in (0, 1], got {self.trim_fraction}")
        if self.scale <= 0.0:
            raise ContractError(f"scale must be positive, got {self.scale}")


def ordered_sum(arrays) -> np.ndarray:
    """Sum of equal-length vectors with the reduction order fixed by index."""
    stacked = np.stack([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
    return np.sum(stacked, axis=0)


def task_vector(theta_ft: ParamVector, theta_pre: ParamVector, task_id: int | str = "") -> TaskVector:
    """theta_ft - theta_pre, elementwise."""
    if theta_ft.spec_hash != theta_pre.spec_hash:
        raise ContractError("fine-tuned and pretrained vectors are bound to different specs")
    return TaskVector(theta_ft.values - theta_pre.values, task_id=task_id)


def weight_average(models: list[ParamVector]) -> ParamVector:
    """Elementwise arithmetic mean of the given parameter vectors."""
    if not models:
        raise ContractError("weight_average needs at least one model")
    first = models[0]
    for m in models[1:]:
        if m.spec_hash != first.spec_hash:
            raise ContractError("all models must be bound to the same spec")
    mean = ordered_sum([m.values for m in models]) / len(models)
    return ParamVector(mean, first.spec_hash, first.layer_offsets)


def task_arithmetic(theta_pre: ParamVector, task_vectors: list[TaskVector],
                    scale: float = 0.3) -> ParamVector:
    """theta_pre + scale * sum(task vectors)."""
    if scale <= 0.0:
        raise ContractError(f"scale must be positive, got {scale}")
    for tv in task_vectors:
        if tv.size != theta_pre.size:
            raise ContractError(
                f"task vector {tv.task_id!r} has {tv.size} entries, expected {theta_pre.size}"
            )
    if not task_vectors:
        return ParamVector(theta_pre.values.copy(), theta_pre.spec_hash, theta_pre.layer_offsets)
    total = ordered_sum([tv.values for tv in task_vectors])
    return ParamVector(theta_pre.values + scale * total, theta_pre.spec_hash, theta_pre.layer_offsets)


def ties_trim(tv: TaskVector, trim_fraction: float) -> TaskVector:
    """Keep the ceil(trim_fraction * n) largest-magnitude entries, zero the rest.

    Magnitude ties at the cut are broken in favor of the lower index.
    """
    if not 0.0 < trim_fraction <= 1.0:
        raise ContractError(f"trim_fraction must be in (0, 1], got {trim_fraction}")
    n = tv.size
    k = min(n, math.ceil(trim_fraction * n))
    order = np.argsort(-np.abs(tv.values), kind="stable")
    trimmed = np.zeros(n)
    keep = order[:k]
    trimmed[keep] = tv.values[keep]
    return TaskVector(trimmed, task_id=tv.task_id)


def ties_elect_sign(task_vectors: list[TaskVector]) -> np.ndarray:
    """Per-coordinate sign carrying the larger total magnitude.

    Returns an int8 vector in {-1, 0, +1}: 0 only where every entry is zero,
    and +1 on an exact positive/negative mass tie.
    """
    if not task_vectors:
        raise ContractError("ties_elect_sign needs at least one task vector")
    pos = ordered_sum([np.maximum(tv.values, 0.0) for tv in task_vectors])
    neg = ordered_sum([np.maximum(-tv.values, 0.0) for tv in task_vectors])
    elected = np.where(pos >= neg, 1, -1).astype(np.int8)
    elected[(pos == 0.0) & (neg == 0.0)] = 0
    return elected


def ties_merge(theta_pre: ParamVector, task_vectors: list[TaskVector],
               config: TiesConfig = TiesConfig()) -> ParamVector:
    """Trim each task vector, elect a sign per coordinate, average the agreeing
    entries (disjoint merge), and add the scaled result to theta_pre."""
    if not task_vectors:
        raise ContractError("ties_merge needs at least one task vector")
    for tv in task_vectors:
        if tv.size != theta_pre.size:
            raise ContractError(
                f"task vector {tv.task_id!r} has {tv.size} entries, expected {theta_pre.size}"
            )
    trimmed = [ties_trim(tv, config.trim_fraction) for tv in task_vectors]
    elected = ties_elect_sign(trimmed)
    agree_sum = np.zeros(theta_pre.size)
    agree_count = np.zeros(theta_pre.size)
    for tv in trimmed:
        agrees = (np.sign(tv.values).astype(np.int8) == elected) & (elected != 0)
        agree_sum[agrees] += tv.values[agrees]
        agree_count[agrees] += 1.0
    merged = theta_pre.values.copy()
    touched = agree_count > 0
    merged[touched] += config.scale * (agree_sum[touched] / agree_count[touched])
    return ParamVector(merged, theta_pre.spec_hash, theta_pre.layer_offsets)
