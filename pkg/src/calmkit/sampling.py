"""Credible-sample selection from unlabeled pools.

Each unlabeled input is scored by the Shannon entropy of the fine-tuned
model's prediction and tagged with its argmax pseudo-label. Selection either
takes the globally lowest-entropy fraction (ems) or the lowest-entropy
fraction per pseudo-class (cb_ems). Pseudo-labels are frozen at selection
time: merging code only ever reads them, never recomputes them.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .nn import ContractError, ModelSpec, ParamVector, forward, prediction_entropy


@dataclass(frozen=True)
class ScoredSample:
    """One unlabeled pool entry: pool index, prediction entropy, pseudo-label."""

    index: int
    entropy: float
    pseudo_label: int


@dataclass(frozen=True)
class CredibleSet:
    """Selected pool samples with their frozen pseudo-labels for one task."""

    task_id: int
    samples: tuple[ScoredSample, ...]
    rate: float
    mode: str
    inputs: np.ndarray

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[0] != len(self.samples):
            raise ContractError("credible inputs must hold one row per selected sample")
        inputs.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        for name, dtype in (("indices", np.int64), ("pseudo_labels", np.int64), ("entropies", np.float64)):
            field = {"indices": "index", "pseudo_labels": "pseudo_label", "entropies": "entropy"}[name]
            arr = np.array([getattr(s, field) for s in self.samples], dtype=dtype)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.samples)


def score_pool(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> list[ScoredSample]:
    """Entropy and argmax pseudo-label per pool sample; argmax ties go to the lowest class."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ContractError("unlabeled pool must be a nonempty 2-D matrix")
    logits = forward(spec, params, inputs)
    entropies = prediction_entropy(logits)
    labels = np.argmax(logits, axis=1)
    return [
        ScoredSample(index=i, entropy=float(entropies[i]), pseudo_label=int(labels[i]))
        for i in range(inputs.shape[0])
    ]


def _bottom_k(samples: list[ScoredSample], k: int) -> list[ScoredSample]:
    # entropy ties broken by lower pool index
    return sorted(samples, key=lambda s: (s.entropy, s.index))[:k]


def _build(task_id: int, chosen: list[ScoredSample], rate: float, mode: str,
           pool_inputs: np.ndarray) -> CredibleSet:
    chosen = sorted(chosen, key=lambda s: s.index)
    rows = pool_inputs[np.array([s.index for s in chosen], dtype=np.int64)]
    return CredibleSet(task_id=task_id, samples=tuple(chosen), rate=rate, mode=mode, inputs=rows)


def select_ems(scored: list[ScoredSample], rate: float, pool_inputs: np.ndarray,
               task_id: int = 0) -> CredibleSet:
    """The floor(rate * N) lowest-entropy samples of the whole pool."""
    if not 0.0 < rate <= 1.0:
        raise ContractError(f"rate must be in (0, 1], got {rate}")
    k = math.floor(rate * len(scored))
    if k == 0:
        raise ContractError(
            f"rate {rate} selects zero of {len(scored)} samples; increase the sampling rate"
        )
    return _build(task_id, _bottom_k(list(scored), k), rate, "ems", pool_inputs)


def select_cb_ems(scored: list[ScoredSample], rate: float, pool_inputs: np.ndarray,
                  num_classes: int, task_id: int = 0,
                  group_labels: np.ndarray | None = None) -> CredibleSet:
    """Per class, the floor(rate * pool_c) lowest-entropy samples; union over classes.

    Grouping uses pseudo-labels. `group_labels` optionally regroups by another
    label vector (audit labels) for comparison experiments only; the stored
    pseudo-labels are unaffected.
    """
    if not 0.0 < rate <= 1.0:
        raise ContractError(f"rate must be in (0, 1], got {rate}")
    if group_labels is not None:
        group_labels = np.asarray(group_labels, dtype=np.int64)
    chosen: list[ScoredSample] = []
    for c in range(num_classes):
        if group_labels is None:
            pool_c = [s for s in scored if s.pseudo_label == c]
        else:
            pool_c = [s for s in scored if group_labels[s.index] == c]
        if not pool_c:
            warnings.warn(f"class {c} has an empty pool; skipped", stacklevel=2)
            continue
        k = math.floor(rate * len(pool_c))
        chosen.extend(_bottom_k(pool_c, k))
    if not chosen:
        raise ContractError(
            f"rate {rate} selects zero samples across all classes; increase the sampling rate"
        )
    return _build(task_id, chosen, rate, "cb_ems", pool_inputs)


def audit_accuracy(credible: CredibleSet, true_labels: np.ndarray) -> float:
    """Fraction of pseudo-labels matching the withheld pool labels. Report-only."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    return float(np.mean(credible.pseudo_labels == true_labels[credible.indices]))


def class_entropy_stats(scored: list[ScoredSample]) -> dict[int, tuple[float, float, float, float, float]]:
    """Five-number entropy summary (min, Q1, median, Q3, max) per pseudo-class."""
    stats: dict[int, tuple[float, float, float, float, float]] = {}
    for c in sorted({s.pseudo_label for s in scored}):
        ent = np.array([s.entropy for s in scored if s.pseudo_label == c])
        q = np.percentile(ent, [0.0, 25.0, 50.0, 75.0, 100.0])
        stats[c] = tuple(float(v) for v in q)
    return stats
