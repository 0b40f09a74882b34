"""Evaluation and report emission.

Reports come out twice: comma-separated files (plot-ready) and an aligned
text summary. Every number is a pure function of persisted artifacts and all
writers format floats with repr(), so identical runs produce byte-identical
report files.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..calm import BinaryMask
from ..nn import ContractError, ModelSpec, ParamVector
from ..tasks import TaskData, accuracy


def evaluate(spec: ModelSpec, theta: ParamVector, tasks: Sequence[TaskData]) -> tuple[np.ndarray, float]:
    """Held-out accuracy per task and the unweighted mean."""
    if not tasks:
        raise ContractError("no test sets supplied")
    for task in tasks:
        if task.test is None or task.test.labels is None:
            raise ContractError(f"task {task.task_id} has no labeled test set")
    per_task = np.array([accuracy(spec, theta, task.test) for task in tasks])
    return per_task, float(per_task.mean())


def layer_density(mask: BinaryMask, layer_offsets: Sequence[tuple[int, int]]) -> list[float]:
    """Fraction of ones per layer span; spans must partition the mask."""
    pos = 0
    out = []
    for start, length in layer_offsets:
        if start != pos:
            raise ContractError("layer_offsets must partition the mask without gaps")
        out.append(float(np.mean(mask.m[start : start + length])))
        pos += length
    if pos != mask.m.size:
        raise ContractError(f"layer_offsets cover {pos} of {mask.m.size} mask entries")
    return out


def magnitude_overlap(mask: BinaryMask, tau: np.ndarray,
                      k_percents: Sequence[float] = (1.0, 5.0, 10.0, 20.0, 50.0)) -> list[tuple[float, float]]:
    """For each k, the fraction of active mask coordinates ranked in the top k%
    of |tau| magnitude across all coordinates."""
    tau = np.asarray(tau, dtype=np.float64)
    if tau.shape != mask.m.shape:
        raise ContractError("mask and task vector lengths differ")
    n = tau.size
    order = np.argsort(-np.abs(tau), kind="stable")
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    active = mask.m == 1.0
    results = []
    for k in k_percents:
        top = max(1, math.ceil(k / 100.0 * n))
        if not np.any(active):
            results.append((float(k), 0.0))
            continue
        results.append((float(k), float(np.mean(rank[active] < top))))
    return results


@dataclass
class ReportBundle:
    """Per-method accuracy table plus optional mask diagnostics."""

    method: str
    task_ids: tuple[int, ...]
    per_task_accuracy: np.ndarray
    average_accuracy: float
    layer_densities: dict[str, list[float]] = field(default_factory=dict)
    density_traces: dict[str, np.ndarray] = field(default_factory=dict)
    objective_traces: dict[str, np.ndarray] = field(default_factory=dict)
    magnitude_overlaps: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    extras: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if np.any((self.per_task_accuracy < 0.0) | (self.per_task_accuracy > 1.0)):
            raise ContractError("accuracies must lie in [0, 1]")
        if abs(self.average_accuracy - float(np.mean(self.per_task_accuracy))) > 1e-12:
            raise ContractError("average accuracy must equal the mean of per-task entries")


def _csv_lines(rows: list[list]) -> str:
    out = []
    for row in rows:
        out.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(out) + "\n"


def write_report(bundle: ReportBundle, directory: Path) -> list[Path]:
    """Emit report.csv, report.txt, and one CSV per requested diagnostic."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    rows: list[list] = [["task", "accuracy"]]
    rows += [[t, float(a)] for t, a in zip(bundle.task_ids, bundle.per_task_accuracy)]
    rows.append(["average", float(bundle.average_accuracy)])
    path = directory / "report.csv"
    path.write_text(_csv_lines(rows))
    written.append(path)

    lines = [f"method: {bundle.method}"]
    for t, a in zip(bundle.task_ids, bundle.per_task_accuracy):
        lines.append(f"  task {t:>2d}: {a:.4f}")
    lines.append(f"  average: {bundle.average_accuracy:.4f}")
    for key, value in sorted(bundle.extras.items()):
        lines.append(f"  {key}: {value:.4f}")
    path = directory / "report.txt"
    path.write_text("\n".join(lines) + "\n")
    written.append(path)

    if bundle.layer_densities:
        rows = [["step", "layer", "density"]]
        for step, densities in bundle.layer_densities.items():
            rows += [[step, i, float(v)] for i, v in enumerate(densities)]
        path = directory / "layer_density.csv"
        path.write_text(_csv_lines(rows))
        written.append(path)

    for name, traces in (("density_trace", bundle.density_traces),
                         ("objective_trace", bundle.objective_traces)):
        if traces:
            rows = [["step", "iteration", "value"]]
            for step, trace in traces.items():
                rows += [[step, i, float(v)] for i, v in enumerate(trace)]
            path = directory / f"{name}.csv"
            path.write_text(_csv_lines(rows))
            written.append(path)

    if bundle.magnitude_overlaps:
        rows = [["step", "top_percent", "proportion"]]
        for step, pairs in bundle.magnitude_overlaps.items():
            rows += [[step, float(k), float(p)] for k, p in pairs]
        path = directory / "magnitude_overlap.csv"
        path.write_text(_csv_lines(rows))
        written.append(path)

    return written
