"""Consensus-aware sequential mask merging.

Tasks are split into a bulk set merged cheaply by task arithmetic and an
ordered remainder merged one at a time. Each sequential step learns a binary
mask deciding, per parameter coordinate, whether the incoming task vector or
the current merged vector survives. The mask is relaxed to sigmoid(r) during
optimization, trained against the summed cross-entropy of every visible
task's credible samples plus an L1 sparsity term, and rounded once at the
end, so the final update copies every coordinate verbatim from exactly one
source.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .baselines import TaskVector, ordered_sum, task_vector
from .nn import ContractError, ModelSpec, ParamVector, _backward, _forward_acts, bind, cross_entropy, softmax
from .sampling import CredibleSet
from .seeding import STAGE_MASK_BATCHES, STAGE_MASK_INIT, STAGE_PARTITION, rng_for
from .tasks import Checkpoints

STRATEGIES = ("both", "only_mask", "only_complement")
OBJECTIVES = ("cross_entropy", "entropy")

INIT_MAGNITUDE = 4.595  # sigmoid(+-4.595) ~= 0.99 / 0.01


@dataclass(frozen=True)
class MergePlan:
    """Task partition plus every hyperparameter of the sequential merge."""

    efficient_set: tuple[int, ...]
    sequential_set: tuple[int, ...]
    lambda_efficient: float = 0.3
    l1_weight: float = 1.0
    iterations_per_task: int = 100
    batches_per_task: int = 2
    batch_size: int = 128
    mask_lr: float = 500.0
    init_active_fraction: float = 1e-5
    strategy: str = "both"
    seed: int = 0
    reinit_mask_per_task: bool = True

    def __post_init__(self):
        object.__setattr__(self, "efficient_set", tuple(int(t) for t in self.efficient_set))
        object.__setattr__(self, "sequential_set", tuple(int(t) for t in self.sequential_set))
        overlap = set(self.efficient_set) & set(self.sequential_set)
        if overlap:
            raise ContractError(f"efficient and sequential sets overlap on {sorted(overlap)}")
        if self.lambda_efficient <= 0.0:
            raise ContractError("lambda_efficient must be positive")
        if self.l1_weight < 0.0:
            raise ContractError("l1_weight must be >= 0")
        if self.iterations_per_task < 1:
            raise ContractError("iterations_per_task must be >= 1")
        if self.batches_per_task < 1 or self.batch_size < 1:
            raise ContractError("batches_per_task and batch_size must be >= 1")
        if not 0.0 <= self.init_active_fraction < 1.0:
            raise ContractError("init_active_fraction must lie in [0, 1)")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


@dataclass(frozen=True)
class RealMask:
    """Trainable real vector r; the soft mask is sigmoid(r)."""

    r: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(self.r, dtype=np.float64)
        if r.ndim != 1 or not np.all(np.isfinite(r)):
            raise ContractError("real mask must be a finite 1-D vector")
        r.flags.writeable = False
        object.__setattr__(self, "r", r)


@dataclass(frozen=True)
class BinaryMask:
    """Hard mask with entries exactly 0.0 or 1.0."""

    m: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.m, dtype=np.float64)
        if m.ndim != 1 or not np.all((m == 0.0) | (m == 1.0)):
            raise ContractError("binary mask entries must be exactly 0 or 1")
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @property
    def density(self) -> float:
        return float(np.mean(self.m))


@dataclass(frozen=True)
class SequentialState:
    """Current merged task vector, the tasks visible to the objective, and the step count."""

    tau_seq: TaskVector
    visible_tasks: tuple[int, ...]
    step_index: int = 0


@dataclass(frozen=True)
class MaskOptResult:
    mask: RealMask
    objective_trace: np.ndarray
    density_trace: np.ndarray


@dataclass(frozen=True)
class StepArtifact:
    """Everything recorded at one sequential step."""

    task_id: int
    mask: BinaryMask
    real_mask: RealMask
    objective_trace: np.ndarray
    density_trace: np.ndarray
    tau_seq_before: np.ndarray


@dataclass(frozen=True)
class MergeResult:
    merged: ParamVector
    final_tau: TaskVector
    steps: tuple[StepArtifact, ...]
    plan: MergePlan


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def partition(task_ids: Sequence[int], num_sequential: int, seed: int = 0) -> MergePlan:
    """Uniformly random seeded choice of the sequential tasks and their order."""
    ids = tuple(int(t) for t in task_ids)
    if not 0 <= num_sequential <= len(ids):
        raise ContractError(
            f"num_sequential must lie in [0, {len(ids)}], got {num_sequential}"
        )
    perm = rng_for(seed, STAGE_PARTITION).permutation(len(ids))
    sequential = tuple(ids[i] for i in perm[:num_sequential])
    efficient = tuple(t for t in ids if t not in sequential)
    return MergePlan(efficient_set=efficient, sequential_set=sequential, seed=seed)


def efficient_merge(theta_pre: ParamVector, bulk: Sequence[TaskVector],
                    scale: float = 0.3) -> SequentialState:
    """Task-arithmetic base vector scale * sum(bulk); empty bulk gives the zero vector."""
    if scale <= 0.0:
        raise ContractError("scale must be positive")
    for tv in bulk:
        if tv.size != theta_pre.size:
            raise ContractError(
                f"task vector {tv.task_id!r} has {tv.size} entries, expected {theta_pre.size}"
            )
    if bulk:
        values = scale * ordered_sum([tv.values for tv in bulk])
    else:
        values = np.zeros(theta_pre.size)
    visible = tuple(tv.task_id for tv in bulk)
    return SequentialState(TaskVector(values, task_id="merged"), visible, step_index=0)


def masked_merge(tau_seq: TaskVector, tau_j: TaskVector, mask: RealMask | BinaryMask,
                 strategy: str = "both") -> TaskVector:
    """Combine the current merged vector with an incoming task vector under a mask.

    both:            (1 - m) * tau_seq + m * tau_j
    only_mask:       tau_seq + m * tau_j
    only_complement: (1 - m) * tau_seq + tau_j

    With a binary mask and strategy 'both' each output coordinate is copied
    bit-exactly from one of the two sources.
    """
    if strategy not in STRATEGIES:
        raise ContractError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    if tau_seq.size != tau_j.size:
        raise ContractError(
            f"task vectors have mismatched lengths {tau_seq.size} and {tau_j.size}"
        )
    m = mask.m if isinstance(mask, BinaryMask) else mask.r
    if isinstance(mask, RealMask):
        if np.any((m < 0.0) | (m > 1.0)):
            raise ContractError("real mask values must lie in [0, 1] when merging")
    if m.shape != tau_seq.values.shape:
        raise ContractError(f"mask length {m.size} does not match task vectors {tau_seq.size}")
    if strategy == "both":
        if isinstance(mask, BinaryMask):
            merged = np.where(m == 1.0, tau_j.values, tau_seq.values)
        else:
            merged = (1.0 - m) * tau_seq.values + m * tau_j.values
    elif strategy == "only_mask":
        merged = tau_seq.values + m * tau_j.values
    else:
        merged = (1.0 - m) * tau_seq.values + tau_j.values
    return TaskVector(merged, task_id="merged")


TaskExamples = Mapping[int, tuple[np.ndarray, np.ndarray | None]]


def _data_loss_and_dlogits(logits: np.ndarray, labels: np.ndarray | None, objective: str):
    n = logits.shape[0]
    if objective == "cross_entropy":
        if labels is None:
            raise ContractError("cross_entropy objective needs labels")
        loss = cross_entropy(logits, labels)
        dz = softmax(logits)
        dz[np.arange(n), labels] -= 1.0
        return loss, dz / n
    p = softmax(logits)
    logp = np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    per_row = -np.sum(p * logp, axis=1)
    dz = -p * (logp + per_row[:, None]) / n
    return float(np.mean(per_row)), dz


def consensus_objective(spec: ModelSpec, theta_pre: ParamVector, state: SequentialState,
                        tau_j: TaskVector, mask: RealMask, task_batches: Mapping[int, Sequence[tuple]],
                        l1_weight: float, strategy: str = "both",
                        objective: str = "cross_entropy") -> tuple[float, np.ndarray]:
    """Soft-mask objective and its exact gradient with respect to r.

    Loss = sum over visible tasks of the task's mean data loss (averaged over
    its supplied batches) + l1_weight * mean(sigmoid(r)). The L1 pressure is
    normalized per coordinate so l1_weight stays meaningful at any parameter
    count; an unnormalized sum would bury the data signal. The gradient chains
    the parameter gradient through the merge direction and sigmoid'(r).
    """
    if objective not in OBJECTIVES:
        raise ContractError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if strategy not in STRATEGIES:
        raise ContractError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    for t in state.visible_tasks:
        if t not in task_batches:
            raise ContractError(f"no credible data supplied for visible task {t}")
    m = sigmoid(mask.r)
    if strategy == "both":
        tau_values = (1.0 - m) * state.tau_seq.values + m * tau_j.values
        direction = tau_j.values - state.tau_seq.values
    elif strategy == "only_mask":
        tau_values = state.tau_seq.values + m * tau_j.values
        direction = tau_j.values
    else:
        tau_values = (1.0 - m) * state.tau_seq.values + tau_j.values
        direction = -state.tau_seq.values
    theta = bind(spec, theta_pre.values + tau_values)

    data_loss = 0.0
    dtheta = np.zeros(theta_pre.size)
    for t in state.visible_tasks:
        batches = task_batches[t]
        task_loss = 0.0
        task_grad = np.zeros(theta_pre.size)
        for inputs, labels in batches:
            inputs = np.asarray(inputs, dtype=np.float64)
            acts = _forward_acts(spec, theta.values, inputs)
            loss_b, dz = _data_loss_and_dlogits(acts[-1], labels, objective)
            task_loss += loss_b
            task_grad += _backward(spec, acts, theta.values, dz)
        data_loss += task_loss / len(batches)
        dtheta += task_grad / len(batches)

    n = theta_pre.size
    sig_grad = m * (1.0 - m)
    loss = data_loss + l1_weight * float(np.mean(m))
    grad_r = dtheta * direction * sig_grad + (l1_weight / n) * sig_grad
    return loss, grad_r


def init_mask(n: int, init_active_fraction: float, seed,
              magnitude: float = INIT_MAGNITUDE) -> RealMask:
    """Seeded init: max(1, floor(fraction * n)) coordinates at +magnitude, rest at -magnitude."""
    if not 0.0 <= init_active_fraction < 1.0:
        raise ContractError("init_active_fraction must lie in [0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    active = max(1, int(np.floor(init_active_fraction * n)))
    r = np.full(n, -magnitude)
    r[rng.choice(n, size=active, replace=False)] = magnitude
    return RealMask(r)


def binarize(mask: RealMask) -> BinaryMask:
    """Round sigmoid(r): 1 where sigmoid(r) >= 0.5 (equivalently r >= 0), else 0."""
    return BinaryMask(np.where(mask.r >= 0.0, 1.0, 0.0))


def _draw_batch(rng: np.random.Generator, inputs: np.ndarray, labels: np.ndarray | None,
                batch_size: int) -> tuple[np.ndarray, np.ndarray | None]:
    n = inputs.shape[0]
    if n <= batch_size:
        return inputs, labels
    idx = rng.choice(n, size=batch_size, replace=False)
    return inputs[idx], None if labels is None else labels[idx]


def optimize_mask(spec: ModelSpec, theta_pre: ParamVector, state: SequentialState,
                  tau_j: TaskVector, task_data: TaskExamples, init: RealMask,
                  plan: MergePlan, rng: np.random.Generator,
                  objective: str = "cross_entropy") -> MaskOptResult:
    """First-order descent on r.

    Per iteration, `batches_per_task` batches of at most `batch_size` samples
    are drawn per visible task (the whole set when it is smaller). The
    objective trace holds the pre-step loss per iteration; the density trace
    holds the rounded-mask density before the first and after every step.
    """
    for t in state.visible_tasks:
        if t not in task_data:
            raise ContractError(f"no credible data supplied for visible task {t}")
    r = init.r.copy()
    objective_trace = np.zeros(plan.iterations_per_task)
    density_trace = np.zeros(plan.iterations_per_task + 1)
    density_trace[0] = float(np.mean(r >= 0.0))
    for it in range(plan.iterations_per_task):
        batches = {
            t: [
                _draw_batch(rng, task_data[t][0], task_data[t][1], plan.batch_size)
                for _ in range(plan.batches_per_task)
            ]
            for t in state.visible_tasks
        }
        loss, grad_r = consensus_objective(
            spec, theta_pre, state, tau_j, RealMask(r), batches,
            plan.l1_weight, plan.strategy, objective,
        )
        objective_trace[it] = loss
        r = r - plan.mask_lr * grad_r
        density_trace[it + 1] = float(np.mean(r >= 0.0))
    return MaskOptResult(RealMask(r), objective_trace, density_trace)


def _as_examples(credible: Mapping[int, object]) -> dict[int, tuple[np.ndarray, np.ndarray | None]]:
    out: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}
    for t, entry in credible.items():
        if isinstance(entry, CredibleSet):
            out[t] = (entry.inputs, entry.pseudo_labels)
        else:
            inputs, labels = entry
            out[t] = (np.asarray(inputs, dtype=np.float64),
                      None if labels is None else np.asarray(labels, dtype=np.int64))
    return out


def sequential_merge(checkpoints: Checkpoints, plan: MergePlan,
                     credible: Mapping[int, object],
                     objective: str = "cross_entropy") -> MergeResult:
    """Run the full merge: bulk task arithmetic, then one mask per sequential task.

    `credible` maps task id to either a CredibleSet or a raw
    (inputs, labels-or-None) pair. Returns the merged parameters and, per
    sequential step, the binary mask with its objective and density traces.
    """
    spec = checkpoints.spec
    theta_pre = checkpoints.pretrained
    all_ids = set(range(checkpoints.num_tasks))
    if set(plan.efficient_set) | set(plan.sequential_set) != all_ids:
        raise ContractError(
            "plan task sets must cover exactly the checkpoint tasks "
            f"{sorted(all_ids)}"
        )
    taus = {
        t: task_vector(checkpoints.finetuned[t], theta_pre, task_id=t) for t in sorted(all_ids)
    }
    task_data = _as_examples(credible)

    state = efficient_merge(theta_pre, [taus[t] for t in plan.efficient_set],
                            plan.lambda_efficient)
    steps: list[StepArtifact] = []
    carried: RealMask | None = None
    for step_idx, j in enumerate(plan.sequential_set):
        state = SequentialState(state.tau_seq, state.visible_tasks + (j,), step_idx)
        for t in state.visible_tasks:
            if t not in task_data:
                raise ContractError(f"no credible data supplied for visible task {t}")
        if carried is None or plan.reinit_mask_per_task:
            init = init_mask(theta_pre.size, plan.init_active_fraction,
                             rng_for(plan.seed, STAGE_MASK_INIT, step_idx))
        else:
            init = carried
        result = optimize_mask(
            spec, theta_pre, state, taus[j], task_data, init, plan,
            rng_for(plan.seed, STAGE_MASK_BATCHES, step_idx), objective,
        )
        carried = result.mask
        hard = binarize(result.mask)
        tau_before = state.tau_seq.values
        new_tau = masked_merge(state.tau_seq, taus[j], hard, plan.strategy)
        steps.append(
            StepArtifact(
                task_id=j,
                mask=hard,
                real_mask=result.mask,
                objective_trace=result.objective_trace,
                density_trace=result.density_trace,
                tau_seq_before=tau_before,
            )
        )
        state = SequentialState(new_tau, state.visible_tasks, step_idx + 1)

    merged = ParamVector(theta_pre.values + state.tau_seq.values, theta_pre.spec_hash,
                         theta_pre.layer_offsets)
    return MergeResult(merged=merged, final_tau=state.tau_seq, steps=tuple(steps), plan=plan)


def plan_with(plan: MergePlan, **overrides) -> MergePlan:
    """Copy a plan with some hyperparameters replaced."""
    return replace(plan, **overrides)
