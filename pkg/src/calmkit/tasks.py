"""Synthetic multi-task benchmark and the training loop that produces checkpoints.

Each task is a Gaussian-cluster classification problem living in its own
region of input space: task t is offset by t * task_offset along a seeded
random direction (the constellation is centered about the origin to keep
input magnitudes uniform across tasks), and its classes sit on an orthonormal
frame scaled so every pair of class means is exactly cluster_sep apart. Class
frames live in the complement of the offset direction and interpolate between
one family-wide frame and independent per-task frames via frame_align, which
controls how much skill transfers across tasks: aligned frames admit a single
shared classifier, independent frames force task-specific solutions. All
tasks share the same label set, so a single classifier head serves every task
and the whole parameter vector participates in merging.

The pipeline generate -> pretrain -> finetune is a deterministic function of
(TaskFamily, TrainConfig).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    Batch,
    ContractError,
    ModelSpec,
    ParamVector,
    forward,
    init_params,
    loss_and_grad,
    sgd_step,
)
from .seeding import STAGE_DATA, STAGE_FINETUNE, STAGE_INIT, STAGE_PRETRAIN, rng_for


@dataclass(frozen=True)
class TaskFamily:
    """Parameters of the synthetic task generator."""

    num_tasks: int = 8
    classes_per_task: int = 5
    input_dim: int = 16
    cluster_sep: float = 1.6
    task_offset: float = 3.2
    noise_sigma: float = 0.25
    frame_align: float = 0.5
    train_per_task: int = 400
    unlabeled_per_task: int = 400
    test_per_task: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ContractError(f"num_tasks must be >= 1, got {self.num_tasks}")
        if not 0.0 <= self.frame_align <= 1.0:
            raise ContractError(f"frame_align must lie in [0, 1], got {self.frame_align}")
        if self.classes_per_task < 2:
            raise ContractError(f"classes_per_task must be >= 2, got {self.classes_per_task}")
        if self.classes_per_task > self.input_dim:
            raise ContractError(
                "input_dim must be >= classes_per_task to place orthonormal class directions"
            )
        if self.cluster_sep <= 0.0 or self.noise_sigma <= 0.0:
            raise ContractError("cluster_sep and noise_sigma must be positive")
        floor = self.cluster_sep + 6.0 * self.noise_sigma
        if self.task_offset < floor:
            raise ContractError(
                f"task_offset {self.task_offset} violates 3-sigma disjointness; need >= {floor}"
            )
        if min(self.train_per_task, self.unlabeled_per_task, self.test_per_task) < 1:
            raise ContractError("every split needs at least one sample per task")


@dataclass(frozen=True)
class TaskData:
    """One task's labeled train/test splits plus its unlabeled pool.

    `audit_labels` are the withheld truth for the unlabeled pool; they exist
    only for report-time audits and are never passed to sampling or merging.
    """

    task_id: int
    train: Batch
    test: Batch
    unlabeled: Batch
    audit_labels: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.audit_labels, dtype=np.int64)
        if labels.shape != (len(self.unlabeled),):
            raise ContractError("audit_labels must match the unlabeled pool size")
        labels.flags.writeable = False
        object.__setattr__(self, "audit_labels", labels)


@dataclass(frozen=True)
class TrainConfig:
    """Architecture and training schedule shared by pretraining and fine-tuning."""

    hidden_dims: tuple[int, ...] = (32,)
    activation: str = "relu"
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    finetune_epochs: int = 40
    finetune_lr: float = 0.05
    batch_size: int = 64
    head_mode: str = "shared"
    accuracy_floor: float = 0.90

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.head_mode not in ("shared", "per_task"):
            raise ContractError(f"head_mode must be 'shared' or 'per_task', got {self.head_mode!r}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass(frozen=True)
class Checkpoints:
    """The shared pretrained model and one fine-tuned model per task."""

    spec: ModelSpec
    pretrained: ParamVector
    finetuned: tuple[ParamVector, ...]

    def __post_init__(self):
        spec_hash = self.spec.hash()
        if self.pretrained.spec_hash != spec_hash or any(
            ft.spec_hash != spec_hash for ft in self.finetuned
        ):
            raise ContractError("all checkpoints must be bound to the same spec")

    @property
    def num_tasks(self) -> int:
        return len(self.finetuned)


def _split_counts(total: int, classes: int) -> list[int]:
    base, extra = divmod(total, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def generate_family(family: TaskFamily) -> list[TaskData]:
    """Draw every task's train/test/unlabeled splits; deterministic given the seed."""
    rng = rng_for(family.seed, STAGE_DATA)
    d, classes = family.input_dim, family.classes_per_task
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    anchor = -0.5 * (family.num_tasks - 1) * family.task_offset * direction

    def complement_frame() -> np.ndarray:
        raw = rng.standard_normal((d, classes))
        raw -= np.outer(direction, direction @ raw)
        frame, _ = np.linalg.qr(raw)
        return frame

    shared_frame = complement_frame()
    counts = {
        "train": _split_counts(family.train_per_task, classes),
        "unlabeled": _split_counts(family.unlabeled_per_task, classes),
        "test": _split_counts(family.test_per_task, classes),
    }
    tasks = []
    for t in range(family.num_tasks):
        center = anchor + t * family.task_offset * direction
        own_frame = complement_frame()
        mix = family.frame_align * shared_frame + (1.0 - family.frame_align) * own_frame
        frame, _ = np.linalg.qr(mix)
        # orthonormal columns: every pair of means is exactly cluster_sep apart
        means = center + (family.cluster_sep / np.sqrt(2.0)) * frame.T

        splits: dict[str, tuple[list[np.ndarray], list[np.ndarray]]] = {
            name: ([], []) for name in counts
        }
        for c in range(classes):
            per_class = sum(counts[name][c] for name in counts)
            draws = means[c] + family.noise_sigma * rng.standard_normal((per_class, d))
            pos = 0
            for name in ("train", "unlabeled", "test"):
                k = counts[name][c]
                splits[name][0].append(draws[pos : pos + k])
                splits[name][1].append(np.full(k, c, dtype=np.int64))
                pos += k

        batches = {}
        for name in ("train", "unlabeled", "test"):
            inputs = np.concatenate(splits[name][0])
            labels = np.concatenate(splits[name][1])
            perm = rng.permutation(inputs.shape[0])
            batches[name] = (inputs[perm], labels[perm])

        tasks.append(
            TaskData(
                task_id=t,
                train=Batch(*batches["train"]),
                test=Batch(*batches["test"]),
                unlabeled=Batch(batches["unlabeled"][0]),
                audit_labels=batches["unlabeled"][1],
            )
        )
    return tasks


def accuracy(spec: ModelSpec, params: ParamVector, batch: Batch) -> float:
    """Fraction of argmax predictions matching the batch labels."""
    if batch.labels is None:
        raise ContractError("accuracy requires a labeled batch")
    predicted = np.argmax(forward(spec, params, batch.inputs), axis=1)
    return float(np.mean(predicted == batch.labels))


def _sgd_train(spec: ModelSpec, params: ParamVector, inputs: np.ndarray, labels: np.ndarray,
               epochs: int, lr: float, batch_size: int, rng: np.random.Generator,
               freeze_head: bool = False) -> ParamVector:
    head_start = spec.layer_offsets()[-1][0]
    n = inputs.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            result = loss_and_grad(spec, params, Batch(inputs[idx], labels[idx]))
            grad = result.param_grad
            if freeze_head:
                grad = grad.copy()
                grad[head_start:] = 0.0
            params = sgd_step(params, grad, lr)
    return params


def pretrain(spec: ModelSpec, tasks: list[TaskData], epochs: int,
             lr: float = 0.1, batch_size: int = 64, seed: int = 0) -> ParamVector:
    """Train a fresh seeded init on the pooled train splits of every task.

    A zero epoch budget returns the initialization unchanged.
    """
    params = init_params(spec, rng_for(seed, STAGE_INIT))
    if epochs == 0:
        return params
    inputs = np.concatenate([t.train.inputs for t in tasks])
    labels = np.concatenate([t.train.labels for t in tasks])
    return _sgd_train(spec, params, inputs, labels, epochs, lr, batch_size,
                      rng_for(seed, STAGE_PRETRAIN))


def finetune(spec: ModelSpec, theta_pre: ParamVector, task: TaskData, epochs: int,
             lr: float = 0.1, batch_size: int = 64, seed: int = 0,
             head_mode: str = "shared") -> ParamVector:
    """Continue training theta_pre on one task's train split.

    head_mode 'per_task' freezes the classifier head so the task vector only
    touches the backbone, mimicking setups whose heads never fine-tune.
    """
    if theta_pre.spec_hash != spec.hash():
        raise ContractError("theta_pre is not bound to this spec")
    return _sgd_train(
        spec, theta_pre, task.train.inputs, task.train.labels, epochs, lr, batch_size,
        rng_for(seed, STAGE_FINETUNE, task.task_id), freeze_head=(head_mode == "per_task"),
    )


def build_checkpoints(family: TaskFamily, config: TrainConfig = TrainConfig(),
                      tasks: list[TaskData] | None = None) -> tuple[list[TaskData], Checkpoints]:
    """Full data + training pipeline; verifies each fine-tuned model's own-task floor."""
    if tasks is None:
        tasks = generate_family(family)
    spec = ModelSpec(family.input_dim, config.hidden_dims, family.classes_per_task,
                     config.activation)
    theta_pre = pretrain(spec, tasks, config.pretrain_epochs, config.pretrain_lr,
                         config.batch_size, family.seed)
    finetuned = []
    for task in tasks:
        theta_ft = finetune(spec, theta_pre, task, config.finetune_epochs, config.finetune_lr,
                            config.batch_size, family.seed, config.head_mode)
        own = accuracy(spec, theta_ft, task.test)
        if own < config.accuracy_floor:
            raise ContractError(
                f"task {task.task_id} fine-tuned accuracy {own:.3f} is below the "
                f"floor {config.accuracy_floor}; adjust the training config"
            )
        finetuned.append(theta_ft)
    return tasks, Checkpoints(spec=spec, pretrained=theta_pre, finetuned=tuple(finetuned))
