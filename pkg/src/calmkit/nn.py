"""Minimal dense classifier with exact reverse-mode gradients.

A model is a flat float64 parameter vector bound to a :class:`ModelSpec`, so
merging code can treat checkpoints as points in R^n. Every routine here is a
pure function of its inputs: same spec, parameters, and data give bit-identical
logits, losses, and gradients.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class ContractError(ValueError):
    """An argument violated a documented precondition."""


@dataclass(frozen=True)
class ModelSpec:
    """Feedforward architecture: input_dim -> hidden_dims -> num_classes.

    Each layer owns a contiguous span of the flat parameter vector laid out as
    the weight matrix (fan_in x fan_out, row-major) followed by the bias, for
    a span length of (fan_in + 1) * fan_out.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ContractError(f"input_dim must be positive, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ContractError(f"hidden_dims must all be positive, got {self.hidden_dims}")
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        """(fan_in, fan_out) per linear layer, input to output."""
        widths = (self.input_dim, *self.hidden_dims, self.num_classes)
        return tuple(zip(widths[:-1], widths[1:]))

    @property
    def parameter_count(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.layer_dims)

    def layer_offsets(self) -> tuple[tuple[int, int], ...]:
        """(start, length) span of each layer in the flat parameter vector."""
        spans = []
        start = 0
        for fi, fo in self.layer_dims:
            length = (fi + 1) * fo
            spans.append((start, length))
            start += length
        return tuple(spans)

    def hash(self) -> str:
        key = f"{self.input_dim}|{self.hidden_dims}|{self.num_classes}|{self.activation}"
        return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector plus the metadata binding it to a spec."""

    values: np.ndarray
    spec_hash: str
    layer_offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ContractError(f"parameter values must be 1-D, got shape {values.shape}")
        pos = 0
        for start, length in self.layer_offsets:
            if start != pos or length <= 0:
                raise ContractError("layer_offsets must partition [0, n) in order without gaps")
            pos += length
        if pos != values.size:
            raise ContractError(
                f"parameter vector has {values.size} entries but layer_offsets cover {pos}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class Batch:
    """Inputs (B x d) with optional integer labels (B,)."""

    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2:
            raise ContractError(f"batch inputs must be 2-D, got shape {inputs.shape}")
        if not np.all(np.isfinite(inputs)):
            raise ContractError("batch inputs must be finite")
        inputs.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if labels.shape != (inputs.shape[0],):
                raise ContractError(
                    f"labels shape {labels.shape} does not match batch size {inputs.shape[0]}"
                )
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass(frozen=True)
class GradResult:
    """Loss value and the exact gradient with respect to the flat parameters."""

    loss: float
    param_grad: np.ndarray

    def __post_init__(self):
        grad = np.ascontiguousarray(self.param_grad, dtype=np.float64)
        if grad.ndim != 1:
            raise ContractError(f"param_grad must be 1-D, got shape {grad.shape}")
        if not np.all(np.isfinite(grad)) or not np.isfinite(self.loss):
            raise ContractError("loss and gradient entries must be finite")
        grad.flags.writeable = False
        object.__setattr__(self, "param_grad", grad)


def bind(spec: ModelSpec, values: np.ndarray) -> ParamVector:
    """Wrap a flat vector as the parameters of `spec`, validating its length."""
    values = np.asarray(values, dtype=np.float64)
    if values.size != spec.parameter_count:
        raise ContractError(
            f"expected {spec.parameter_count} parameters for spec, got {values.size}"
        )
    return ParamVector(values.copy(), spec.hash(), spec.layer_offsets())


def zero_params(spec: ModelSpec) -> ParamVector:
    return bind(spec, np.zeros(spec.parameter_count))


def init_params(spec: ModelSpec, seed) -> ParamVector:
    """Seeded uniform init in +-sqrt(6/(fan_in+fan_out)) per layer; biases zero."""
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.parameter_count)
    for (start, _), (fi, fo) in zip(spec.layer_offsets(), spec.layer_dims):
        limit = np.sqrt(6.0 / (fi + fo))
        values[start : start + fi * fo] = rng.uniform(-limit, limit, size=fi * fo)
    return bind(spec, values)


def _check_bound(spec: ModelSpec, params: ParamVector):
    if params.spec_hash != spec.hash():
        raise ContractError("parameter vector is not bound to this spec (spec_hash mismatch)")


def _layers(spec: ModelSpec, values: np.ndarray):
    """Views of (W, b) per layer; W has shape (fan_in, fan_out)."""
    out = []
    pos = 0
    for fi, fo in spec.layer_dims:
        w = values[pos : pos + fi * fo].reshape(fi, fo)
        b = values[pos + fi * fo : pos + (fi + 1) * fo]
        out.append((w, b))
        pos += (fi + 1) * fo
    return out


def _activate(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _forward_acts(spec: ModelSpec, values: np.ndarray, inputs: np.ndarray) -> list[np.ndarray]:
    """Per-layer post-activation values; acts[0] is the input, acts[-1] the logits."""
    acts = [inputs]
    layers = _layers(spec, values)
    for idx, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        acts.append(z if idx == len(layers) - 1 else _activate(spec, z))
    return acts


def forward(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Raw logits (B x num_classes); no softmax applied."""
    _check_bound(spec, params)
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise ContractError(f"inputs must be 2-D (batch, features), got shape {inputs.shape}")
    if inputs.shape[1] != spec.input_dim:
        raise ContractError(
            f"inputs axis 1 has {inputs.shape[1]} features, spec.input_dim is {spec.input_dim}"
        )
    return _forward_acts(spec, params.values, inputs)[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stabilized softmax; accepts a vector or a matrix of row logits."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ContractError("softmax requires finite logits")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean over the batch of -log softmax(logits)[label]."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ContractError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ContractError(
            f"labels must lie in [0, {z.shape[1]}), got range [{labels.min()}, {labels.max()}]"
        )
    if not np.all(np.isfinite(z)):
        raise ContractError("cross_entropy requires finite logits")
    logp = _log_softmax(z)
    return float(-np.mean(logp[np.arange(z.shape[0]), labels]))


def prediction_entropy(logits: np.ndarray):
    """Shannon entropy (nats) of softmax(logits).

    Terms with probability zero contribute zero. Returns a scalar for a logit
    vector and a per-row vector for a logit matrix; values lie in [0, ln C].
    """
    z = np.asarray(logits, dtype=np.float64)
    p = softmax(z)
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    h = -np.sum(plogp, axis=-1)
    return float(h) if z.ndim == 1 else h


def _backward(spec: ModelSpec, acts: list[np.ndarray], values: np.ndarray,
              dlogits: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of a scalar loss given dL/dlogits."""
    layers = _layers(spec, values)
    offsets = spec.layer_offsets()
    grad = np.zeros(values.size)
    dz = dlogits
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        start, _ = offsets[idx]
        a_prev = acts[idx]
        fi, fo = spec.layer_dims[idx]
        grad[start : start + fi * fo] = (a_prev.T @ dz).reshape(-1)
        grad[start + fi * fo : start + (fi + 1) * fo] = dz.sum(axis=0)
        if idx > 0:
            da = dz @ w.T
            a = acts[idx]
            if spec.activation == "relu":
                dz = da * (a > 0.0)
            else:
                dz = da * (1.0 - a * a)
    return grad


def loss_and_grad(spec: ModelSpec, params: ParamVector, batch: Batch) -> GradResult:
    """Cross-entropy loss of forward(batch) and its exact parameter gradient."""
    if batch.labels is None:
        raise ContractError("loss_and_grad requires a labeled batch")
    _check_bound(spec, params)
    if batch.inputs.shape[1] != spec.input_dim:
        raise ContractError(
            f"inputs axis 1 has {batch.inputs.shape[1]} features, spec.input_dim is {spec.input_dim}"
        )
    acts = _forward_acts(spec, params.values, batch.inputs)
    logits = acts[-1]
    loss = cross_entropy(logits, batch.labels)
    n = logits.shape[0]
    dz = softmax(logits)
    dz[np.arange(n), batch.labels] -= 1.0
    dz /= n
    return GradResult(loss, _backward(spec, acts, params.values, dz))


def sgd_step(params: ParamVector, grad: np.ndarray, learning_rate: float) -> ParamVector:
    """One plain gradient step: values - learning_rate * grad."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ContractError(
            f"gradient shape {grad.shape} does not match parameters {params.values.shape}"
        )
    return ParamVector(params.values - learning_rate * grad, params.spec_hash, params.layer_offsets)
