"""Desk-scale model families with analytic gradients.

Every family is a stack of dense layers ``z = a @ W + b``; the MLP adds a
hidden activation. Losses are mean-per-sample:

    MSE           mean_i sum_j (z_ij - y_ij)^2
    CrossEntropy  softmax over output_dim classes, or sigmoid when output_dim == 1
"""

from __future__ import annotations

import json
import math
from enum import StrEnum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fedstr.errors import ModelError
from fedstr.ml.data import Dataset
from fedstr.ml.params import ModelParams


class ModelFamily(StrEnum):
    LINEAR_REGRESSION = "LinearRegression"
    LOGISTIC_REGRESSION = "LogisticRegression"
    MLP = "MLP"


class Activation(StrEnum):
    TANH = "tanh"
    RELU = "relu"


class LossKind(StrEnum):
    MSE = "MSE"
    CROSS_ENTROPY = "CrossEntropy"


class LossSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: LossKind = LossKind.MSE


class ModelSpec(BaseModel):
    """Which model to train; travels as JSON in the ``model`` request param."""

    model_config = ConfigDict(frozen=True)

    family: ModelFamily
    input_dim: int = Field(ge=1)
    output_dim: int = Field(default=1, ge=1)
    hidden: tuple[int, ...] = ()
    activation: Activation = Activation.TANH
    init_seed: int = 0

    @model_validator(mode="after")
    def _check_hidden(self) -> ModelSpec:
        if self.family is ModelFamily.MLP and not self.hidden:
            raise ValueError("MLP needs at least one hidden layer")
        if self.family is not ModelFamily.MLP and self.hidden:
            raise ValueError(f"{self.family} takes no hidden layers")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be >= 1")
        return self

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, raw: str) -> ModelSpec:
        return cls.model_validate_json(raw)


def check_loss_compatible(spec: ModelSpec, lspec: LossSpec) -> None:
    if spec.family is ModelFamily.LOGISTIC_REGRESSION and lspec.kind is not LossKind.CROSS_ENTROPY:
        raise ModelError("LogisticRegression requires CrossEntropy loss")


def model_layout(spec: ModelSpec) -> tuple[tuple[str, tuple[int, ...]], ...]:
    sizes = spec.layer_sizes
    if len(sizes) == 2:
        return (("weight", (sizes[0], sizes[1])), ("bias", (sizes[1],)))
    layout = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:], strict=True)):
        layout.append((f"layer{i}.weight", (fan_in, fan_out)))
        layout.append((f"layer{i}.bias", (fan_out,)))
    return tuple(layout)


def init_model(spec: ModelSpec) -> ModelParams:
    """Zeros for linear/logistic; seeded Glorot-uniform weights and zero biases for MLP."""
    layout = model_layout(spec)
    if spec.family is not ModelFamily.MLP:
        size = sum(math.prod(s) for _, s in layout)
        return ModelParams(values=np.zeros(size), layout=layout)
    rng = np.random.default_rng(spec.init_seed)
    chunks = []
    for name, shape in layout:
        if name.endswith(".weight"):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            chunks.append(rng.uniform(-bound, bound, size=shape).reshape(-1))
        else:
            chunks.append(np.zeros(shape))
    return ModelParams(values=np.concatenate(chunks), layout=layout)


# ── Forward / backward ───────────────────────────────
def _weights(p: ModelParams, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    if p.layout != model_layout(spec):
        raise ModelError("parameter layout does not match model spec")
    tensors = list(p.tensors().values())
    return [(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)]


def _check_batch(spec: ModelSpec, lspec: LossSpec, batch: Dataset) -> None:
    if batch.features.shape[1] != spec.input_dim:
        raise ModelError(
            f"batch has {batch.features.shape[1]} features, model expects {spec.input_dim}"
        )
    if lspec.kind is LossKind.MSE:
        width = 1 if batch.targets.ndim == 1 else batch.targets.shape[1]
        if width != spec.output_dim:
            raise ModelError(f"targets have width {width}, model outputs {spec.output_dim}")
    else:
        if batch.targets.ndim != 1:
            raise ModelError("CrossEntropy requires class-index targets")
        classes = max(spec.output_dim, 2)
        t = batch.targets
        if np.any(t < 0) or np.any(t >= classes) or np.any(t != np.round(t)):
            raise ModelError(f"class targets must be integers in [0, {classes})")


def _forward(p: ModelParams, spec: ModelSpec, x: np.ndarray):
    layers = _weights(p, spec)
    activations = [x]
    pre = []
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        pre.append(z)
        if i < len(layers) - 1:
            a = np.tanh(z) if spec.activation is Activation.TANH else np.maximum(z, 0.0)
            activations.append(a)
        else:
            a = z
    return a, activations, pre, layers


def _loss_and_output_grad(
    out: np.ndarray, lspec: LossSpec, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    n = out.shape[0]
    if lspec.kind is LossKind.MSE:
        y = targets.reshape(n, -1)
        diff = out - y
        return float(np.sum(diff**2) / n), 2.0 * diff / n
    labels = targets.astype(np.int64)
    if out.shape[1] == 1:
        z = out[:, 0]
        y = labels.astype(np.float64)
        # softplus(z) - y*z, numerically stable
        value = np.mean(np.logaddexp(0.0, z) - y * z)
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return float(value), ((sig - y) / n).reshape(n, 1)
    shifted = out - out.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    value = np.mean(log_norm - shifted[np.arange(n), labels])
    probs = np.exp(shifted - log_norm[:, None])
    probs[np.arange(n), labels] -= 1.0
    return float(value), probs / n


def loss_and_grad(
    p: ModelParams, spec: ModelSpec, lspec: LossSpec, batch: Dataset
) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient, flattened in layout order.

    Raises:
        ModelError: On dimension or target mismatch.
    """
    check_loss_compatible(spec, lspec)
    _check_batch(spec, lspec, batch)
    out, activations, pre, layers = _forward(p, spec, batch.features)
    value, delta = _loss_and_output_grad(out, lspec, batch.targets)

    grads: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append(delta.sum(axis=0))
        grads.append(activations[i].T @ delta)
        if i > 0:
            upstream = delta @ w.T
            if spec.activation is Activation.TANH:
                delta = upstream * (1.0 - activations[i] ** 2)
            else:
                delta = upstream * (pre[i - 1] > 0)
    grads.reverse()
    return value, np.concatenate([g.reshape(-1) for g in grads])


def loss(p: ModelParams, spec: ModelSpec, lspec: LossSpec, batch: Dataset) -> float:
    check_loss_compatible(spec, lspec)
    _check_batch(spec, lspec, batch)
    out, *_ = _forward(p, spec, batch.features)
    return _loss_and_output_grad(out, lspec, batch.targets)[0]


def grad(p: ModelParams, spec: ModelSpec, lspec: LossSpec, batch: Dataset) -> np.ndarray:
    return loss_and_grad(p, spec, lspec, batch)[1]


def total_loss(p: ModelParams, spec: ModelSpec, lspec: LossSpec, data: Dataset) -> float:
    """Sum of per-sample losses over ``data``."""
    return loss(p, spec, lspec, data) * len(data)


def evaluate_loss(p: ModelParams, spec: ModelSpec, lspec: LossSpec, data: Dataset) -> float:
    """Mean per-sample loss over a whole dataset (no gradient)."""
    return loss(p, spec, lspec, data)
