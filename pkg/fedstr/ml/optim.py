"""Inner and outer optimizers.

Inner (provider side):
    FedAvg: E epochs of minibatch SGD over seeded-shuffled batches
    DiLoCo: E steps, each one sampled batch and one AdamW update

Outer (customer side, or delegated to a provider):
    FedAvg: (1/K) * sum_k eta_k * theta_k
    DiLoCo: outer gradient (1/K) * sum_k eta_k * (theta_global - theta_k)
            followed by a Nesterov momentum step
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from fedstr.errors import DivergenceError, ModelError
from fedstr.ml.data import Dataset
from fedstr.ml.models import LossSpec, ModelSpec, loss, loss_and_grad
from fedstr.ml.params import ModelParams

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[int, float], None]


class RunOption(StrEnum):
    FEDAVG = "FedAvg"
    DILOCO = "DiLoCo"


class AdamWParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)


class InnerHyperparams(BaseModel):
    """Travels as JSON in the ``hyperparameters`` request param."""

    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default=1, ge=1)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=0.05, ge=0.0)
    adamw: AdamWParams = AdamWParams()
    shuffle_seed: int = 0


@dataclass
class OuterState:
    """Outer weights and Nesterov state; ``velocity`` is None before the first step."""

    weights: list[float] | None = None
    outer_lr: float = 1.0
    momentum: float = 0.9
    velocity: np.ndarray | None = field(default=None, repr=False)

    def resolved_weights(self, k: int) -> np.ndarray:
        return _weights(self.weights, k)


def _weights(weights: list[float] | None, k: int) -> np.ndarray:
    if weights is None:
        return np.ones(k)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ModelError(f"expected {k} outer weights, got {w.size}")
    if np.any(w < 0):
        raise ModelError("outer weights must be non-negative")
    return w


def _check_layouts(reference: ModelParams, inner_list: list[ModelParams]) -> None:
    if not inner_list:
        raise ModelError("outer step needs at least one inner result")
    for p in inner_list:
        reference.check_compatible(p)


# ── Inner ────────────────────────────────────────────
def inner_optimize(
    p: ModelParams,
    spec: ModelSpec,
    lspec: LossSpec,
    data: Dataset,
    run_option: RunOption,
    hp: InnerHyperparams,
    progress: ProgressCallback | None = None,
) -> ModelParams:
    """Run the provider-side optimization.

    Args:
        p: Starting parameters (the current global model).
        spec: Model family and dimensions.
        lspec: Loss function.
        data: The provider's data shard.
        run_option: FedAvg (E epochs of SGD) or DiLoCo (E AdamW steps).
        hp: Inner hyperparameters.
        progress: Called as ``progress(epoch_or_step, loss)`` at every boundary.

    Returns:
        Trained parameters.

    Raises:
        DivergenceError: If a loss or update becomes non-finite.
    """
    if run_option is RunOption.FEDAVG:
        return _fedavg_inner(p, spec, lspec, data, hp, progress)
    return _diloco_inner(p, spec, lspec, data, hp, progress)


def _guard(value: float, theta: np.ndarray, last: ModelParams, where: str) -> None:
    if not np.isfinite(value) or not np.all(np.isfinite(theta)):
        raise DivergenceError(f"non-finite loss during {where}", last_params=last)


def _fedavg_inner(p, spec, lspec, data, hp, progress) -> ModelParams:
    rng = np.random.default_rng(hp.shuffle_seed)
    theta = p.values.copy()
    last = p
    n = len(data)
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            batch = data.take(order[start : start + hp.batch_size])
            value, g = loss_and_grad(p.with_values(theta), spec, lspec, batch)
            _guard(value, theta, last, f"epoch {epoch}")
            last = p.with_values(theta)
            theta = theta - hp.learning_rate * g
            _finite_or_raise(p, theta, last, f"epoch {epoch}")
        value = loss(p.with_values(theta), spec, lspec, data)
        _guard(value, theta, last, f"epoch {epoch}")
        if progress:
            progress(epoch, value)
    return p.with_values(theta)


def _diloco_inner(p, spec, lspec, data, hp, progress) -> ModelParams:
    rng = np.random.default_rng(hp.shuffle_seed)
    a = hp.adamw
    theta = p.values.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    last = p
    n = len(data)
    for step in range(1, hp.epochs + 1):
        batch = data.take(rng.choice(n, size=min(hp.batch_size, n), replace=False))
        value, g = loss_and_grad(p.with_values(theta), spec, lspec, batch)
        _guard(value, theta, last, f"step {step}")
        last = p.with_values(theta)
        m = a.beta1 * m + (1.0 - a.beta1) * g
        v = a.beta2 * v + (1.0 - a.beta2) * g**2
        m_hat = m / (1.0 - a.beta1**step)
        v_hat = v / (1.0 - a.beta2**step)
        # decoupled weight decay on the pre-step parameters
        theta = theta * (1.0 - hp.learning_rate * a.weight_decay) - hp.learning_rate * m_hat / (
            np.sqrt(v_hat) + a.eps
        )
        _finite_or_raise(p, theta, last, step)
        if progress:
            progress(step, value)
    return p.with_values(theta)


def _finite_or_raise(p: ModelParams, theta: np.ndarray, last: ModelParams, where) -> ModelParams:
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(f"non-finite parameters after {where}", last_params=last)
    return p.with_values(theta)


# ── Outer ────────────────────────────────────────────
def outer_fedavg(inner_list: list[ModelParams], weights: list[float] | None = None) -> ModelParams:
    """``(1/K) * sum_k eta_k * theta_k``; eta defaults to ones.

    Raises:
        ModelError: On layout mismatch or wrong weight count.
    """
    _check_layouts(inner_list[0] if inner_list else None, inner_list)
    k = len(inner_list)
    w = _weights(weights, k)
    total = np.zeros_like(inner_list[0].values)
    for eta, p in zip(w, inner_list, strict=True):
        total = total + eta * p.values
    return inner_list[0].with_values(total / k)


def outer_diloco(
    theta_global: ModelParams, inner_list: list[ModelParams], state: OuterState
) -> tuple[ModelParams, OuterState]:
    """Outer gradient plus Nesterov momentum.

    ``v <- mu*v + delta``; ``theta <- theta - lr*(mu*v + delta)``.
    """
    _check_layouts(theta_global, inner_list)
    k = len(inner_list)
    w = state.resolved_weights(k)
    delta = np.zeros_like(theta_global.values)
    for eta, p in zip(w, inner_list, strict=True):
        delta = delta + eta * (theta_global.values - p.values)
    delta = delta / k
    velocity = state.velocity if state.velocity is not None else np.zeros_like(delta)
    if velocity.shape != delta.shape:
        raise ModelError("velocity length does not match parameters")
    velocity = state.momentum * velocity + delta
    updated = theta_global.values - state.outer_lr * (state.momentum * velocity + delta)
    new_state = OuterState(
        weights=state.weights,
        outer_lr=state.outer_lr,
        momentum=state.momentum,
        velocity=velocity,
    )
    return theta_global.with_values(updated), new_state
