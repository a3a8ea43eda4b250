"""Customer-side output validation.

Test A: accuracy against the other providers of the round:
    theta_sp     = theta_global + delta_sp
    theta_others = theta_global + sum(delta_k for k != sp)
    Fail iff sum_z [l(theta_sp, z) - l(theta_others, z)] > gamma_t

Test B: moving average of the loss over the last tau_c + 1 outputs:
    Fail iff mean_tau sum_z l(theta_tau, z) > beta_t
    For delegated outer steps the theta_global series is used instead.

Both sums run over the customer's held-out test set, so the thresholds scale
with its size unless ``normalize`` is set. Verdicts never use the loss a
provider reports; every loss is recomputed here.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from fedstr.errors import ModelError
from fedstr.ml.data import Dataset
from fedstr.ml.models import LossSpec, ModelSpec, total_loss
from fedstr.ml.params import ModelParams

logger = logging.getLogger(__name__)


class TestType(StrEnum):
    __test__ = False

    A = "A"
    B = "B"


class ValidationConfig(BaseModel):
    """Thresholds and the held-out data every verdict is computed on."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    test_type: TestType = TestType.A
    gamma_t: float = 0.0
    beta_t: float = math.inf
    tau_c: int = Field(default=0, ge=0)
    test_dataset: Dataset
    loss: LossSpec = LossSpec()
    model: ModelSpec
    normalize: bool = False

    @field_validator("test_dataset")
    @classmethod
    def _non_empty(cls, v: Dataset) -> Dataset:
        if len(v) == 0:
            raise ValueError("test dataset must not be empty")
        return v

    def summed_loss(self, p: ModelParams) -> float:
        value = total_loss(p, self.model, self.loss, self.test_dataset)
        if self.normalize:
            value /= len(self.test_dataset)
        return value


@dataclass(frozen=True)
class Verdict:
    passed: bool
    reason: str = ""
    advisory: bool = False
    score: float | None = None


@dataclass
class ParamHistory:
    """Per-provider output series plus the theta_global series."""

    by_provider: dict[str, list[ModelParams]] = field(default_factory=lambda: defaultdict(list))
    global_series: list[ModelParams] = field(default_factory=list)

    def record(self, sp: str, p: ModelParams) -> None:
        self.by_provider[sp].append(p)

    def record_global(self, p: ModelParams) -> None:
        self.global_series.append(p)

    def series(self, sp: str | None) -> list[ModelParams]:
        if sp is None:
            return self.global_series
        return self.by_provider.get(sp, [])


def deltas_from_outputs(
    theta_global: ModelParams, outputs: dict[str, ModelParams]
) -> dict[str, np.ndarray]:
    """``delta_k = theta_k - theta_global`` for every provider output."""
    deltas = {}
    for sp, p in outputs.items():
        theta_global.check_compatible(p)
        deltas[sp] = p.values - theta_global.values
    return deltas


def _shifted(theta_global: ModelParams, delta: np.ndarray) -> ModelParams | None:
    try:
        return theta_global.with_values(theta_global.values + delta)
    except ModelError:
        return None


def validate_test_a(
    sp: str, theta_global: ModelParams, deltas: dict[str, np.ndarray], cfg: ValidationConfig
) -> Verdict:
    """Compare ``sp``'s output against the sum of the other providers' updates."""
    if sp not in deltas:
        return Verdict(False, "validation: provider submitted no output")
    if len(deltas) < 2:
        return Verdict(True, "no peers to compare", advisory=True)

    candidate = _shifted(theta_global, deltas[sp])
    others_delta = sum(d for k, d in deltas.items() if k != sp)
    others = _shifted(theta_global, others_delta)
    if candidate is None:
        return Verdict(False, "validation: output is not finite")

    own = cfg.summed_loss(candidate)
    if not math.isfinite(own):
        return Verdict(False, "validation: output loss is not finite")
    reference = cfg.summed_loss(others) if others is not None else math.inf
    if not math.isfinite(reference):
        return Verdict(True, "peers diverged", advisory=True)

    difference = own - reference
    logger.debug("Test A %s…: loss %.6g vs peers %.6g", sp[:12], own, reference)
    if difference > cfg.gamma_t:
        return Verdict(
            False,
            f"validation: loss exceeds peers by {difference:.6g} > gamma {cfg.gamma_t:.6g}",
            score=difference,
        )
    return Verdict(True, score=difference)


def validate_test_b(
    sp: str | None, history: ParamHistory, cfg: ValidationConfig
) -> Verdict:
    """Moving-average loss check; ``sp=None`` checks the theta_global series."""
    series = history.series(sp)
    window = cfg.tau_c + 1
    if len(series) < window:
        return Verdict(True, f"history depth {len(series)} < {window}", advisory=True)

    losses = [cfg.summed_loss(p) for p in series[-window:]]
    average = sum(losses) / window
    if not math.isfinite(average) or average > cfg.beta_t:
        return Verdict(
            False,
            f"validation: moving-average loss {average:.6g} > beta {cfg.beta_t:.6g}",
            score=average,
        )
    return Verdict(True, score=average)


def validate_output(
    sp: str,
    theta_global: ModelParams,
    outputs: dict[str, ModelParams],
    history: ParamHistory,
    cfg: ValidationConfig,
) -> Verdict:
    """Run whichever test ``cfg.test_type`` selects for one provider."""
    if cfg.test_type is TestType.A:
        return validate_test_a(sp, theta_global, deltas_from_outputs(theta_global, outputs), cfg)
    return validate_test_b(sp, history, cfg)
