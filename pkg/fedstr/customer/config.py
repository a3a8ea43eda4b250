"""Customer configuration."""

from __future__ import annotations

from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field, model_validator

from fedstr.config import settings
from fedstr.events import JOB_REQUEST_KIND
from fedstr.ml.data import Dataset
from fedstr.ml.models import LossKind, ModelSpec
from fedstr.ml.optim import InnerHyperparams, RunOption
from fedstr.nostr.keys import Keypair
from fedstr.validation import TestType


class OuterMode(StrEnum):
    SELF = "self"
    DELEGATE = "delegate"


class ValidationPolicy(BaseModel):
    """Per-sample thresholds; multiplied by the test-set size at run start."""

    model_config = ConfigDict(frozen=True)

    test_type: TestType = TestType.A
    gamma_per_sample: float = 0.5
    beta_per_sample: float = 1e3
    tau_c: int = Field(default=0, ge=0)
    normalize: bool = False


class CustomerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    keypair: Keypair
    relays: list[str] = Field(min_length=1)
    num_pr: int = Field(ge=1)
    num_jobs: int = Field(ge=1)
    run_option: RunOption = RunOption.FEDAVG
    outer_mode: OuterMode = OuterMode.SELF
    kind: int = JOB_REQUEST_KIND

    # --- Data and model ---
    dataset: Dataset
    model: ModelSpec
    loss: LossKind = LossKind.MSE
    hyperparams: InnerHyperparams = InnerHyperparams()
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    seed: int = 0

    # --- Timing ---
    feedback_interval: float = Field(default_factory=lambda: settings.feedback_interval, gt=0)
    job_timeout: float = Field(default_factory=lambda: settings.job_timeout, gt=0)
    discovery_retry_window: float = Field(
        default_factory=lambda: settings.discovery_retry_window, ge=0
    )
    max_reassign_attempts: int = Field(
        default_factory=lambda: settings.max_reassign_attempts, ge=1
    )

    # --- Payment policy (msats) ---
    init_msats: int = Field(default=1000, ge=0)
    round_msats: int = Field(default=9000, ge=0)

    # --- Stopping ---
    target_loss: float | None = None

    # --- Validation ---
    validation: ValidationPolicy = ValidationPolicy()

    # --- DiLoCo outer optimizer ---
    outer_lr: float = Field(default_factory=lambda: settings.outer_lr)
    outer_momentum: float = Field(default_factory=lambda: settings.outer_momentum, ge=0.0)
    outer_weights: list[float] | None = None

    # --- Output ---
    model_root: str = Field(default_factory=lambda: settings.model_root)
    log_out: str | None = None

    @model_validator(mode="after")
    def _timing(self) -> CustomerConfig:
        if self.job_timeout <= self.feedback_interval:
            raise ValueError("job_timeout must exceed feedback_interval")
        if self.outer_weights is not None and len(self.outer_weights) != self.num_pr:
            raise ValueError("outer_weights needs one weight per provider")
        return self

    @property
    def pubkey(self) -> str:
        return self.keypair.pubkey_hex

    @property
    def bid_msats(self) -> int:
        return self.init_msats + self.round_msats
