"""Provider daemon configuration."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

from fedstr.config import settings
from fedstr.events import DEFAULT_D_TAG, JOB_REQUEST_KIND
from fedstr.nostr.keys import Keypair
from fedstr.payments import default_lnurl


class FaultInjection(BaseModel):
    """Deliberate misbehaviour for the demo harness. All off by default."""

    model_config = ConfigDict(frozen=True)

    crash_after_jobs: int | None = Field(default=None, ge=0)
    tamper: bool = False
    tamper_velocity: bool = False
    noise: bool = False
    noise_seed: int = 0

    @property
    def enabled(self) -> bool:
        return (
            self.crash_after_jobs is not None or self.tamper or self.tamper_velocity or self.noise
        )


class ProviderConfig(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    keypair: Keypair
    relays: list[str] = Field(min_length=1)
    supported_kinds: list[int] = Field(default_factory=lambda: [JOB_REQUEST_KIND])

    # --- Announcement ---
    name: str = "fedstr-provider"
    about: str = "Inner and outer optimization for FEDSTR training jobs"
    d_tag: str = DEFAULT_D_TAG
    hardware: str = "cpu"
    max_execution_time: float = 3600.0
    model_dimensions_range: str = "1-1000000"

    # --- Pricing (msats) ---
    price_init_msats: int = Field(default=1000, ge=0)
    price_result_msats: int = Field(default=9000, ge=0)
    lnurl: str | None = None

    # --- Runtime ---
    max_jobs: int = Field(default=1, ge=1)
    payment_timeout: float = Field(default_factory=lambda: settings.payment_timeout, gt=0)
    payment_grace: float = Field(default_factory=lambda: settings.payment_grace, gt=0)
    progress_interval: float = Field(default_factory=lambda: settings.progress_interval, gt=0)
    model_root: str = Field(default_factory=lambda: settings.model_root)
    nip94: bool = Field(default_factory=lambda: settings.nip94_enabled)

    faults: FaultInjection = FaultInjection()

    @property
    def pubkey(self) -> str:
        return self.keypair.pubkey_hex

    @property
    def resolved_lnurl(self) -> str:
        return self.lnurl or default_lnurl(self.pubkey)
