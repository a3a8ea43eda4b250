"""Application configuration via environment variables.

Uses pydantic-settings so every process (relay, provider, customer, demo
supervisor) validates its knobs at startup. All variables carry the
``FEDSTR_`` prefix, e.g. ``FEDSTR_MODEL_ROOT`` overrides the storage root.
"""

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="FEDSTR_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # --- Application ---
    log_level: str = "INFO"

    # --- Storage ---
    model_root: str = "./fedstr_models"
    http_max_blob_bytes: int = 256 * 1024 * 1024
    http_timeout_seconds: float = 30.0
    inline_model_state_max_bytes: int = 64 * 1024

    # --- Relay ---
    relay_bind: str = "127.0.0.1:7777"
    relay_max_message_bytes: int = 512 * 1024
    relay_log_file: str | None = None

    # --- Customer timing ---
    feedback_interval: float = 1.0  # "wait some time" between feedback polls
    job_timeout: float = 60.0
    discovery_retry_window: float = 5.0
    max_reassign_attempts: int = 5

    # --- Provider timing ---
    payment_timeout: float = 60.0
    payment_grace: float = 300.0
    progress_interval: float = 5.0

    # --- Outer optimizer (DiLoCo) ---
    outer_lr: float = 1.0
    outer_momentum: float = 0.9

    # --- Optional features ---
    nip94_enabled: bool = False
    otel_console_export: bool = False

    @property
    def relay_host(self) -> str:
        """Host part of ``relay_bind``."""
        return split_bind(self.relay_bind)[0]

    @property
    def relay_port(self) -> int:
        """Port part of ``relay_bind``."""
        return split_bind(self.relay_bind)[1]


def split_bind(bind: str) -> tuple[str, int]:
    """Parse ``host:port`` into its parts.

    Raises:
        ValueError: If the address has no port or the port is not an integer.
    """
    host, sep, port = bind.rpartition(":")
    if not sep or not host:
        raise ValueError(f"bind address must be host:port, got {bind!r}")
    try:
        return host, int(port)
    except ValueError as e:
        raise ValueError(f"invalid port in bind address {bind!r}") from e


settings = Settings()
