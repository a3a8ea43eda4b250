"""Exception hierarchy shared by every FEDSTR component.

Verification helpers (``verify_event``, ``validate_receipt``, the
validation tests) return verdicts instead of raising; builders, parsers
and I/O raise one of the types below.
"""

from __future__ import annotations

from typing import Any


class FedstrError(Exception):
    """Base class for all FEDSTR errors."""


# ── nostr_core ───────────────────────────────────────
class InvalidKeyError(FedstrError, ValueError):
    """Secret key material is not a valid secp256k1 scalar."""


class SignerMismatchError(FedstrError, ValueError):
    """Template pubkey does not belong to the signing keypair."""


# ── relay ────────────────────────────────────────────
class RelayError(FedstrError):
    """Relay transport or protocol failure."""


class SessionClosedError(RelayError):
    """Operation attempted on a closed relay session."""


class PublishError(RelayError):
    """No relay accepted a published event."""

    def __init__(self, acks: list[Any]):
        self.acks = acks
        reasons = "; ".join(f"{a.relay}: {a.reason}" for a in acks) or "no relays"
        super().__init__(f"event rejected by all relays ({reasons})")


# ── marketplace_events ───────────────────────────────
class SchemaError(FedstrError, ValueError):
    """Event tags do not match the expected schema."""

    def __init__(self, tag: str, message: str):
        self.tag = tag
        super().__init__(f"tag {tag!r}: {message}")


class WrongKindError(FedstrError, ValueError):
    """Event kind is outside the band a parser accepts."""


# ── model_store ──────────────────────────────────────
class StorageError(FedstrError):
    """Backend could not store a blob."""


class RetrievalError(StorageError):
    """Blob could not be fetched (missing, unreachable, too large)."""


class IntegrityError(StorageError):
    """Fetched bytes do not hash to the referenced digest."""


# ── ml_engine ────────────────────────────────────────
class ModelError(FedstrError, ValueError):
    """Invalid model spec, layout or data dimensions."""


class FormatError(FedstrError, ValueError):
    """Serialized parameter blob is malformed."""


class DivergenceError(FedstrError):
    """Inner optimization hit a non-finite loss."""

    def __init__(self, message: str, last_params: Any):
        self.last_params = last_params
        super().__init__(message)


# ── payments ─────────────────────────────────────────
class PaymentError(FedstrError, ValueError):
    """Invalid payment request or invoice."""


# ── customer ─────────────────────────────────────────
class ConfigError(FedstrError, ValueError):
    """Invalid customer, provider or demo configuration."""


class InsufficientProvidersError(FedstrError):
    """Discovery found fewer providers than required."""


class JobFailedError(FedstrError):
    """A single provider assignment failed.

    ``category`` is one of ``timeout``, ``integrity``, ``validation``,
    ``provider-error``, ``payment`` or ``retrieval``.
    """

    def __init__(self, category: str, reason: str):
        self.category = category
        self.reason = reason
        super().__init__(f"{category}: {reason}")


class ReassignmentExhaustedError(FedstrError):
    """No replacement provider produced a valid output within the attempt budget."""


class InvalidTransitionError(FedstrError):
    """RoundState phase change not allowed by the job lifecycle."""


class TrainingAbortedError(FedstrError):
    """Training stopped before completion; carries the partial round log."""

    def __init__(self, message: str, round_log: Any):
        self.round_log = round_log
        super().__init__(message)


# ── provider ─────────────────────────────────────────
class ProviderCrashed(FedstrError):  # noqa: N818
    """Injected provider crash used by the fault-injection demo."""
