"""Dual-key NOSTR identities (BIP-340 x-only keys on secp256k1)."""

from __future__ import annotations

import logging
import os
import secrets
from dataclasses import dataclass, field
from pathlib import Path

import coincurve

from fedstr.errors import InvalidKeyError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Keypair:
    """A secret scalar and its x-only public key.

    The secret never leaves this object except through ``save_keypair``.
    """

    secret_key: bytes = field(repr=False)
    public_key: bytes

    @property
    def pubkey_hex(self) -> str:
        return self.public_key.hex()

    @property
    def private_key(self) -> coincurve.PrivateKey:
        return coincurve.PrivateKey(self.secret_key)

    def matches(self) -> bool:
        """Re-derive the public key and compare."""
        return derive_public_key(self.secret_key) == self.public_key


def derive_public_key(secret_key: bytes) -> bytes:
    """Return the 32-byte x-only public key for a secret scalar."""
    try:
        return coincurve.PrivateKey(secret_key).public_key_xonly.format()
    except Exception as e:
        raise InvalidKeyError(f"invalid secret key: {e}") from e


def generate_keypair(seed: bytes | None = None) -> Keypair:
    """Create a keypair, deterministically when ``seed`` is given.

    Args:
        seed: Optional 32-byte secret scalar. Must be nonzero and below the
            curve order.

    Raises:
        InvalidKeyError: If the seed is not a valid scalar.
    """
    if seed is None:
        seed = secrets.token_bytes(32)
    elif len(seed) != 32 or not any(seed):
        raise InvalidKeyError("seed must be a nonzero 32-byte scalar")
    return Keypair(secret_key=seed, public_key=derive_public_key(seed))


def keypair_from_hex(secret_hex: str) -> Keypair:
    try:
        raw = bytes.fromhex(secret_hex.strip())
    except ValueError as e:
        raise InvalidKeyError("secret key is not hex") from e
    return generate_keypair(raw)


def save_keypair(keypair: Keypair, path: str | Path) -> None:
    """Write the hex secret to ``path`` readable by the owner only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as f:
        f.write(keypair.secret_key.hex() + "\n")


def load_or_create_keypair(path: str | Path) -> Keypair:
    """Load a persistent identity, generating it on first use."""
    path = Path(path)
    if path.exists():
        return keypair_from_hex(path.read_text())
    keypair = generate_keypair()
    save_keypair(keypair, path)
    logger.info("Generated new keypair %s… at %s", keypair.pubkey_hex[:12], path)
    return keypair
