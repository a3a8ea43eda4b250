"""Event construction, canonical ids, Schnorr signing and verification."""

from __future__ import annotations

import hashlib
import json
import time

import coincurve
from pydantic import BaseModel, ConfigDict, Field, field_validator

from fedstr.errors import SignerMismatchError
from fedstr.nostr.keys import Keypair


class EventTemplate(BaseModel):
    """Unsigned event fields."""

    model_config = ConfigDict(frozen=True)

    pubkey: str
    created_at: int
    kind: int = Field(ge=0, le=65535)
    tags: list[list[str]] = Field(default_factory=list)
    content: str = ""

    @field_validator("tags")
    @classmethod
    def _non_empty_tags(cls, tags: list[list[str]]) -> list[list[str]]:
        if any(len(t) == 0 for t in tags):
            raise ValueError("every tag needs at least one element")
        return tags


class Event(EventTemplate):
    """A signed event; the universal wire unit.

    Field formats are not enforced here so that malformed events coming
    off the wire can still be represented and rejected by ``verify_event``.
    """

    id: str
    sig: str

    def template(self) -> EventTemplate:
        return EventTemplate(
            pubkey=self.pubkey,
            created_at=self.created_at,
            kind=self.kind,
            tags=self.tags,
            content=self.content,
        )

    def to_wire(self) -> dict:
        return self.model_dump()

    def to_json(self) -> str:
        return json.dumps(self.to_wire(), separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, raw: str) -> Event:
        return cls.model_validate_json(raw)

    # ── Tag helpers ──────────────────────────────────
    def tag_values(self, name: str) -> list[list[str]]:
        """All tags named ``name`` (without the name element)."""
        return [t[1:] for t in self.tags if t[0] == name]

    def first_tag(self, name: str) -> list[str] | None:
        for t in self.tags:
            if t[0] == name:
                return t[1:]
        return None

    def first_tag_value(self, name: str) -> str | None:
        tag = self.first_tag(name)
        return tag[0] if tag else None


def canonical_serialization(t: EventTemplate) -> bytes:
    """``[0, pubkey, created_at, kind, tags, content]`` without whitespace."""
    data = [0, t.pubkey, t.created_at, t.kind, t.tags, t.content]
    return json.dumps(data, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def compute_event_id(t: EventTemplate) -> bytes:
    """SHA-256 of the canonical serialization."""
    return hashlib.sha256(canonical_serialization(t)).digest()


def make_template(
    keypair: Keypair,
    kind: int,
    tags: list[list[str]] | None = None,
    content: str = "",
    created_at: int | None = None,
) -> EventTemplate:
    return EventTemplate(
        pubkey=keypair.pubkey_hex,
        created_at=int(time.time()) if created_at is None else created_at,
        kind=kind,
        tags=tags or [],
        content=content,
    )


def sign_event(t: EventTemplate, k: Keypair) -> Event:
    """Compute the id and sign it with ``k``.

    Raises:
        SignerMismatchError: If ``t.pubkey`` is not ``k``'s public key.
    """
    if t.pubkey != k.pubkey_hex:
        raise SignerMismatchError(
            f"template pubkey {t.pubkey[:12]}… does not match signer {k.pubkey_hex[:12]}…"
        )
    digest = compute_event_id(t)
    sig = k.private_key.sign_schnorr(digest)
    return Event(**t.model_dump(), id=digest.hex(), sig=sig.hex())


def verify_event(e: Event) -> bool:
    """True iff the id recomputes from the fields and the signature verifies."""
    try:
        if compute_event_id(e.template()).hex() != e.id:
            return False
        pubkey = bytes.fromhex(e.pubkey)
        sig = bytes.fromhex(e.sig)
        if len(pubkey) != 32 or len(sig) != 64:
            return False
        return coincurve.PublicKeyXOnly(pubkey).verify(sig, bytes.fromhex(e.id))
    except Exception:
        return False
