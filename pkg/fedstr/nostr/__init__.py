"""NOSTR core: identities, signed events and subscription filters."""

from fedstr.nostr.event import (
    Event,
    EventTemplate,
    compute_event_id,
    make_template,
    sign_event,
    verify_event,
)
from fedstr.nostr.filters import Filter, matches_any, matches_filter
from fedstr.nostr.keys import Keypair, generate_keypair, load_or_create_keypair

__all__ = [
    "Event",
    "EventTemplate",
    "Filter",
    "Keypair",
    "compute_event_id",
    "generate_keypair",
    "load_or_create_keypair",
    "make_template",
    "matches_any",
    "matches_filter",
    "sign_event",
    "verify_event",
]
