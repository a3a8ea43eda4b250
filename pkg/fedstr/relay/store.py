"""In-memory event store with dedup and addressable-event replacement."""

from __future__ import annotations

import asyncio
import json
import logging
import time
from enum import StrEnum
from pathlib import Path

from fedstr.nostr.event import Event
from fedstr.nostr.filters import Filter, matches_filter

logger = logging.getLogger(__name__)

ADDRESSABLE_MIN = 30000
ADDRESSABLE_MAX = 39999


class StoreOutcome(StrEnum):
    STORED = "stored"
    DUPLICATE = "duplicate"
    SUPERSEDED = "superseded"  # stored, but an addressable event already newer


def is_addressable(kind: int) -> bool:
    return ADDRESSABLE_MIN <= kind <= ADDRESSABLE_MAX


def _address(e: Event) -> tuple[str, int, str]:
    return e.pubkey, e.kind, e.first_tag_value("d") or ""


def _newer(a: Event, b: Event) -> bool:
    """Whether ``a`` replaces ``b``: later created_at, ties to the smaller id."""
    if a.created_at != b.created_at:
        return a.created_at > b.created_at
    return a.id < b.id


class RelayStore:
    """Append-only event set keyed by id.

    Writes are serialized by a lock; reads run without it since the store
    lives on a single event loop.
    """

    def __init__(self, log_file: str | Path | None = None):
        self._events: dict[str, Event] = {}
        self._replaceable_index: dict[tuple[str, int, str], str] = {}
        self._lock: asyncio.Lock | None = None
        self._log_path = Path(log_file) if log_file else None
        if self._log_path:
            self._log_path.parent.mkdir(parents=True, exist_ok=True)

    def __len__(self) -> int:
        return len(self._events)

    def __contains__(self, event_id: str) -> bool:
        return event_id in self._events

    @property
    def lock(self) -> asyncio.Lock:
        if self._lock is None:
            self._lock = asyncio.Lock()
        return self._lock

    async def add(self, e: Event) -> StoreOutcome:
        """Store a verified event."""
        async with self.lock:
            if e.id in self._events:
                return StoreOutcome.DUPLICATE
            self._events[e.id] = e
            self._append_log(e)
            if not is_addressable(e.kind):
                return StoreOutcome.STORED
            address = _address(e)
            current_id = self._replaceable_index.get(address)
            if current_id is None or _newer(e, self._events[current_id]):
                self._replaceable_index[address] = e.id
                return StoreOutcome.STORED
            return StoreOutcome.SUPERSEDED

    def _append_log(self, e: Event) -> None:
        if self._log_path is None:
            return
        record = {"received_at": time.time(), "event": e.to_wire()}
        with self._log_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, separators=(",", ":"), ensure_ascii=False) + "\n")

    def _visible(self, e: Event) -> bool:
        if not is_addressable(e.kind):
            return True
        return self._replaceable_index.get(_address(e)) == e.id

    def query(self, filters: list[Filter]) -> list[Event]:
        """Matching visible events, newest first, each filter capped by its limit."""
        ordered = sorted(
            (e for e in self._events.values() if self._visible(e)),
            key=lambda e: (-e.created_at, e.id),
        )
        selected: dict[str, Event] = {}
        for f in filters:
            taken = 0
            for e in ordered:
                if f.limit is not None and taken >= f.limit:
                    break
                if matches_filter(e, f):
                    selected.setdefault(e.id, e)
                    taken += 1
        return sorted(selected.values(), key=lambda e: (-e.created_at, e.id))

    def is_current(self, e: Event) -> bool:
        """Whether a just-stored event should be broadcast to live subscribers."""
        return e.id in self._events and self._visible(e)
