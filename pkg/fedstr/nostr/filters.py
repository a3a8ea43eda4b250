"""Subscription filters (NIP-01 REQ filter objects)."""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, ConfigDict

from fedstr.nostr.event import Event


class Filter(BaseModel):
    """Conjunctive over present fields, disjunctive within a field."""

    model_config = ConfigDict(frozen=True)

    ids: list[str] | None = None
    authors: list[str] | None = None
    kinds: list[int] | None = None
    tag_queries: dict[str, list[str]] | None = None
    since: int | None = None
    until: int | None = None
    limit: int | None = None

    def to_wire(self) -> dict[str, Any]:
        wire: dict[str, Any] = {}
        for name in ("ids", "authors", "kinds", "since", "until", "limit"):
            value = getattr(self, name)
            if value is not None:
                wire[name] = value
        for key, values in (self.tag_queries or {}).items():
            wire[f"#{key}"] = values
        return wire

    @classmethod
    def from_wire(cls, wire: dict[str, Any]) -> Filter:
        """Parse a wire filter object.

        Raises:
            ValueError: If the object is not a filter.
        """
        if not isinstance(wire, dict):
            raise ValueError("filter must be an object")
        tag_queries = {
            key[1:]: list(values)
            for key, values in wire.items()
            if key.startswith("#") and len(key) == 2
        }
        return cls(
            ids=wire.get("ids"),
            authors=wire.get("authors"),
            kinds=wire.get("kinds"),
            tag_queries=tag_queries or None,
            since=wire.get("since"),
            until=wire.get("until"),
            limit=wire.get("limit"),
        )


def _has_tag(e: Event, key: str, values: list[str]) -> bool:
    wanted = set(values)
    return any(len(t) > 1 and t[0] == key and t[1] in wanted for t in e.tags)


def matches_filter(e: Event, f: Filter) -> bool:
    """Whether ``e`` satisfies every field present in ``f``. ``limit`` is ignored."""
    if f.ids is not None and not any(e.id.startswith(p) for p in f.ids):
        return False
    if f.authors is not None and not any(e.pubkey.startswith(p) for p in f.authors):
        return False
    if f.kinds is not None and e.kind not in f.kinds:
        return False
    if f.since is not None and e.created_at < f.since:
        return False
    if f.until is not None and e.created_at > f.until:
        return False
    return all(_has_tag(e, key, values) for key, values in (f.tag_queries or {}).items())


def matches_any(e: Event, filters: list[Filter]) -> bool:
    return any(matches_filter(e, f) for f in filters)
