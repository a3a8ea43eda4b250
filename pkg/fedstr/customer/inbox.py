"""Merged feedback/result stream routed to per-request queues."""

from __future__ import annotations

import asyncio
import contextlib
import logging
import time

from fedstr.events import FILE_METADATA_MARKER, JOB_FEEDBACK_KIND
from fedstr.nostr.event import Event
from fedstr.nostr.filters import Filter
from fedstr.relay.client import PooledSubscription, RelayPool, StreamSignal

logger = logging.getLogger(__name__)


def referenced_request(e: Event) -> str | None:
    for values in e.tag_values("e"):
        if values and not (len(values) > 2 and values[2] == FILE_METADATA_MARKER):
            return values[0]
    return None


class EventInbox:
    """One subscription per run; register a request id before publishing it.

    Events are delivered once (dedup by id) to the queue of the request they
    reference. A lost relay connection puts ``DISCONNECTED`` on every queue.
    """

    def __init__(self, pool: RelayPool, pubkey: str, result_kinds: list[int]):
        self.pool = pool
        self.pubkey = pubkey
        self.result_kinds = result_kinds
        self._queues: dict[str, asyncio.Queue] = {}
        self._seen: set[str] = set()
        self._stream: PooledSubscription | None = None
        self._pump: asyncio.Task | None = None

    async def start(self) -> None:
        since = int(time.time())
        filters = [
            Filter(kinds=[JOB_FEEDBACK_KIND], tag_queries={"p": [self.pubkey]}, since=since),
            Filter(kinds=self.result_kinds, tag_queries={"p": [self.pubkey]}, since=since),
        ]
        self._stream = await self.pool.stream(filters)
        self._pump = asyncio.create_task(self._run())

    def register(self, request_id: str) -> asyncio.Queue:
        queue: asyncio.Queue = asyncio.Queue()
        self._queues[request_id] = queue
        return queue

    def unregister(self, request_id: str) -> None:
        self._queues.pop(request_id, None)

    async def _run(self) -> None:
        async for item in self._stream:
            if item is StreamSignal.EOSE:
                continue
            if item is StreamSignal.DISCONNECTED:
                logger.error("Inbox lost every relay connection")
                for queue in self._queues.values():
                    queue.put_nowait(StreamSignal.DISCONNECTED)
                return
            if item.id in self._seen:
                continue
            self._seen.add(item.id)
            request_id = referenced_request(item)
            queue = self._queues.get(request_id or "")
            if queue is None:
                logger.debug("Unrouted event %s… (kind %d)", item.id[:12], item.kind)
                continue
            queue.put_nowait(item)

    async def close(self) -> None:
        if self._pump is not None:
            self._pump.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await self._pump
        if self._stream is not None:
            await self._stream.close()
