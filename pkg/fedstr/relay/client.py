"""Relay client sessions and a multi-relay pool.

A ``ClientSession`` owns one websocket and a reader task that routes
OK / EVENT / EOSE / NOTICE frames to waiting publishers and subscription
queues. ``RelayPool`` fans out over several sessions and merges their
streams with dedup by event id.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import secrets
from collections.abc import AsyncIterator, Callable
from dataclasses import dataclass
from enum import Enum

import websockets
from websockets.exceptions import ConnectionClosed

from fedstr.config import settings
from fedstr.errors import PublishError, RelayError, SessionClosedError
from fedstr.nostr.event import Event, verify_event
from fedstr.nostr.filters import Filter, matches_any

logger = logging.getLogger(__name__)

PUBLISH_TIMEOUT = 10.0
MAX_RETRIES = 3
RETRY_BACKOFF_BASE = 1.5  # seconds


class StreamSignal(Enum):
    EOSE = "eose"
    DISCONNECTED = "disconnected"


StreamItem = Event | StreamSignal


@dataclass(frozen=True)
class PublishAck:
    relay: str
    accepted: bool
    reason: str = ""
    transport_error: bool = False


class Subscription:
    """Ordered stream of stored events, ``EOSE``, then live events.

    Ends after yielding ``DISCONNECTED`` when the connection drops.
    """

    def __init__(self, session: ClientSession, sub_id: str, filters: list[Filter]):
        self.session = session
        self.sub_id = sub_id
        self.filters = filters
        self.queue: asyncio.Queue[StreamItem] = asyncio.Queue()
        self._finished = False

    def __aiter__(self) -> AsyncIterator[StreamItem]:
        return self

    async def __anext__(self) -> StreamItem:
        if self._finished:
            raise StopAsyncIteration
        item = await self.queue.get()
        if item is StreamSignal.DISCONNECTED:
            self._finished = True
        return item

    async def close(self) -> None:
        await self.session.unsubscribe(self.sub_id)


class ClientSession:
    """Single-owner connection to one relay."""

    def __init__(self, url: str, websocket):
        self.url = url
        self._ws = websocket
        self._pending: dict[str, asyncio.Future[PublishAck]] = {}
        self._subs: dict[str, Subscription] = {}
        self._closed = False
        self._reader = asyncio.create_task(self._read_loop())

    @property
    def closed(self) -> bool:
        return self._closed

    @classmethod
    async def connect(cls, url: str, max_message_bytes: int | None = None) -> ClientSession:
        """Open a session.

        Raises:
            RelayError: If the relay cannot be reached.
        """
        max_size = (max_message_bytes or settings.relay_max_message_bytes) * 4
        try:
            ws = await websockets.connect(url, max_size=max_size, open_timeout=10)
        except (OSError, websockets.exceptions.WebSocketException, TimeoutError) as e:
            raise RelayError(f"cannot connect to {url}: {e}") from e
        logger.debug("Connected to relay %s", url)
        return cls(url, ws)

    async def _send(self, message: list) -> None:
        if self._closed:
            raise SessionClosedError(f"session to {self.url} is closed")
        try:
            await self._ws.send(json.dumps(message, separators=(",", ":"), ensure_ascii=False))
        except ConnectionClosed as e:
            self._mark_closed()
            raise SessionClosedError(f"session to {self.url} closed: {e}") from e

    async def publish(self, e: Event, timeout: float = PUBLISH_TIMEOUT) -> PublishAck:
        """Send EVENT and wait for the relay's OK verdict.

        Raises:
            SessionClosedError: If the session is or becomes closed.
        """
        future: asyncio.Future[PublishAck] = asyncio.get_running_loop().create_future()
        self._pending[e.id] = future
        try:
            await self._send(["EVENT", e.to_wire()])
            return await asyncio.wait_for(future, timeout)
        except TimeoutError as exc:
            raise RelayError(f"no OK from {self.url} for {e.id[:12]}…") from exc
        finally:
            self._pending.pop(e.id, None)

    async def subscribe(self, filters: list[Filter], sub_id: str | None = None) -> Subscription:
        sub_id = sub_id or secrets.token_hex(8)
        sub = Subscription(self, sub_id, filters)
        self._subs[sub_id] = sub
        await self._send(["REQ", sub_id, *[f.to_wire() for f in filters]])
        return sub

    async def unsubscribe(self, sub_id: str) -> None:
        if self._subs.pop(sub_id, None) is not None and not self._closed:
            with contextlib.suppress(SessionClosedError):
                await self._send(["CLOSE", sub_id])

    async def close(self) -> None:
        if not self._closed:
            await self._ws.close()
        self._reader.cancel()
        with contextlib.suppress(asyncio.CancelledError):
            await self._reader
        self._mark_closed()

    def _mark_closed(self) -> None:
        if self._closed:
            return
        self._closed = True
        for future in self._pending.values():
            if not future.done():
                future.set_exception(SessionClosedError(f"session to {self.url} closed"))
        for sub in self._subs.values():
            sub.queue.put_nowait(StreamSignal.DISCONNECTED)

    async def _read_loop(self) -> None:
        try:
            async for raw in self._ws:
                self._dispatch(raw)
        except ConnectionClosed:
            pass
        finally:
            self._mark_closed()

    def _dispatch(self, raw: str | bytes) -> None:
        try:
            message = json.loads(raw)
        except ValueError:
            logger.warning("Unparseable frame from %s", self.url)
            return
        if not isinstance(message, list) or not message or not isinstance(message[0], str):
            logger.warning("Malformed frame from %s", self.url)
            return
        verb = message[0]
        # every verb but NOTICE keys on an event or subscription id
        if verb != "NOTICE" and (len(message) < 2 or not isinstance(message[1], str)):
            logger.warning("Malformed %s frame from %s", verb, self.url)
            return

        if verb == "OK" and len(message) >= 3:
            future = self._pending.get(message[1])
            if future and not future.done():
                reason = message[3] if len(message) > 3 else ""
                future.set_result(PublishAck(self.url, bool(message[2]), reason))
        elif verb == "EVENT" and len(message) == 3:
            sub = self._subs.get(message[1])
            if sub is None:
                return
            try:
                event = Event.model_validate(message[2])
            except ValueError:
                logger.warning("Malformed event from %s", self.url)
                return
            # relays are untrusted: drop forged or unrequested events
            if matches_any(event, sub.filters) and verify_event(event):
                sub.queue.put_nowait(event)
        elif verb == "EOSE" and len(message) == 2:
            sub = self._subs.get(message[1])
            if sub is not None:
                sub.queue.put_nowait(StreamSignal.EOSE)
        elif verb == "NOTICE":
            logger.info("NOTICE from %s: %s", self.url, message[1:] or "")
        elif verb == "CLOSED" and len(message) >= 2:
            sub = self._subs.pop(message[1], None)
            if sub is not None:
                sub.queue.put_nowait(StreamSignal.DISCONNECTED)


async def client_connect(url: str) -> ClientSession:
    return await ClientSession.connect(url)


async def client_publish(session: ClientSession, e: Event) -> PublishAck:
    return await session.publish(e)


async def client_subscribe(session: ClientSession, filters: list[Filter]) -> Subscription:
    return await session.subscribe(filters)


async def multi_relay_publish(sessions: list[ClientSession], e: Event) -> list[PublishAck]:
    """Best-effort fan-out; succeeds when at least one relay accepts.

    Raises:
        PublishError: If every relay rejected the event or was unreachable.
    """
    if not sessions:
        raise PublishError([])

    async def one(session: ClientSession) -> PublishAck:
        try:
            return await session.publish(e)
        except RelayError as exc:
            return PublishAck(session.url, False, f"transport: {exc}", transport_error=True)

    acks = list(await asyncio.gather(*(one(s) for s in sessions)))
    if not any(a.accepted for a in acks):
        raise PublishError(acks)
    for ack in acks:
        if not ack.accepted:
            logger.warning("Relay %s did not accept %s: %s", ack.relay, e.id[:12], ack.reason)
    return acks


# ── Pool ─────────────────────────────────────────────
class RelayPool:
    """Sessions to a list of relay URLs, tolerant of dead relays."""

    def __init__(self, urls: list[str]):
        if not urls:
            raise RelayError("at least one relay URL is required")
        self.urls = list(dict.fromkeys(urls))
        self._sessions: dict[str, ClientSession] = {}

    @property
    def sessions(self) -> list[ClientSession]:
        return [s for s in self._sessions.values() if not s.closed]

    async def connect(self) -> RelayPool:
        """Connect to every URL, retrying with backoff.

        Raises:
            RelayError: If no relay could be reached.
        """
        for url in self.urls:
            if url in self._sessions and not self._sessions[url].closed:
                continue
            for attempt in range(1, MAX_RETRIES + 1):
                try:
                    self._sessions[url] = await ClientSession.connect(url)
                    break
                except RelayError as e:
                    if attempt < MAX_RETRIES:
                        wait_time = RETRY_BACKOFF_BASE**attempt
                        logger.warning(
                            "Relay connect attempt %d/%d failed: %s. Retrying in %.1fs",
                            attempt, MAX_RETRIES, e, wait_time,
                        )
                        await asyncio.sleep(wait_time)
                    else:
                        logger.error("Giving up on relay %s: %s", url, e)
        if not self.sessions:
            raise RelayError(f"no relay reachable among {self.urls}")
        return self

    async def publish(self, e: Event, urls: list[str] | None = None) -> list[PublishAck]:
        """Publish to all sessions, or to the sessions for ``urls`` only."""
        if urls is None:
            targets = self.sessions
        else:
            wanted = set(urls)
            targets = [s for s in self.sessions if s.url in wanted]
        return await multi_relay_publish(targets, e)

    async def stream(self, filters: list[Filter]) -> PooledSubscription:
        subs = []
        for session in self.sessions:
            try:
                subs.append(await session.subscribe(filters))
            except SessionClosedError as e:
                logger.warning("Cannot subscribe on %s: %s", session.url, e)
        if not subs:
            raise RelayError("no relay session available for subscription")
        return PooledSubscription(subs)

    async def query(self, filters: list[Filter], timeout: float = 5.0) -> list[Event]:
        """Stored events matching ``filters`` across relays, gathered until every EOSE."""
        stream = await self.stream(filters)
        events: list[Event] = []
        try:
            async with asyncio.timeout(timeout):
                async for item in stream:
                    if item is StreamSignal.EOSE or item is StreamSignal.DISCONNECTED:
                        break
                    events.append(item)
        except TimeoutError:
            logger.warning("Query timed out after %.1fs with %d events", timeout, len(events))
        finally:
            await stream.close()
        return events

    async def wait_for(
        self,
        filters: list[Filter],
        timeout: float,
        predicate: Callable[[Event], bool] | None = None,
    ) -> Event | None:
        """First stored or live event matching ``filters`` (and ``predicate``), or None."""
        stream = await self.stream(filters)
        try:
            async with asyncio.timeout(timeout):
                async for item in stream:
                    if isinstance(item, Event) and (predicate is None or predicate(item)):
                        return item
                    if item is StreamSignal.DISCONNECTED:
                        return None
        except TimeoutError:
            return None
        finally:
            await stream.close()
        return None

    async def close(self) -> None:
        for session in list(self._sessions.values()):
            with contextlib.suppress(Exception):
                await session.close()
        self._sessions.clear()


class PooledSubscription:
    """Merged stream over several relays with dedup by event id.

    Yields ``EOSE`` once every relay has sent its marker and
    ``DISCONNECTED`` once every relay has dropped.
    """

    def __init__(self, subs: list[Subscription]):
        self._subs = subs
        self._queue: asyncio.Queue[StreamItem] = asyncio.Queue()
        self._seen: set[str] = set()
        self._eose_pending = len(subs)
        self._alive = len(subs)
        self._pumps = [asyncio.create_task(self._pump(s)) for s in subs]

    async def _pump(self, sub: Subscription) -> None:
        eose_seen = False
        async for item in sub:
            if isinstance(item, Event):
                if item.id in self._seen:
                    continue
                self._seen.add(item.id)
                self._queue.put_nowait(item)
            elif item is StreamSignal.EOSE:
                if not eose_seen:
                    eose_seen = True
                    self._eose_settled()
            else:
                # a relay that drops before EOSE no longer holds back the others
                self._alive -= 1
                if not eose_seen:
                    eose_seen = True
                    self._eose_settled()
                if self._alive == 0:
                    self._queue.put_nowait(StreamSignal.DISCONNECTED)

    def _eose_settled(self) -> None:
        self._eose_pending -= 1
        if self._eose_pending == 0 and self._alive > 0:
            self._queue.put_nowait(StreamSignal.EOSE)

    def __aiter__(self) -> AsyncIterator[StreamItem]:
        return self

    async def __anext__(self) -> StreamItem:
        return await self._queue.get()

    async def get(self, timeout: float) -> StreamItem | None:
        """Next item or None after ``timeout`` seconds."""
        try:
            return await asyncio.wait_for(self._queue.get(), timeout)
        except TimeoutError:
            return None

    async def close(self) -> None:
        for pump in self._pumps:
            pump.cancel()
        for sub in self._subs:
            with contextlib.suppress(Exception):
                await sub.close()
