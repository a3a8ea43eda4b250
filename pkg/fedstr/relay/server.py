"""FastAPI relay. Speaks the NOSTR wire protocol over a websocket at ``/``.

Endpoints:
    WS  /: EVENT / REQ / CLOSE client messages
    GET /health: store and session counters
"""

from __future__ import annotations

import asyncio
import json
import logging
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from typing import Any

import uvicorn
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from pydantic import BaseModel, Field, ValidationError

from fedstr import __version__
from fedstr.config import settings, split_bind
from fedstr.nostr.event import Event, verify_event
from fedstr.nostr.filters import Filter, matches_any
from fedstr.relay.store import RelayStore, StoreOutcome

logger = logging.getLogger(__name__)


# ── Sessions ─────────────────────────────────────────
@dataclass(eq=False)
class RelaySession:
    """One connected client; outbound frames go through a queue to a single writer."""

    websocket: WebSocket
    subscriptions: dict[str, list[Filter]] = field(default_factory=dict)
    outbound: asyncio.Queue[str] = field(default_factory=asyncio.Queue)

    def send(self, message: list[Any]) -> None:
        self.outbound.put_nowait(json.dumps(message, separators=(",", ":"), ensure_ascii=False))


class RelayHub:
    """Store plus live sessions; routes inbound messages and broadcasts."""

    def __init__(self, store: RelayStore, max_message_bytes: int):
        self.store = store
        self.max_message_bytes = max_message_bytes
        self.sessions: set[RelaySession] = set()

    async def handle(self, session: RelaySession, raw: str) -> None:
        try:
            message = json.loads(raw)
        except json.JSONDecodeError:
            session.send(["NOTICE", "error: message is not JSON"])
            return
        if not isinstance(message, list) or not message or not isinstance(message[0], str):
            session.send(["NOTICE", "error: malformed message"])
            return

        verb = message[0]
        if verb == "EVENT" and len(message) == 2:
            await self._on_event(session, message[1], len(raw.encode("utf-8")))
        elif verb == "REQ" and len(message) >= 2 and isinstance(message[1], str):
            self._on_req(session, message[1], message[2:])
        elif verb == "CLOSE" and len(message) == 2 and isinstance(message[1], str):
            session.subscriptions.pop(message[1], None)
        else:
            session.send(["NOTICE", f"error: unsupported or malformed {verb!r} message"])

    async def _on_event(self, session: RelaySession, payload: Any, size: int) -> None:
        event_id = payload.get("id", "") if isinstance(payload, dict) else ""
        if size > self.max_message_bytes:
            session.send(["OK", event_id, False, "invalid: event too large"])
            return
        try:
            event = Event.model_validate(payload)
        except ValidationError:
            if event_id:
                session.send(["OK", event_id, False, "invalid: malformed event"])
            else:
                session.send(["NOTICE", "error: malformed event"])
            return
        if not verify_event(event):
            session.send(["OK", event.id, False, "invalid: signature"])
            return

        outcome = await self.store.add(event)
        if outcome is StoreOutcome.DUPLICATE:
            session.send(["OK", event.id, True, "duplicate: already have this event"])
            return
        session.send(["OK", event.id, True, ""])
        if outcome is StoreOutcome.STORED:
            self._broadcast(event)

    def _on_req(self, session: RelaySession, sub_id: str, raw_filters: list[Any]) -> None:
        try:
            filters = [Filter.from_wire(f) for f in raw_filters]
        except (ValueError, ValidationError) as e:
            session.send(["NOTICE", f"error: invalid filter in {sub_id!r}: {e}"])
            return
        session.subscriptions[sub_id] = filters
        for event in self.store.query(filters):
            session.send(["EVENT", sub_id, event.to_wire()])
        session.send(["EOSE", sub_id])

    def _broadcast(self, event: Event) -> None:
        wire = event.to_wire()
        for other in self.sessions:
            for sub_id, filters in other.subscriptions.items():
                if matches_any(event, filters):
                    other.send(["EVENT", sub_id, wire])


# ── Response models ──────────────────────────────────
class HealthResponse(BaseModel):
    """Response body for the /health endpoint."""

    status: str = "healthy"
    version: str = __version__
    stored_events: int = Field(description="Events currently held by the store")
    sessions: int = Field(description="Connected websocket sessions")


# ── App factory ──────────────────────────────────────
def create_relay_app(
    store: RelayStore | None = None,
    max_message_bytes: int | None = None,
) -> FastAPI:
    """Build a relay application around ``store``."""
    hub = RelayHub(
        store or RelayStore(settings.relay_log_file),
        max_message_bytes or settings.relay_max_message_bytes,
    )

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        logger.info("🚀 FEDSTR relay starting (max message %d bytes)", hub.max_message_bytes)
        yield
        logger.info("👋 Relay shutting down with %d stored events", len(hub.store))

    app = FastAPI(title="FEDSTR relay", version=__version__, lifespan=lifespan)
    app.state.hub = hub

    @app.websocket("/")
    async def relay_socket(websocket: WebSocket) -> None:
        await websocket.accept()
        session = RelaySession(websocket)
        hub.sessions.add(session)

        async def writer() -> None:
            while True:
                await websocket.send_text(await session.outbound.get())

        writer_task = asyncio.create_task(writer())
        try:
            while True:
                raw = await websocket.receive_text()
                await hub.handle(session, raw)
        except WebSocketDisconnect:
            pass
        except Exception as e:
            logger.warning("Relay session error: %s", e)
        finally:
            hub.sessions.discard(session)
            writer_task.cancel()

    @app.get("/health", response_model=HealthResponse)
    async def health_check() -> HealthResponse:
        return HealthResponse(stored_events=len(hub.store), sessions=len(hub.sessions))

    if settings.otel_console_export:
        try:
            from opentelemetry.instrumentation.fastapi import FastAPIInstrumentor

            FastAPIInstrumentor.instrument_app(app)
        except ImportError:
            pass

    return app


# ── Serving ──────────────────────────────────────────
@dataclass
class RelayHandle:
    """A relay running as a task on the current loop."""

    server: uvicorn.Server
    task: asyncio.Task
    host: str
    port: int

    @property
    def url(self) -> str:
        return f"ws://{self.host}:{self.port}"

    async def stop(self) -> None:
        self.server.should_exit = True
        await self.task


async def relay_serve(
    bind_address: str,
    store: RelayStore | None = None,
    max_message_bytes: int | None = None,
) -> RelayHandle:
    """Start a relay on ``bind_address`` (port 0 picks a free port).

    Raises:
        OSError: If the address cannot be bound.
    """
    host, port = split_bind(bind_address)
    app = create_relay_app(store, max_message_bytes)
    config = uvicorn.Config(
        app,
        host=host,
        port=port,
        log_level="warning",
        ws_max_size=(max_message_bytes or settings.relay_max_message_bytes) * 2,
        lifespan="on",
    )
    server = uvicorn.Server(config)
    task = asyncio.create_task(server.serve())
    while not server.started:
        if task.done():
            task.result()
            raise OSError(f"relay failed to bind {bind_address}")
        await asyncio.sleep(0.01)
    bound_port = server.servers[0].sockets[0].getsockname()[1]
    logger.info("Relay listening on ws://%s:%d", host, bound_port)
    return RelayHandle(server=server, task=task, host=host, port=bound_port)
