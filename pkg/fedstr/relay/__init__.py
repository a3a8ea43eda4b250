"""NOSTR relay server (FastAPI websocket) and relay client."""

from fedstr.relay.client import (
    ClientSession,
    PooledSubscription,
    PublishAck,
    RelayPool,
    StreamSignal,
    Subscription,
    client_connect,
    client_publish,
    client_subscribe,
    multi_relay_publish,
)
from fedstr.relay.server import RelayHandle, create_relay_app, relay_serve
from fedstr.relay.store import RelayStore, StoreOutcome

__all__ = [
    "ClientSession",
    "PooledSubscription",
    "PublishAck",
    "RelayHandle",
    "RelayPool",
    "RelayStore",
    "StoreOutcome",
    "StreamSignal",
    "Subscription",
    "client_connect",
    "client_publish",
    "client_subscribe",
    "create_relay_app",
    "multi_relay_publish",
    "relay_serve",
]
