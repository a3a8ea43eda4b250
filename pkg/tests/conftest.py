"""Pytest fixtures shared across all test modules."""

import asyncio
import contextlib

import pytest

from fedstr.customer import CustomerConfig
from fedstr.ml import Dataset, ModelFamily, ModelSpec, make_linear
from fedstr.nostr.keys import Keypair, generate_keypair
from fedstr.provider import FaultInjection, ProviderConfig, ProviderDaemon
from fedstr.relay.server import relay_serve
from fedstr.relay.store import RelayStore
from fedstr.storage import FileBackend, ModelStore


@pytest.fixture
def keypair() -> Keypair:
    """Return a deterministic keypair."""
    return generate_keypair(bytes([1]) * 32)


@pytest.fixture
def other_keypair() -> Keypair:
    """Return a second deterministic keypair."""
    return generate_keypair(bytes([2]) * 32)


@pytest.fixture
def store(tmp_path) -> ModelStore:
    """Return a model store rooted in a temporary directory."""
    return ModelStore(FileBackend(tmp_path / "store"))


@pytest.fixture
def linear_dataset() -> Dataset:
    """Return a small synthetic regression problem (d=3)."""
    return make_linear(n=300, d=3, noise=0.1, seed=7)


@pytest.fixture
def linear_spec() -> ModelSpec:
    return ModelSpec(family=ModelFamily.LINEAR_REGRESSION, input_dim=3)


@pytest.fixture
async def relay(tmp_path):
    """Run a loopback relay on a free port; yields its handle."""
    handle = await relay_serve("127.0.0.1:0", RelayStore(tmp_path / "relay.jsonl"))
    yield handle
    await handle.stop()


@pytest.fixture
async def providers(relay, tmp_path):
    """Factory starting in-process provider daemons against ``relay``.

    ``await providers(n, faults=...)`` returns the daemons; every daemon is
    stopped at teardown.
    """
    started: list[tuple[ProviderDaemon, asyncio.Event, asyncio.Task]] = []

    async def start(
        n: int = 1, faults: FaultInjection | None = None, **overrides
    ) -> list[ProviderDaemon]:
        daemons = []
        for _ in range(n):
            index = len(started)
            values = dict(
                keypair=generate_keypair(),
                relays=[relay.url],
                name=f"test-provider-{index}",
                model_root=str(tmp_path / f"provider_{index}"),
                payment_timeout=5.0,
                progress_interval=0.2,
                faults=faults or FaultInjection(),
            )
            values.update(overrides)
            cfg = ProviderConfig(**values)
            daemon = ProviderDaemon(cfg)
            stop = asyncio.Event()
            task = asyncio.create_task(daemon.run(stop))
            await asyncio.wait_for(daemon.ready.wait(), timeout=5)
            started.append((daemon, stop, task))
            daemons.append(daemon)
        # announcements are published right after the subscription is ready
        await asyncio.sleep(0.2)
        return daemons

    yield start

    for daemon, stop, task in started:
        stop.set()
    for daemon, _, task in started:
        with contextlib.suppress(Exception):
            await asyncio.wait_for(task, timeout=5)
        await daemon.close()


@pytest.fixture
def customer_config(relay, tmp_path, linear_dataset, linear_spec):
    """Factory for customer configs against ``relay`` with short timeouts."""

    def make(**overrides) -> CustomerConfig:
        values = dict(
            keypair=generate_keypair(),
            relays=[relay.url],
            num_pr=2,
            num_jobs=2,
            dataset=linear_dataset,
            model=linear_spec,
            feedback_interval=0.1,
            job_timeout=4.0,
            discovery_retry_window=2.0,
            model_root=str(tmp_path / "customer"),
            log_out=str(tmp_path / "rounds.jsonl"),
        )
        values.update(overrides)
        return CustomerConfig(**values)

    return make
