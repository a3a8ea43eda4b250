"""Service-provider daemon.

Per job request addressed to us:

    payment-required ─► wait for a valid zap receipt ─► processing
        ─► fetch shard + model ─► inner/outer optimization (heartbeat feedback)
        ─► put_model + re-verify ─► success ─► job result
        ─► watch for the result payment; blacklist the customer if it never comes

Failures inside a session become Feedback(error) and never take the daemon
down; only an injected crash does.
"""

from __future__ import annotations

import asyncio
import contextlib
import logging
import math
import time
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from urllib.parse import urlparse
from urllib.request import url2pathname

import numpy as np

from fedstr.config import settings
from fedstr.errors import (
    ConfigError,
    IntegrityError,
    ModelError,
    PaymentError,
    ProviderCrashed,
    PublishError,
    RelayError,
    SchemaError,
    WrongKindError,
)
from fedstr.events import (
    Discoverability,
    FeedbackStatus,
    FileMetadata,
    InlineModelState,
    JobFeedback,
    JobRequest,
    JobResult,
    ProviderSpec,
    Task,
    build_discoverability,
    build_feedback,
    build_file_metadata,
    build_job_result,
    parse_job_request,
    result_kind_for,
)
from fedstr.ml.data import Dataset
from fedstr.ml.models import LossSpec, ModelSpec, evaluate_loss
from fedstr.ml.optim import (
    InnerHyperparams,
    OuterState,
    RunOption,
    inner_optimize,
    outer_diloco,
    outer_fedavg,
)
from fedstr.ml.params import ModelParams, deserialize_params, serialize_params
from fedstr.nostr.event import Event
from fedstr.nostr.filters import Filter
from fedstr.observability import get_tracer
from fedstr.payments import (
    ZAP_RECEIPT_KIND,
    ZAP_REQUEST_KIND,
    Bolt11Stub,
    ExpectedPayment,
    StubLightningNode,
    validate_receipt,
)
from fedstr.provider.config import ProviderConfig
from fedstr.relay.client import RelayPool, StreamSignal
from fedstr.storage import FileBackend, ModelBlob, ModelStore, StorageRef

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)


class SessionPhase(StrEnum):
    AWAITING_PAYMENT = "AwaitingPayment"
    RUNNING = "Running"
    PUBLISHING = "Publishing"
    DONE = "Done"
    ABORTED = "Aborted"


@dataclass
class JobSession:
    job_request_id: str
    customer: str
    request: JobRequest | None = None
    phase: SessionPhase = SessionPhase.AWAITING_PAYMENT
    received_msats: int = 0


@dataclass
class _Progress:
    """Latest (epoch or step, loss) reported from the optimizer thread."""

    step: int = 0
    loss: float | None = None
    started: float = field(default_factory=time.monotonic)

    def update(self, step: int, value: float) -> None:
        self.step, self.loss = step, value

    def describe(self) -> str:
        elapsed = time.monotonic() - self.started
        if self.loss is None:
            return f"running for {elapsed:.0f}s"
        return f"step {self.step} loss {self.loss:.6g} after {elapsed:.0f}s"


class ProviderDaemon:
    """Announces capabilities and serves training jobs until stopped."""

    def __init__(
        self,
        cfg: ProviderConfig,
        pool: RelayPool | None = None,
        store: ModelStore | None = None,
    ):
        self.cfg = cfg
        self.keypair = cfg.keypair
        self.pool = pool or RelayPool(cfg.relays)
        self.store = store or ModelStore(FileBackend(cfg.model_root))
        self.wallet = StubLightningNode(self.keypair, self.pool, cfg.resolved_lnurl)
        self.sessions: dict[str, JobSession] = {}
        self._seen: set[str] = set()
        self._blacklist: set[str] = set()
        self._blacklist_lock = asyncio.Lock()
        self._capacity = asyncio.Semaphore(cfg.max_jobs)
        self._tasks: set[asyncio.Task] = set()
        self._jobs_completed = 0
        self._inner_jobs_completed = 0
        self._tampered = False
        self._crash: ProviderCrashed | None = None
        self._stop: asyncio.Event | None = None
        self.ready = asyncio.Event()

    @property
    def pubkey(self) -> str:
        return self.keypair.pubkey_hex

    # ── Announcement ─────────────────────────────────
    async def announce(self) -> str:
        """Publish (or replace) the kind 31990 announcement.

        Raises:
            ConfigError: If no job kinds are supported.
            PublishError: If every relay rejects the announcement.
        """
        if not self.cfg.supported_kinds:
            raise ConfigError("provider must support at least one job kind")
        await self.pool.connect()
        announcement = Discoverability(
            name=self.cfg.name,
            about=self.cfg.about,
            supported_kinds=self.cfg.supported_kinds,
            specs=[
                ProviderSpec(
                    hardware=self.cfg.hardware,
                    max_execution_time=self.cfg.max_execution_time,
                    model_dimensions_range=self.cfg.model_dimensions_range,
                )
            ],
            d_tag=self.cfg.d_tag,
            lnurl=self.cfg.resolved_lnurl,
        )
        event = build_discoverability(announcement, self.keypair)
        await self.pool.publish(event)
        logger.info(
            "📣 Announced provider %s… (kinds %s)", self.pubkey[:12], self.cfg.supported_kinds
        )
        return event.id

    # ── Blacklist ────────────────────────────────────
    async def blacklist_customer(self, pubkey: str) -> None:
        async with self._blacklist_lock:
            self._blacklist.add(pubkey)
        logger.warning("🚫 Blacklisted customer %s…", pubkey[:12])

    def is_blacklisted(self, pubkey: str) -> bool:
        return pubkey in self._blacklist

    async def close(self) -> None:
        await self.pool.close()
        self.store.close()

    # ── Serving ──────────────────────────────────────
    async def serve(self, stop: asyncio.Event | None = None) -> None:
        """Handle job requests until ``stop`` is set.

        Raises:
            ProviderCrashed: When an injected crash fires.
            RelayError: When every relay connection is lost.
        """
        await self.pool.connect()
        self._stop = stop or asyncio.Event()
        since = int(time.time())
        filters = [
            Filter(
                kinds=list(self.cfg.supported_kinds),
                tag_queries={"p": [self.pubkey]},
                since=since,
            ),
            Filter(kinds=[ZAP_REQUEST_KIND], tag_queries={"p": [self.pubkey]}, since=since),
        ]
        stream = await self.pool.stream(filters)
        self.ready.set()
        logger.info("🚀 Provider %s… serving on %s", self.pubkey[:12], self.pool.urls)
        try:
            while not self._stop.is_set():
                item = await stream.get(timeout=0.5)
                if item is None or item is StreamSignal.EOSE:
                    continue
                if item is StreamSignal.DISCONNECTED:
                    raise RelayError("lost every relay connection")
                self._dispatch(item)
        finally:
            await stream.close()
            for task in list(self._tasks):
                task.cancel()
            await asyncio.gather(*self._tasks, return_exceptions=True)
        if self._crash is not None:
            raise self._crash

    async def run(self, stop: asyncio.Event | None = None) -> None:
        """Subscribe first, then announce, then serve until ``stop`` is set."""
        serving = asyncio.create_task(self.serve(stop))
        ready = asyncio.create_task(self.ready.wait())
        await asyncio.wait({serving, ready}, return_when=asyncio.FIRST_COMPLETED)
        if serving.done():
            ready.cancel()
            serving.result()
            return
        try:
            await self.announce()
        except BaseException:
            serving.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await serving
            raise
        await serving

    def _dispatch(self, event: Event) -> None:
        if event.id in self._seen:
            return
        self._seen.add(event.id)
        if event.kind == ZAP_REQUEST_KIND:
            self._spawn(self._settle_zap(event))
            return
        if self.is_blacklisted(event.pubkey):
            logger.info("Ignoring request %s… from blacklisted customer", event.id[:12])
            return
        self._spawn(self.handle_request(event))

    async def _settle_zap(self, request: Event) -> None:
        try:
            await self.wallet.stub_pay(request)
        except (PaymentError, RelayError) as e:
            logger.warning("Zap request %s… not settled: %s", request.id[:12], e)

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._on_task_done)
        return task

    def _on_task_done(self, task: asyncio.Task) -> None:
        self._tasks.discard(task)
        if task.cancelled():
            return
        exc = task.exception()
        if isinstance(exc, ProviderCrashed):
            self._crash = exc
            if self._stop is not None:
                self._stop.set()
        elif exc is not None:
            logger.error("Session task failed: %s", exc, exc_info=exc)

    async def handle_request(self, event: Event) -> None:
        if self._capacity.locked():
            await self._feedback(event, FeedbackStatus.ERROR, "busy")
            return
        async with self._capacity:
            with tracer.start_as_current_span("provider.job") as span:
                span.set_attribute("fedstr.job_request_id", event.id)
                await self._run_session(event)

    async def _run_session(self, event: Event) -> None:
        session = JobSession(event.id, event.pubkey)
        self.sessions[event.id] = session
        try:
            request = parse_job_request(event, settings.inline_model_state_max_bytes)
        except (SchemaError, WrongKindError) as e:
            session.phase = SessionPhase.ABORTED
            await self._feedback(event, FeedbackStatus.ERROR, f"invalid request: {e}")
            return
        session.request = request
        logger.info(
            "📥 Job %s… from %s… (%s %s)",
            event.id[:12], event.pubkey[:12], request.task, request.run_option,
        )

        if not await self._collect_payment(event, request, session):
            return

        faults = self.cfg.faults
        # counts inner jobs only, so delegated outer jobs do not shift the crash round
        if (
            faults.crash_after_jobs is not None
            and request.task is Task.INNER
            and self._inner_jobs_completed >= faults.crash_after_jobs
        ):
            logger.error(
                "💥 Injected crash after %d completed inner jobs", self._inner_jobs_completed
            )
            raise ProviderCrashed(f"injected crash after {self._inner_jobs_completed} inner jobs")

        session.phase = SessionPhase.RUNNING
        await self._feedback(event, FeedbackStatus.PROCESSING, "job started")
        try:
            output, reported_loss, info = await self._compute(event, request)
            session.phase = SessionPhase.PUBLISHING
            result = await self._publish_output(event, request, output, reported_loss, info)
        except Exception as e:
            session.phase = SessionPhase.ABORTED
            logger.error("❌ Job %s… failed: %s", event.id[:12], e)
            await self._feedback(event, FeedbackStatus.ERROR, f"{type(e).__name__}: {e}")
            return

        session.phase = SessionPhase.DONE
        self._jobs_completed += 1
        if request.task is Task.INNER:
            self._inner_jobs_completed += 1
        logger.info("✅ Job %s… done, result %s…", event.id[:12], result.id[:12])

        if self.cfg.price_result_msats > 0:
            self._spawn(self._watch_result_payment(result, event.pubkey))

    # ── Payment ──────────────────────────────────────
    def _expected(self, amount: int, event_id: str) -> ExpectedPayment:
        return ExpectedPayment(
            recipient=self.pubkey,
            amount_msats=amount,
            lnurl=self.cfg.resolved_lnurl,
            event_id=event_id,
            wallet=self.wallet.wallet.pubkey_hex,
        )

    async def _wait_for_receipt(self, expected: ExpectedPayment, timeout: float) -> Event | None:
        filters = [
            Filter(
                kinds=[ZAP_RECEIPT_KIND],
                authors=[self.wallet.wallet.pubkey_hex],
                tag_queries={"p": [self.pubkey], "e": [expected.event_id]},
            )
        ]
        return await self.pool.wait_for(
            filters, timeout, predicate=lambda r: validate_receipt(r, expected).passed
        )

    async def _collect_payment(
        self, event: Event, request: JobRequest, session: JobSession
    ) -> bool:
        price = self.cfg.price_init_msats
        if price == 0:
            return True
        if request.bid_msats is not None and request.bid_msats < price:
            session.phase = SessionPhase.ABORTED
            await self._feedback(event, FeedbackStatus.ERROR, f"bid below price of {price} msats")
            return False

        await self._feedback(
            event,
            FeedbackStatus.PAYMENT_REQUIRED,
            "initial payment",
            amount=price,
            bolt11=Bolt11Stub.for_reference(price, event.id).render(),
            lnurl=self.cfg.resolved_lnurl,
        )
        expected = self._expected(price, event.id)
        receipt = await self._wait_for_receipt(expected, self.cfg.payment_timeout)
        if receipt is None:
            session.phase = SessionPhase.ABORTED
            logger.warning(
                "No payment for %s… within %.0fs", event.id[:12], self.cfg.payment_timeout
            )
            await self._feedback(event, FeedbackStatus.ERROR, "payment timeout")
            return False
        session.received_msats += validate_receipt(receipt, expected).amount_msats
        return True

    async def _watch_result_payment(self, result: Event, customer: str) -> None:
        expected = self._expected(self.cfg.price_result_msats, result.id)
        receipt = await self._wait_for_receipt(expected, self.cfg.payment_grace)
        if receipt is None:
            await self.blacklist_customer(customer)
        else:
            logger.info("💰 Result %s… paid", result.id[:12])

    # ── Computation ──────────────────────────────────
    async def _load_params(self, state: StorageRef | InlineModelState) -> ModelParams:
        if isinstance(state, InlineModelState):
            return deserialize_params(state.data)
        blob = await asyncio.to_thread(self.store.get_model, state)
        return deserialize_params(blob.data)

    async def _compute(
        self, event: Event, request: JobRequest
    ) -> tuple[ModelParams, float, list[tuple[str, str]]]:
        spec = ModelSpec.from_json(request.model_spec)
        lspec = LossSpec(kind=request.loss)
        theta = await self._load_params(request.model_state)
        if request.task is Task.INNER:
            return await self._inner(event, request, spec, lspec, theta)
        return await self._outer(request, theta)

    async def _fetch_shard(self, request: JobRequest) -> Dataset:
        if not request.data_set_url:
            raise ModelError("inner job carries no data_set")
        if request.data_set_sha256:
            ref = StorageRef(url=request.data_set_url, sha256=request.data_set_sha256)
            raw = await asyncio.to_thread(self.store.get_blob, ref)
        else:
            raw = await asyncio.to_thread(self.store.read_url, request.data_set_url)
        return Dataset.from_csv(raw)

    async def _inner(self, event, request, spec, lspec, theta):
        shard = await self._fetch_shard(request)
        hp = request.hyperparameters or InnerHyperparams()
        progress = _Progress()
        heartbeat = asyncio.create_task(self._heartbeat(event, progress))
        try:
            output = await asyncio.to_thread(
                inner_optimize, theta, spec, lspec, shard, request.run_option, hp, progress.update
            )
        finally:
            heartbeat.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await heartbeat
        if self.cfg.faults.noise:
            output = self._noisy(output)
        reported = evaluate_loss(output, spec, lspec, shard)
        return output, reported, [("loss", repr(reported))]

    async def _outer(self, request: JobRequest, theta: ModelParams):
        refs = [StorageRef.parse(i.data) for i in request.inputs_marked("inner")]
        if not refs:
            raise ModelError("outer job lists no inner outputs")
        inner = [await self._load_params(ref) for ref in refs]
        if request.run_option is RunOption.FEDAVG:
            return outer_fedavg(inner, request.outer_weights), 0.0, []

        velocity = None
        if request.outer_state is not None:
            velocity = (await self._load_params(request.outer_state)).values
        state = OuterState(
            weights=request.outer_weights,
            outer_lr=request.outer_lr if request.outer_lr is not None else settings.outer_lr,
            momentum=request.outer_momentum
            if request.outer_momentum is not None
            else settings.outer_momentum,
            velocity=velocity,
        )
        output, new_state = outer_diloco(theta, inner, state)
        velocity_blob = ModelBlob(serialize_params(theta.with_values(new_state.velocity)))
        vref = await asyncio.to_thread(self.store.put_model, velocity_blob)
        if self.cfg.faults.tamper_velocity and not self._tampered:
            self._tamper(vref)
        return output, 0.0, [("velocity", vref.render()), ("velocity_size", str(vref.size_bytes))]

    async def _heartbeat(self, event: Event, progress: _Progress) -> None:
        while True:
            await asyncio.sleep(self.cfg.progress_interval)
            await self._feedback(
                event, FeedbackStatus.PROCESSING, "in progress", payload=progress.describe()
            )

    def _noisy(self, output: ModelParams) -> ModelParams:
        rng = np.random.default_rng(self.cfg.faults.noise_seed + self._jobs_completed)
        logger.warning("🎲 Replacing output with noise (fault injection)")
        return output.with_values(rng.normal(0.0, math.sqrt(10.0), size=len(output)))

    # ── Publishing ───────────────────────────────────
    async def _publish_output(self, event, request, output, reported_loss, info):
        blob = ModelBlob(serialize_params(output))
        ref = await asyncio.to_thread(self.store.put_model, blob)
        stored = await asyncio.to_thread(self.store.get_model, ref)
        if stored.sha256 != ref.sha256:
            raise IntegrityError("stored output does not match its digest")
        if self.cfg.faults.tamper and not self._tampered:
            self._tamper(ref)

        file_metadata_id = None
        if self.cfg.nip94:
            metadata = FileMetadata.for_ref(ref, description=f"output of job {event.id}")
            fm_event = build_file_metadata(metadata, self.keypair)
            await self.pool.publish(fm_event)
            file_metadata_id = fm_event.id

        await self._feedback(event, FeedbackStatus.SUCCESS, "output stored")
        price = self.cfg.price_result_msats
        result = JobResult(
            kind=result_kind_for(event.kind),
            request_json=event.to_json(),
            job_request_id=event.id,
            relay_hint=request.relays[0] if request.relays else "",
            customer_pubkey=event.pubkey,
            amount_msats=price,
            bolt11=Bolt11Stub.for_reference(price, ref.sha256).render() if price else None,
            info=info,
            output=ref,
            reported_loss=reported_loss,
            file_metadata_id=file_metadata_id,
        )
        result_event = build_job_result(result, self.keypair)
        await self.pool.publish(result_event)
        return result_event

    async def _feedback(
        self,
        event: Event,
        status: FeedbackStatus,
        extra_info: str = "",
        amount: int | None = None,
        bolt11: str | None = None,
        lnurl: str | None = None,
        payload: str | None = None,
    ) -> None:
        feedback = JobFeedback(
            status=status,
            extra_info=extra_info,
            amount_msats=amount,
            bolt11=bolt11,
            job_request_id=event.id,
            relay_hint=self.pool.urls[0],
            customer_pubkey=event.pubkey,
            payload=payload,
            lnurl=lnurl,
        )
        try:
            await self.pool.publish(build_feedback(feedback, self.keypair))
        except PublishError as e:
            logger.warning("Feedback %s for %s… not accepted: %s", status.wire, event.id[:12], e)

    def _tamper(self, ref: StorageRef) -> None:
        parsed = urlparse(ref.url)
        if parsed.scheme != "file":
            logger.warning("Tampering only supported for file:// outputs, skipping %s", ref.url)
            return
        path = Path(url2pathname(parsed.path))
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        self._tampered = True
        logger.warning("🩻 Tampered with stored blob %s (fault injection)", path.name)
