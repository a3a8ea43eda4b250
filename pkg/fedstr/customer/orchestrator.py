"""Customer side of the marketplace: discovery, job assignment and reassignment.

``Customer.run_job`` drives one provider through

    publish request → payment-required → pay → processing → result
        → download + hash-verify output

and turns every way that can go wrong into a ``JobFailedError`` with a
category. ``reassign_job`` replaces a failed provider with a freshly
discovered one, re-sending the identical request with only ``p`` changed.
"""

from __future__ import annotations

import asyncio
import logging
from collections.abc import Callable, Iterable
from dataclasses import dataclass

from fedstr.config import settings
from fedstr.customer.config import CustomerConfig
from fedstr.customer.inbox import EventInbox
from fedstr.customer.state import Assignment, Phase, RoundState
from fedstr.errors import (
    FormatError,
    InsufficientProvidersError,
    IntegrityError,
    JobFailedError,
    ModelError,
    PaymentError,
    ReassignmentExhaustedError,
    RelayError,
    RetrievalError,
)
from fedstr.events import (
    DISCOVERABILITY_KIND,
    JOB_FEEDBACK_KIND,
    JOB_REQUEST_KIND,
    Discoverability,
    FeedbackStatus,
    InputType,
    JobFeedback,
    JobInput,
    JobRequest,
    Task,
    build_job_request,
    is_job_result_kind,
    parse_discoverability,
    parse_feedback,
    parse_file_metadata,
    parse_job_result,
    result_kind_for,
)
from fedstr.ml.optim import OuterState, RunOption
from fedstr.ml.params import ModelParams, deserialize_params, serialize_params
from fedstr.nostr.event import Event
from fedstr.nostr.filters import Filter
from fedstr.observability import get_tracer
from fedstr.payments import Bolt11Stub, create_zap_request, default_lnurl, pay_via_relay
from fedstr.relay.client import RelayPool, StreamSignal
from fedstr.roundlog import OUTER, RoundLog
from fedstr.storage import FileBackend, ModelBlob, ModelStore, StorageRef
from fedstr.validation import ParamHistory, ValidationConfig, Verdict, validate_test_b

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)

Validator = Callable[[str, ModelParams], Verdict]


@dataclass(frozen=True)
class ProviderListing:
    pubkey: str
    announcement: Discoverability
    created_at: int


@dataclass(frozen=True)
class Reassignment:
    provider: str
    assignment: Assignment
    attempts: int


async def discover_providers(
    pool: RelayPool,
    needed: int,
    kind: int = JOB_REQUEST_KIND,
    exclude: Iterable[str] = (),
    retry_window: float | None = None,
) -> list[ProviderListing]:
    """Up to ``needed`` distinct providers announcing ``kind``, newest first.

    Raises:
        InsufficientProvidersError: If fewer are found within ``retry_window``.
    """
    retry_window = settings.discovery_retry_window if retry_window is None else retry_window
    excluded = set(exclude)
    loop = asyncio.get_running_loop()
    deadline = loop.time() + retry_window
    while True:
        events = await pool.query(
            [Filter(kinds=[DISCOVERABILITY_KIND], tag_queries={"k": [str(kind)]})]
        )
        listings: dict[str, ProviderListing] = {}
        for e in sorted(events, key=lambda e: (e.created_at, e.id), reverse=True):
            if e.pubkey in excluded or e.pubkey in listings:
                continue
            try:
                announcement = parse_discoverability(e)
            except ValueError as exc:
                logger.debug("Skipping announcement %s…: %s", e.id[:12], exc)
                continue
            if announcement.usable and kind in announcement.supported_kinds:
                listings[e.pubkey] = ProviderListing(e.pubkey, announcement, e.created_at)
        found = list(listings.values())
        if len(found) >= needed:
            return found[:needed]
        remaining = deadline - loop.time()
        if remaining <= 0:
            raise InsufficientProvidersError(
                f"found {len(found)} of {needed} providers for kind {kind}"
            )
        await asyncio.sleep(min(0.5, remaining))


class Customer:
    """Owns the relay pool, inbox, wallet and round log of one training run."""

    def __init__(
        self,
        cfg: CustomerConfig,
        pool: RelayPool | None = None,
        store: ModelStore | None = None,
        round_log: RoundLog | None = None,
    ):
        self.cfg = cfg
        self.keypair = cfg.keypair
        self.pool = pool or RelayPool(cfg.relays)
        self.store = store or ModelStore(FileBackend(cfg.model_root))
        self.log = round_log or RoundLog(cfg.log_out)
        self.inbox = EventInbox(self.pool, cfg.pubkey, [result_kind_for(cfg.kind)])
        self.history = ParamHistory()
        self.denylist: set[str] = set()
        self.engaged: set[str] = set()
        self.lnurls: dict[str, str] = {}
        self.validation_cfg: ValidationConfig | None = None
        self._claim_lock = asyncio.Lock()
        self._started = False

    async def start(self) -> None:
        if self._started:
            return
        await self.pool.connect()
        await self.inbox.start()
        self._started = True

    async def close(self) -> None:
        await self.inbox.close()
        await self.pool.close()
        self.store.close()
        self._started = False

    async def store_model(self, p: ModelParams) -> StorageRef:
        return await asyncio.to_thread(self.store.put_model, ModelBlob(serialize_params(p)))

    async def discover_providers(self, needed: int, exclude: Iterable[str] = ()) -> list[str]:
        listings = await discover_providers(
            self.pool,
            needed,
            self.cfg.kind,
            set(exclude) | self.denylist,
            self.cfg.discovery_retry_window,
        )
        for listing in listings:
            if listing.announcement.lnurl:
                self.lnurls[listing.pubkey] = listing.announcement.lnurl
        return [listing.pubkey for listing in listings]

    # ── One assignment ───────────────────────────────
    async def run_job(
        self,
        request: JobRequest,
        provider: str,
        round_index: int,
        rs: RoundState | None = None,
        theta_global: ModelParams | None = None,
    ) -> Assignment:
        """Send ``request`` to ``provider`` and follow it to a verified output.

        Raises:
            JobFailedError: Timeout, provider error, payment, retrieval or integrity failure.
            RelayError: If the request cannot be published at all.
        """
        event = build_job_request(request.with_provider(provider), self.keypair)
        queue = self.inbox.register(event.id)

        def track(phase: Phase) -> None:
            if rs is not None:
                rs.advance(provider, phase)

        try:
            with tracer.start_as_current_span("customer.job") as span:
                span.set_attribute("fedstr.provider", provider)
                span.set_attribute("fedstr.round", round_index)
                await self.pool.publish(event)
                track(Phase.REQUESTED)
                if rs is not None:
                    rs.job_request_ids[provider] = event.id
                self.log.record(round_index, provider, Phase.REQUESTED, event.id)
                try:
                    return await self._follow(
                        event, queue, provider, round_index, track, theta_global,
                        wants_velocity=request.task is Task.OUTER
                        and request.run_option is RunOption.DILOCO,
                    )
                except JobFailedError as e:
                    track(Phase.FAILED)
                    self.log.record(
                        round_index, provider, Phase.FAILED, event.id, f"{e.category}: {e.reason}"
                    )
                    logger.warning(
                        "⚠️ Round %d job for %s… failed: %s", round_index, provider[:12], e
                    )
                    raise
        finally:
            self.inbox.unregister(event.id)

    async def _next(self, queue: asyncio.Queue, deadline: float) -> Event | StreamSignal:
        loop = asyncio.get_running_loop()
        while True:
            remaining = deadline - loop.time()
            if remaining <= 0:
                raise JobFailedError("timeout", f"no progress within {self.cfg.job_timeout:.0f}s")
            try:
                return await asyncio.wait_for(
                    queue.get(), min(self.cfg.feedback_interval, remaining)
                )
            except TimeoutError:
                continue

    async def _follow(
        self, event, queue, provider, round_index, track, theta_global, wants_velocity=False
    ) -> Assignment:
        loop = asyncio.get_running_loop()
        deadline = loop.time() + self.cfg.job_timeout
        paid = False
        processing = False
        while True:
            item = await self._next(queue, deadline)
            if item is StreamSignal.DISCONNECTED:
                raise RelayError("lost every relay connection while waiting for feedback")
            if item.pubkey != provider:
                continue

            if item.kind == JOB_FEEDBACK_KIND:
                try:
                    feedback = parse_feedback(item)
                except ValueError as e:
                    logger.warning("Ignoring malformed feedback %s…: %s", item.id[:12], e)
                    continue
                if feedback.status is FeedbackStatus.ERROR:
                    raise JobFailedError("provider-error", feedback.extra_info or "error")
                if feedback.status is FeedbackStatus.PAYMENT_REQUIRED and not paid:
                    track(Phase.PAYMENT_REQUESTED)
                    self.log.record(
                        round_index, provider, Phase.PAYMENT_REQUESTED, item.id,
                        f"{feedback.amount_msats or 0} msats",
                    )
                    await self._pay_init(event, feedback, provider, round_index)
                    paid = True
                    track(Phase.PAID)
                    self.log.record(round_index, provider, Phase.PAID, event.id)
                    deadline = loop.time() + self.cfg.job_timeout
                elif feedback.status is FeedbackStatus.PROCESSING and not processing:
                    processing = True
                    track(Phase.PROCESSING)
                    self.log.record(round_index, provider, Phase.PROCESSING, item.id)

            elif is_job_result_kind(item.kind):
                try:
                    result = parse_job_result(item)
                except ValueError as e:
                    raise JobFailedError("provider-error", f"malformed result: {e}") from e
                track(Phase.RESULT_READY)
                self.log.record(
                    round_index, provider, Phase.RESULT_READY, item.id,
                    f"reported loss {result.reported_loss:.6g}",
                )
                params = await self._fetch_output(result, provider, theta_global)
                velocity = await self._fetch_velocity(result, params) if wants_velocity else None
                return Assignment(provider, event, item, result, params, velocity)

    async def _fetch_output(
        self, result, provider: str, theta_global: ModelParams | None
    ) -> ModelParams:
        try:
            blob = await asyncio.to_thread(self.store.get_model, result.output)
        except IntegrityError as e:
            self.log.integrity_error()
            raise JobFailedError("integrity", str(e)) from e
        except RetrievalError as e:
            raise JobFailedError("retrieval", str(e)) from e
        self.log.hash_verified()
        if result.file_metadata_id:
            await self._check_file_metadata(result, provider)
        try:
            params = deserialize_params(blob.data)
        except (FormatError, ModelError) as e:
            raise JobFailedError("integrity", f"undecodable output: {e}") from e
        if theta_global is not None:
            try:
                theta_global.check_compatible(params)
            except ModelError as e:
                raise JobFailedError("validation", str(e)) from e
        return params

    async def _check_file_metadata(self, result, provider: str) -> None:
        events = await self.pool.query([Filter(ids=[result.file_metadata_id])])
        if not events:
            logger.warning("File metadata %s… not found", result.file_metadata_id[:12])
            return
        if events[0].pubkey != provider:
            self.log.integrity_error()
            raise JobFailedError("integrity", "file metadata is not signed by the provider")
        try:
            metadata = parse_file_metadata(events[0])
        except ValueError as e:
            raise JobFailedError("integrity", f"malformed file metadata: {e}") from e
        size = result.output.size_bytes
        if metadata.sha256 != result.output.sha256 or (
            size is not None and metadata.size_bytes != size
        ):
            self.log.integrity_error()
            raise JobFailedError("integrity", "file metadata disagrees with the job output")

    # ── Payments ─────────────────────────────────────
    def _invoice_amount(self, amount: int | None, bolt11: str | None) -> int:
        """The invoice is authoritative when it disagrees with the amount tag."""
        if not bolt11:
            return amount or 0
        try:
            invoice = Bolt11Stub.parse(bolt11)
        except PaymentError as e:
            raise JobFailedError("payment", str(e)) from e
        if amount is not None and invoice.amount_msats != amount:
            logger.warning(
                "Invoice for %d msats disagrees with amount tag %d; paying the invoice",
                invoice.amount_msats, amount,
            )
        return invoice.amount_msats

    async def _zap(self, amount: int, recipient: str, event_id: str) -> Event:
        lnurl = self.lnurls.get(recipient) or default_lnurl(recipient)
        try:
            request = create_zap_request(
                amount, lnurl, recipient, event_id, self.keypair, relays=self.cfg.relays
            )
            return await pay_via_relay(self.pool, request, self.cfg.job_timeout)
        except PaymentError as e:
            raise JobFailedError("payment", str(e)) from e

    async def _pay_init(
        self, event: Event, feedback: JobFeedback, provider: str, round_index: int
    ) -> None:
        amount = self._invoice_amount(feedback.amount_msats, feedback.bolt11)
        if amount == 0:
            return
        if amount > self.cfg.init_msats:
            raise JobFailedError(
                "payment", f"provider asks {amount} msats, budget is {self.cfg.init_msats}"
            )
        if feedback.lnurl:
            self.lnurls[provider] = feedback.lnurl
        receipt = await self._zap(amount, provider, event.id)
        self.log.payment(round_index, provider, amount, receipt.id)

    async def pay_result(self, assignment: Assignment, round_index: int) -> Event | None:
        """Per-round payment; only ever called for a validated output."""
        result = assignment.result
        try:
            amount = self._invoice_amount(result.amount_msats, result.bolt11)
        except JobFailedError as e:
            logger.error("Not paying %s…: %s", assignment.provider[:12], e)
            return None
        if amount == 0:
            return None
        if amount > self.cfg.round_msats:
            logger.warning(
                "Result price %d msats above budget, paying %d", amount, self.cfg.round_msats
            )
            amount = self.cfg.round_msats
        try:
            receipt = await self._zap(amount, assignment.provider, assignment.result_event.id)
        except JobFailedError as e:
            logger.error("Round payment to %s… failed: %s", assignment.provider[:12], e)
            return None
        self.log.payment(round_index, assignment.provider, amount, receipt.id)
        return receipt

    # ── Reassignment ─────────────────────────────────
    async def _claim_replacement(self, roster: Iterable[str]) -> str:
        async with self._claim_lock:
            try:
                found = await self.discover_providers(1, exclude=set(roster) | self.engaged)
            except InsufficientProvidersError as e:
                raise ReassignmentExhaustedError(f"no replacement provider available: {e}") from e
            self.engaged.add(found[0])
            return found[0]

    async def reassign_job(
        self,
        failed_sp: str,
        last_request: JobRequest,
        roster: Iterable[str],
        round_index: int,
        validate: Validator | None = None,
        rs: RoundState | None = None,
        theta_global: ModelParams | None = None,
    ) -> Reassignment:
        """Hand a failed job to fresh providers until one delivers a valid output.

        Without ``validate`` the first hash-verified output is accepted and
        validated later together with the rest of the round.

        Raises:
            ReassignmentExhaustedError: After ``max_reassign_attempts`` or when
                discovery runs dry.
        """
        roster = set(roster)
        current = failed_sp
        for attempt in range(1, self.cfg.max_reassign_attempts + 1):
            self.denylist.add(current)
            with tracer.start_as_current_span("customer.reassign") as span:
                span.set_attribute("fedstr.attempt", attempt)
                new_sp = await self._claim_replacement(roster)
                if rs is not None:
                    rs.advance(current, Phase.REASSIGNED)
                self.log.record(
                    round_index, current, Phase.REASSIGNED,
                    detail=f"to {new_sp} (attempt {attempt})",
                )
                logger.info(
                    "🔁 Reassigning %s… → %s… (attempt %d)", current[:12], new_sp[:12], attempt
                )
                try:
                    assignment = await self.run_job(
                        last_request, new_sp, round_index, rs, theta_global
                    )
                except JobFailedError:
                    current = new_sp
                    continue
                if validate is None:
                    return Reassignment(new_sp, assignment, attempt)
                verdict = validate(new_sp, assignment.params)
                self.log.verdict(round_index, new_sp, verdict.passed, verdict.reason)
                if verdict.passed:
                    if rs is not None:
                        rs.advance(new_sp, Phase.VALIDATED)
                    return Reassignment(new_sp, assignment, attempt)
                if rs is not None:
                    rs.advance(new_sp, Phase.FAILED)
                self.log.record(round_index, new_sp, Phase.FAILED, detail=verdict.reason)
                current = new_sp
        self.denylist.add(current)
        raise ReassignmentExhaustedError(
            f"job still failing after {self.cfg.max_reassign_attempts} reassignments"
        )

    # ── Delegated outer step ─────────────────────────
    async def delegate_outer(
        self,
        assignments: list[Assignment],
        theta_global: ModelParams,
        theta_ref: StorageRef,
        outer_state: OuterState,
        round_index: int,
        roster: list[str],
    ) -> tuple[ModelParams, OuterState]:
        """Have a provider run the outer step; its theta_global is checked with Test B."""
        cfg = self.cfg
        diloco = cfg.run_option is RunOption.DILOCO
        relay = cfg.relays[0]
        inputs = [JobInput(data=theta_ref.render(), input_type=InputType.TEXT, relay_hint=relay)]
        inputs += [
            JobInput(
                data=a.output_ref.render(), input_type=InputType.TEXT, relay_hint=relay,
                marker="inner",
            )
            for a in assignments
        ]
        velocity_ref = None
        if diloco and outer_state.velocity is not None:
            velocity_ref = await self.store_model(theta_global.with_values(outer_state.velocity))
        request = JobRequest(
            kind=cfg.kind,
            inputs=inputs,
            relays=cfg.relays,
            bid_msats=cfg.bid_msats,
            task=Task.OUTER,
            run_option=cfg.run_option,
            model_state=theta_ref,
            model_spec=cfg.model.to_json(),
            loss=cfg.loss,
            timeout_max=cfg.job_timeout,
            outer_weights=outer_state.weights,
            outer_lr=outer_state.outer_lr if diloco else None,
            outer_momentum=outer_state.momentum if diloco else None,
            outer_state=velocity_ref,
        )

        def validate(sp: str, params: ModelParams) -> Verdict:
            trial = ParamHistory(global_series=[*self.history.global_series, params])
            return validate_test_b(None, trial, self.validation_cfg)

        outer_sp = roster[0]
        try:
            assignment = await self.run_job(request, outer_sp, round_index, None, theta_global)
            verdict = validate(outer_sp, assignment.params)
            self.log.verdict(round_index, outer_sp, verdict.passed, verdict.reason)
            if not verdict.passed:
                self.log.record(round_index, outer_sp, Phase.FAILED, detail=verdict.reason)
                raise JobFailedError("validation", verdict.reason)
        except JobFailedError:
            replacement = await self.reassign_job(
                outer_sp, request, roster, round_index, validate, theta_global=theta_global
            )
            assignment = replacement.assignment

        new_state = outer_state
        if diloco and assignment.velocity is not None:
            new_state = OuterState(
                weights=outer_state.weights,
                outer_lr=outer_state.outer_lr,
                momentum=outer_state.momentum,
                velocity=assignment.velocity.values.copy(),
            )
        await self.pay_result(assignment, round_index)
        self.log.record(
            round_index, assignment.provider, OUTER, assignment.result_event.id, "delegated"
        )
        return assignment.params, new_state

    async def _fetch_velocity(self, result, params: ModelParams) -> ModelParams:
        """Outer DiLoCo momentum published next to the new theta_global."""
        rendered = result.info_value("velocity")
        if rendered is None:
            raise JobFailedError("integrity", "outer result carries no velocity")
        size = result.info_value("velocity_size")
        try:
            ref = StorageRef.parse(rendered, int(size) if size else None)
        except ValueError as e:
            raise JobFailedError("integrity", f"malformed velocity reference: {e}") from e
        try:
            blob = await asyncio.to_thread(self.store.get_model, ref)
        except IntegrityError as e:
            self.log.integrity_error()
            raise JobFailedError("integrity", str(e)) from e
        except RetrievalError as e:
            raise JobFailedError("retrieval", str(e)) from e
        self.log.hash_verified()
        try:
            velocity = deserialize_params(blob.data)
            params.check_compatible(velocity)
        except (FormatError, ModelError) as e:
            raise JobFailedError("integrity", f"undecodable velocity: {e}") from e
        return velocity
