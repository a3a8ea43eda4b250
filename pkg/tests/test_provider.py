"""Integration tests for the provider daemon against a loopback relay."""

import asyncio

import pytest

from fedstr.customer import Customer
from fedstr.errors import PaymentError
from fedstr.events import (
    DISCOVERABILITY_KIND,
    JOB_FEEDBACK_KIND,
    FeedbackStatus,
    InputType,
    JobInput,
    JobRequest,
    Task,
    build_job_request,
    parse_discoverability,
    parse_feedback,
)
from fedstr.ml import InnerHyperparams, RunOption, init_model
from fedstr.nostr import Filter, generate_keypair, make_template, sign_event
from fedstr.payments import create_zap_request, pay_via_relay
from fedstr.provider import FaultInjection, SessionPhase
from fedstr.relay.client import RelayPool
from fedstr.storage import StorageRef

pytestmark = pytest.mark.integration

UNUSED_REF = StorageRef(url="file:///nonexistent/model.bin", sha256="00" * 32)


def _request(linear_spec, bid: int | None = 10_000) -> JobRequest:
    return JobRequest(
        inputs=[JobInput(data="file:///nonexistent/shard.csv", input_type=InputType.URL)],
        bid_msats=bid,
        task=Task.INNER,
        run_option=RunOption.FEDAVG,
        model_state=UNUSED_REF,
        model_spec=linear_spec.to_json(),
    )


@pytest.fixture
async def pool(relay):
    p = RelayPool([relay.url])
    await p.connect()
    yield p
    await p.close()


async def _send(pool, request: JobRequest, provider: str, signer):
    event = build_job_request(request.with_provider(provider), signer)
    await pool.publish(event)
    return event


async def _feedback(pool, request_ids: list[str], status: FeedbackStatus, timeout: float = 5.0):
    """First feedback with ``status`` on any of ``request_ids``, parsed, or None."""
    filters = [Filter(kinds=[JOB_FEEDBACK_KIND], tag_queries={"e": request_ids})]
    event = await pool.wait_for(
        filters, timeout, predicate=lambda e: parse_feedback(e).status is status
    )
    return parse_feedback(event) if event is not None else None


class TestAnnouncement:
    """Kind 31990 handler information."""

    async def test_announcement_is_discoverable(self, providers, pool):
        (daemon,) = await providers(1, price_init_msats=2000)
        events = await pool.query(
            [Filter(kinds=[DISCOVERABILITY_KIND], authors=[daemon.cfg.pubkey])]
        )
        assert len(events) == 1
        announcement = parse_discoverability(events[0])
        assert announcement.supported_kinds == [8000]
        assert announcement.name == "test-provider-0"
        assert announcement.usable
        assert announcement.lnurl == daemon.cfg.resolved_lnurl

    async def test_reannouncement_replaces(self, providers, pool):
        (daemon,) = await providers(1)
        await asyncio.sleep(1.1)
        latest = await daemon.announce()
        events = await pool.query(
            [Filter(kinds=[DISCOVERABILITY_KIND], authors=[daemon.cfg.pubkey])]
        )
        assert [e.id for e in events] == [latest]


class TestWallet:
    """The provider's stub wallet signs its own receipts."""

    async def test_zap_request_is_receipted_by_provider(self, providers, pool, keypair):
        (daemon,) = await providers(1)
        request = create_zap_request(
            1000, daemon.cfg.resolved_lnurl, daemon.cfg.pubkey, "ab" * 32, keypair,
            relays=pool.urls,
        )
        receipt = await pay_via_relay(pool, request, 5.0)
        assert receipt.pubkey == daemon.cfg.pubkey
        assert receipt.first_tag_value("P") == keypair.pubkey_hex
        assert daemon.wallet.paid_msats == 1000

    async def test_zap_with_wrong_lnurl_is_not_receipted(self, providers, pool, keypair):
        (daemon,) = await providers(1)
        request = create_zap_request(
            1000, "lnurlstub:elsewhere", daemon.cfg.pubkey, "ab" * 32, keypair, relays=pool.urls
        )
        with pytest.raises(PaymentError):
            await pay_via_relay(pool, request, 1.0)
        assert daemon.wallet.paid_msats == 0


class TestRequestHandling:
    """Rejections and the payment gate."""

    async def test_bid_below_price(self, providers, pool, linear_spec, keypair):
        (daemon,) = await providers(1, price_init_msats=5000)
        event = await _send(pool, _request(linear_spec, bid=100), daemon.cfg.pubkey, keypair)
        fb = await _feedback(pool, [event.id], FeedbackStatus.ERROR)
        assert fb is not None
        assert fb.extra_info == "bid below price of 5000 msats"
        assert fb.customer_pubkey == keypair.pubkey_hex

    async def test_payment_required_carries_invoice(self, providers, pool, linear_spec, keypair):
        (daemon,) = await providers(1, price_init_msats=1500)
        event = await _send(pool, _request(linear_spec), daemon.cfg.pubkey, keypair)
        fb = await _feedback(pool, [event.id], FeedbackStatus.PAYMENT_REQUIRED)
        assert fb is not None
        assert fb.amount_msats == 1500
        assert fb.bolt11 is not None and fb.bolt11.startswith("lnstub11500m")
        assert fb.lnurl == daemon.cfg.resolved_lnurl

    async def test_payment_timeout(self, providers, pool, linear_spec, keypair):
        (daemon,) = await providers(1, payment_timeout=0.5)
        event = await _send(pool, _request(linear_spec), daemon.cfg.pubkey, keypair)
        fb = await _feedback(pool, [event.id], FeedbackStatus.ERROR)
        assert fb is not None
        assert fb.extra_info == "payment timeout"
        assert daemon.sessions[event.id].phase is SessionPhase.ABORTED

    async def test_busy_when_at_capacity(self, providers, pool, linear_spec, keypair):
        (daemon,) = await providers(1, max_jobs=1)
        first = await _send(pool, _request(linear_spec), daemon.cfg.pubkey, keypair)
        await _feedback(pool, [first.id], FeedbackStatus.PAYMENT_REQUIRED)
        second = await _send(pool, _request(linear_spec, bid=10_001), daemon.cfg.pubkey, keypair)
        fb = await _feedback(pool, [second.id], FeedbackStatus.ERROR)
        assert fb is not None
        assert fb.extra_info == "busy"

    async def test_invalid_request(self, providers, pool, keypair):
        (daemon,) = await providers(1)
        bogus = sign_event(
            make_template(keypair, 8000, [["p", daemon.cfg.pubkey], ["param", "task", "x"]]),
            keypair,
        )
        await pool.publish(bogus)
        fb = await _feedback(pool, [bogus.id], FeedbackStatus.ERROR)
        assert fb is not None
        assert fb.extra_info.startswith("invalid request:")

    async def test_missing_run_option_is_reported(self, providers, pool, linear_spec, keypair):
        (daemon,) = await providers(1)
        event = build_job_request(_request(linear_spec).with_provider(daemon.cfg.pubkey), keypair)
        tags = [t for t in event.tags if t[:2] != ["param", "run option"]]
        bogus = sign_event(make_template(keypair, 8000, tags), keypair)
        await pool.publish(bogus)
        fb = await _feedback(pool, [bogus.id], FeedbackStatus.ERROR)
        assert fb is not None
        assert fb.extra_info.startswith("invalid request:")
        assert "run option" in fb.extra_info
        assert daemon.sessions[bogus.id].phase is SessionPhase.ABORTED

    async def test_request_for_other_provider_is_ignored(
        self, providers, pool, linear_spec, keypair
    ):
        (daemon,) = await providers(1)
        stranger = generate_keypair().pubkey_hex
        event = await _send(pool, _request(linear_spec), stranger, keypair)
        assert await _feedback(pool, [event.id], FeedbackStatus.PAYMENT_REQUIRED, 1.0) is None
        assert event.id not in daemon.sessions

    async def test_free_provider_skips_payment(self, providers, pool, linear_spec, keypair):
        (daemon,) = await providers(1, price_init_msats=0)
        event = await _send(pool, _request(linear_spec), daemon.cfg.pubkey, keypair)
        # the shard URL does not exist, so the job fails after it starts
        assert await _feedback(pool, [event.id], FeedbackStatus.PROCESSING) is not None
        assert await _feedback(pool, [event.id], FeedbackStatus.ERROR) is not None
        assert await _feedback(pool, [event.id], FeedbackStatus.PAYMENT_REQUIRED, 0.5) is None

    async def test_crash_counts_inner_jobs_only(self, providers, pool, linear_spec, keypair):
        (daemon,) = await providers(
            1, price_init_msats=0, faults=FaultInjection(crash_after_jobs=0)
        )
        outer = _request(linear_spec).model_copy(update={"task": Task.OUTER})
        outer_event = await _send(pool, outer, daemon.cfg.pubkey, keypair)
        assert await _feedback(pool, [outer_event.id], FeedbackStatus.PROCESSING) is not None
        assert await _feedback(pool, [outer_event.id], FeedbackStatus.ERROR) is not None

        await asyncio.sleep(0.2)
        inner = _request(linear_spec, bid=10_001)
        inner_event = await _send(pool, inner, daemon.cfg.pubkey, keypair)
        assert await _feedback(pool, [inner_event.id], FeedbackStatus.PROCESSING, 1.0) is None
        assert await _feedback(pool, [inner_event.id], FeedbackStatus.ERROR, 0.5) is None


class TestBlacklist:
    """Customers that skip the per-round payment are ignored afterwards."""

    async def test_blacklisted_customer_is_ignored(self, providers, pool, linear_spec, keypair):
        (daemon,) = await providers(1)
        await daemon.blacklist_customer(keypair.pubkey_hex)
        event = await _send(pool, _request(linear_spec), daemon.cfg.pubkey, keypair)
        assert await _feedback(pool, [event.id], FeedbackStatus.PAYMENT_REQUIRED, 1.0) is None
        assert daemon.is_blacklisted(keypair.pubkey_hex)

    async def test_unpaid_result_blacklists(
        self, providers, customer_config, linear_dataset, linear_spec
    ):
        (daemon,) = await providers(1, payment_grace=0.5)
        customer = Customer(customer_config())
        await customer.start()
        try:
            shard = await asyncio.to_thread(
                customer.store.put_blob, linear_dataset.to_csv(), "shard_", ".csv"
            )
            request = JobRequest(
                inputs=[JobInput(data=shard.url, input_type=InputType.URL)],
                bid_msats=customer.cfg.bid_msats,
                task=Task.INNER,
                run_option=RunOption.FEDAVG,
                data_set_url=shard.url,
                data_set_sha256=shard.sha256,
                model_state=await customer.store_model(init_model(linear_spec)),
                model_spec=linear_spec.to_json(),
                hyperparameters=InnerHyperparams(),
            )
            await customer.run_job(request, daemon.cfg.pubkey, 1)
            for _ in range(30):
                if daemon.is_blacklisted(customer.cfg.pubkey):
                    break
                await asyncio.sleep(0.1)
        finally:
            await customer.close()
        assert daemon.is_blacklisted(customer.cfg.pubkey)
