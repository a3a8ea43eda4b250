"""Tests for the customer: lifecycle bookkeeping and full training runs.

The integration classes run real provider daemons against a loopback relay.
"""

import asyncio
import math
from types import SimpleNamespace

import numpy as np
import pytest

from fedstr.customer import (
    Customer,
    OuterMode,
    Phase,
    RoundState,
    build_training_graph,
    can_transition,
    discover_providers,
    run_training,
)
from fedstr.customer.graph import TrainingNodes, _should_continue
from fedstr.errors import (
    InsufficientProvidersError,
    InvalidTransitionError,
    JobFailedError,
    ReassignmentExhaustedError,
    TrainingAbortedError,
)
from fedstr.events import (
    FileMetadata,
    InputType,
    JobInput,
    JobRequest,
    Task,
    build_file_metadata,
)
from fedstr.ml import InnerHyperparams, RunOption, init_model
from fedstr.nostr import generate_keypair
from fedstr.payments import Bolt11Stub
from fedstr.provider import FaultInjection
from fedstr.relay.client import RelayPool
from fedstr.roundlog import ROUND_COMPLETE, VERDICT
from fedstr.storage import StorageRef

# Converges within one round on the small fixture problem.
FAST = InnerHyperparams(epochs=3, batch_size=32, learning_rate=0.1)


@pytest.mark.unit
class TestLifecycle:
    """Phase transitions of a single provider assignment."""

    @pytest.mark.parametrize(
        ("current", "target", "allowed"),
        [
            (None, Phase.REQUESTED, True),
            (None, Phase.PAID, False),
            (Phase.REQUESTED, Phase.PAYMENT_REQUESTED, True),
            (Phase.REQUESTED, Phase.PROCESSING, True),
            (Phase.PROCESSING, Phase.PAID, False),
            (Phase.PROCESSING, Phase.VALIDATED, False),
            (Phase.RESULT_READY, Phase.VALIDATED, True),
            (Phase.PAID, Phase.FAILED, True),
            (Phase.VALIDATED, Phase.FAILED, False),
            (Phase.FAILED, Phase.REASSIGNED, True),
            (Phase.PROCESSING, Phase.REASSIGNED, False),
            (Phase.REASSIGNED, Phase.REQUESTED, False),
        ],
    )
    def test_can_transition(self, current, target, allowed):
        assert can_transition(current, target) is allowed

    def test_round_state_tracks_active_providers(self, linear_spec):
        rs = RoundState(1, init_model(linear_spec))
        for phase in (Phase.REQUESTED, Phase.PROCESSING, Phase.RESULT_READY, Phase.VALIDATED):
            rs.advance("a", phase)
        rs.advance("b", Phase.REQUESTED)
        rs.advance("b", Phase.FAILED)
        assert not rs.complete
        rs.advance("b", Phase.REASSIGNED)
        assert rs.active == ["a"]
        assert rs.complete

    def test_repeated_phase_is_a_no_op(self, linear_spec):
        rs = RoundState(1, init_model(linear_spec))
        rs.advance("a", Phase.REQUESTED)
        rs.advance("a", Phase.REQUESTED)
        assert rs.phases["a"] is Phase.REQUESTED

    def test_illegal_move_raises(self, linear_spec):
        rs = RoundState(1, init_model(linear_spec))
        with pytest.raises(InvalidTransitionError):
            rs.advance("a", Phase.RESULT_READY)

    def test_empty_round_is_not_complete(self, linear_spec):
        assert not RoundState(1, init_model(linear_spec)).complete


@pytest.mark.unit
class TestGraphWiring:
    """Graph topology and small customer helpers that need no relay."""

    def test_should_continue(self):
        assert _should_continue({"stop": False}) == "continue"
        assert _should_continue({"stop": True}) == "stop"
        assert _should_continue({}) == "continue"

    async def test_graph_nodes(self, customer_config):
        customer = Customer(customer_config())
        graph = build_training_graph(customer)
        nodes = set(graph.get_graph().nodes)
        assert {"prepare", "request_round", "validate", "pay", "outer", "update",
                "finalize"} <= nodes

    async def test_invoice_is_authoritative(self, customer_config):
        customer = Customer(customer_config())
        bolt11 = Bolt11Stub.for_reference(1500, "ab" * 32).render()
        assert customer._invoice_amount(1000, bolt11) == 1500
        assert customer._invoice_amount(700, None) == 700
        assert customer._invoice_amount(None, None) == 0

    async def test_garbage_invoice_is_a_payment_failure(self, customer_config):
        customer = Customer(customer_config())
        with pytest.raises(JobFailedError) as exc:
            customer._invoice_amount(1000, "lnbc-not-a-stub")
        assert exc.value.category == "payment"

    async def test_failed_shard_cancels_sibling_jobs(
        self, customer_config, linear_spec, monkeypatch
    ):
        nodes = TrainingNodes(Customer(customer_config()))
        cancelled = asyncio.Event()

        async def assign(rs, shard, request, roster):
            if shard == 0:
                await asyncio.sleep(0.05)
                raise ReassignmentExhaustedError("no replacement provider available")
            try:
                await asyncio.sleep(30)
            except asyncio.CancelledError:
                cancelled.set()
                raise

        monkeypatch.setattr(nodes, "_assign", assign)
        monkeypatch.setattr(nodes, "_inner_request", lambda state, shard: None)
        state = {
            "round": 1,
            "roster": ["aa" * 32, "bb" * 32],
            "theta_global": init_model(linear_spec),
        }
        with pytest.raises(ReassignmentExhaustedError):
            await nodes.request_round(state)
        assert cancelled.is_set()


# ── Helpers ──────────────────────────────────────────
async def _single_job(customer: Customer, linear_dataset, linear_spec) -> JobRequest:
    """Store a shard and a starting model, and build a one-off inner request."""
    shard_ref = await asyncio.to_thread(
        customer.store.put_blob, linear_dataset.to_csv(), "shard_", ".csv"
    )
    theta_ref = await customer.store_model(init_model(linear_spec))
    return JobRequest(
        inputs=[JobInput(data=shard_ref.url, input_type=InputType.URL)],
        relays=customer.cfg.relays,
        bid_msats=customer.cfg.bid_msats,
        task=Task.INNER,
        run_option=RunOption.FEDAVG,
        data_set_url=shard_ref.url,
        data_set_sha256=shard_ref.sha256,
        model_state=theta_ref,
        model_spec=linear_spec.to_json(),
        hyperparameters=FAST,
    )


@pytest.mark.integration
class TestDiscovery:
    """Provider discovery through announcements on the relay."""

    async def test_newest_first(self, relay, providers):
        older = await providers(1)
        await asyncio.sleep(1.1)
        newer = await providers(1)
        pool = RelayPool([relay.url])
        await pool.connect()
        try:
            listings = await discover_providers(pool, 1, 8000, set(), retry_window=1.0)
        finally:
            await pool.close()
        assert [listing.pubkey for listing in listings] == [newer[0].cfg.pubkey]
        assert older[0].cfg.pubkey != newer[0].cfg.pubkey

    async def test_exclusion(self, relay, providers):
        daemons = await providers(2)
        pool = RelayPool([relay.url])
        await pool.connect()
        try:
            excluded = {daemons[0].cfg.pubkey}
            listings = await discover_providers(pool, 1, 8000, excluded, retry_window=1.0)
        finally:
            await pool.close()
        assert listings[0].pubkey == daemons[1].cfg.pubkey

    async def test_insufficient_providers(self, relay, providers):
        await providers(1)
        pool = RelayPool([relay.url])
        await pool.connect()
        try:
            with pytest.raises(InsufficientProvidersError):
                await discover_providers(pool, 3, 8000, set(), retry_window=0.5)
        finally:
            await pool.close()

    async def test_wrong_kind_is_not_listed(self, relay, providers):
        await providers(1)
        pool = RelayPool([relay.url])
        await pool.connect()
        try:
            with pytest.raises(InsufficientProvidersError):
                await discover_providers(pool, 1, 8123, set(), retry_window=0.5)
        finally:
            await pool.close()


@pytest.mark.integration
class TestSingleJob:
    """One request followed to completion or to a categorized failure."""

    async def test_job_completes_and_pays_init(
        self, providers, customer_config, linear_dataset, linear_spec
    ):
        (daemon,) = await providers(1)
        customer = Customer(customer_config())
        await customer.start()
        try:
            request = await _single_job(customer, linear_dataset, linear_spec)
            rs = RoundState(1, init_model(linear_spec))
            assignment = await customer.run_job(request, daemon.cfg.pubkey, 1, rs)
        finally:
            await customer.close()
        sp = daemon.cfg.pubkey
        assert rs.phases[sp] is Phase.RESULT_READY
        init_model(linear_spec).check_compatible(assignment.params)
        assert customer.log.counters.payments_msats[sp] == 1000
        assert customer.log.counters.hash_verifications == 1

    async def test_bid_below_price_is_provider_error(
        self, providers, customer_config, linear_dataset, linear_spec
    ):
        (daemon,) = await providers(1, price_init_msats=50_000)
        customer = Customer(customer_config())
        await customer.start()
        try:
            request = await _single_job(customer, linear_dataset, linear_spec)
            with pytest.raises(JobFailedError) as exc:
                await customer.run_job(request, daemon.cfg.pubkey, 1)
        finally:
            await customer.close()
        assert exc.value.category == "provider-error"
        assert "bid below price" in exc.value.reason

    async def test_price_above_budget_is_payment_failure(
        self, providers, customer_config, linear_dataset, linear_spec
    ):
        (daemon,) = await providers(1)
        customer = Customer(customer_config(init_msats=500))
        await customer.start()
        try:
            request = await _single_job(customer, linear_dataset, linear_spec)
            with pytest.raises(JobFailedError) as exc:
                await customer.run_job(request, daemon.cfg.pubkey, 1)
        finally:
            await customer.close()
        assert exc.value.category == "payment"

    async def test_silent_provider_times_out(
        self, providers, customer_config, linear_dataset, linear_spec
    ):
        (daemon,) = await providers(1, faults=FaultInjection(crash_after_jobs=0))
        customer = Customer(customer_config(job_timeout=1.0, feedback_interval=0.1))
        await customer.start()
        try:
            request = await _single_job(customer, linear_dataset, linear_spec)
            with pytest.raises(JobFailedError) as exc:
                await customer.run_job(request, daemon.cfg.pubkey, 1)
        finally:
            await customer.close()
        assert exc.value.category == "timeout"

    async def test_tampered_output_is_integrity_failure(
        self, providers, customer_config, linear_dataset, linear_spec
    ):
        (daemon,) = await providers(1, faults=FaultInjection(tamper=True))
        customer = Customer(customer_config())
        await customer.start()
        try:
            request = await _single_job(customer, linear_dataset, linear_spec)
            with pytest.raises(JobFailedError) as exc:
                await customer.run_job(request, daemon.cfg.pubkey, 1)
        finally:
            await customer.close()
        assert exc.value.category == "integrity"
        assert customer.log.counters.integrity_errors == 1

    async def test_file_metadata_must_come_from_the_provider(self, customer_config, keypair):
        customer = Customer(customer_config())
        await customer.start()
        try:
            ref = StorageRef(url="file:///tmp/model.bin", sha256="ab" * 32, size_bytes=10)
            metadata = build_file_metadata(FileMetadata.for_ref(ref), keypair)
            await customer.pool.publish(metadata)
            result = SimpleNamespace(file_metadata_id=metadata.id, output=ref)
            await customer._check_file_metadata(result, keypair.pubkey_hex)
            with pytest.raises(JobFailedError) as exc:
                await customer._check_file_metadata(result, generate_keypair().pubkey_hex)
        finally:
            await customer.close()
        assert exc.value.category == "integrity"
        assert customer.log.counters.integrity_errors == 1



@pytest.mark.integration
class TestTraining:
    """Full training runs over the graph."""

    async def test_fedavg_run_completes(self, providers, customer_config):
        await providers(2)
        cfg = customer_config(hyperparams=FAST)
        result = await run_training(cfg)
        summary = result.summary
        assert summary["rounds_completed"] == 2
        assert summary["final_loss"] < summary["initial_loss"]
        assert len(result.round_log.phases(ROUND_COMPLETE)) == 2
        counters = result.round_log.counters
        assert counters.reassignments == 0
        assert counters.validation_fail == 0
        assert counters.validation_pass == 4
        # init plus two round payments per provider
        assert all(msats == 1000 + 2 * 9000 for msats in counters.payments_msats.values())

    async def test_diloco_run_completes(self, providers, customer_config):
        await providers(2)
        cfg = customer_config(
            hyperparams=InnerHyperparams(epochs=20, learning_rate=0.05),
            run_option=RunOption.DILOCO,
            num_jobs=3,
        )
        result = await run_training(cfg)
        assert result.summary["rounds_completed"] == 3
        assert math.isfinite(result.summary["final_loss"])
        assert len(result.summary["test_losses"]) == 3

    async def test_target_loss_stops_early(self, providers, customer_config):
        await providers(2)
        cfg = customer_config(hyperparams=FAST, num_jobs=5, target_loss=1e6)
        result = await run_training(cfg)
        assert result.summary["rounds_completed"] == 1

    @pytest.mark.parametrize("run_option", [RunOption.FEDAVG, RunOption.DILOCO])
    async def test_delegated_outer_matches_local(self, providers, customer_config, run_option):
        await providers(2)
        results = {}
        for mode in (OuterMode.SELF, OuterMode.DELEGATE):
            cfg = customer_config(
                hyperparams=FAST, run_option=run_option, outer_mode=mode, seed=11
            )
            results[mode] = await run_training(cfg)
        local = results[OuterMode.SELF].final.values
        delegated = results[OuterMode.DELEGATE].final.values
        np.testing.assert_allclose(delegated, local, rtol=0, atol=1e-9)

    async def test_crashed_provider_is_reassigned(self, providers, customer_config):
        await providers(1)  # spare, announced first so it ranks last
        await asyncio.sleep(1.1)
        await providers(1, faults=FaultInjection(crash_after_jobs=1))
        await providers(1)
        cfg = customer_config(hyperparams=FAST, num_jobs=3, job_timeout=2.0)
        result = await run_training(cfg)
        counters = result.round_log.counters
        assert result.summary["rounds_completed"] == 3
        assert counters.reassignments == 1
        assert counters.failures["timeout"] == 1

    async def test_tampered_blob_is_reassigned(self, providers, customer_config):
        await providers(1)
        await asyncio.sleep(1.1)
        await providers(1, faults=FaultInjection(tamper=True))
        await providers(1)
        result = await run_training(customer_config(hyperparams=FAST))
        counters = result.round_log.counters
        assert result.summary["rounds_completed"] == 2
        assert counters.integrity_errors == 1
        assert counters.reassignments == 1

    async def test_tampered_velocity_is_reassigned(self, providers, customer_config):
        await providers(1)  # spare
        await asyncio.sleep(1.1)
        await providers(1)
        await asyncio.sleep(1.1)
        # newest announcement, so it is first in the roster and runs the outer step
        await providers(1, faults=FaultInjection(tamper_velocity=True))
        cfg = customer_config(
            hyperparams=FAST, run_option=RunOption.DILOCO, outer_mode=OuterMode.DELEGATE
        )
        result = await run_training(cfg)
        counters = result.round_log.counters
        assert result.summary["rounds_completed"] == 2
        assert counters.integrity_errors == 1
        assert counters.reassignments == 1
        assert np.isfinite(result.final.values).all()

    async def test_noise_provider_fails_validation_and_is_not_paid(
        self, providers, customer_config
    ):
        await providers(1)
        await asyncio.sleep(1.1)
        (bad,) = await providers(1, faults=FaultInjection(noise=True, noise_seed=5))
        await providers(1)
        result = await run_training(customer_config(hyperparams=FAST))
        log = result.round_log
        assert log.counters.validation_fail >= 1
        assert log.counters.reassignments == 1
        bad_verdicts = [r for r in log.phases(VERDICT) if r.provider == bad.cfg.pubkey]
        assert bad_verdicts and all(r.detail.startswith("fail") for r in bad_verdicts)
        # init payment only; the failed output earns nothing
        assert log.counters.payments_msats[bad.cfg.pubkey] == 1000

    async def test_abort_without_spares(self, providers, customer_config):
        await providers(1, faults=FaultInjection(tamper=True))
        await providers(1)
        cfg = customer_config(hyperparams=FAST, discovery_retry_window=0.5)
        with pytest.raises(TrainingAbortedError) as exc:
            await run_training(cfg)
        assert exc.value.round_log.counters.integrity_errors == 1

    async def test_abort_when_no_providers(self, relay, customer_config):
        cfg = customer_config(discovery_retry_window=0.5)
        with pytest.raises(TrainingAbortedError):
            await run_training(cfg)
