"""LangGraph StateGraph driving a training run.

Graph topology:
    START → prepare → request_round → validate → pay → outer → update
        → [continue] → request_round
        → [stop]     → finalize → END

Each round assigns one shard per provider, validates every returned model,
pays the providers whose output passed, then folds the inner results into a
new global model (locally or via a delegated outer job).
"""

import asyncio
import logging
from dataclasses import dataclass
from typing import Any

from langgraph.graph import END, START, StateGraph

from fedstr.customer.config import CustomerConfig, OuterMode
from fedstr.customer.orchestrator import Customer
from fedstr.customer.state import Assignment, Phase, RoundState, TrainingState
from fedstr.errors import (
    ConfigError,
    FedstrError,
    JobFailedError,
    ModelError,
    TrainingAbortedError,
)
from fedstr.events import InputType, JobInput, JobRequest, Task
from fedstr.ml import (
    LossSpec,
    OuterState,
    RunOption,
    evaluate_loss,
    init_model,
    outer_diloco,
    outer_fedavg,
    split_dataset,
    train_test_split,
)
from fedstr.ml.models import check_loss_compatible
from fedstr.ml.params import ModelParams, serialize_params
from fedstr.observability import get_tracer
from fedstr.relay.client import RelayPool
from fedstr.roundlog import (
    OUTER,
    ROUND_COMPLETE,
    ROUND_STARTED,
    TRAINING_ABORTED,
    TRAINING_DONE,
    RoundLog,
)
from fedstr.storage import ModelStore, sha256_hex
from fedstr.validation import ValidationConfig, Verdict, validate_output

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)


@dataclass
class TrainingResult:
    final: ModelParams
    round_log: RoundLog
    summary: dict[str, Any]


class TrainingNodes:
    """Graph nodes bound to one ``Customer``."""

    def __init__(self, customer: Customer):
        self.customer = customer
        self.cfg = customer.cfg
        self.lspec = LossSpec(kind=self.cfg.loss)
        self.test_set = None
        self.initial_loss = float("nan")

    # ── prepare ──────────────────────────────────────
    async def prepare(self, state: TrainingState) -> dict:
        c, cfg = self.customer, self.cfg
        try:
            check_loss_compatible(cfg.model, self.lspec)
        except ModelError as e:
            raise ConfigError(str(e)) from e

        train, test = train_test_split(cfg.dataset, cfg.test_fraction, cfg.seed)
        shards = split_dataset(train, cfg.num_pr, cfg.seed)
        self.test_set = test
        policy = cfg.validation
        scale = 1 if policy.normalize else len(test)
        c.validation_cfg = ValidationConfig(
            test_type=policy.test_type,
            gamma_t=policy.gamma_per_sample * scale,
            beta_t=policy.beta_per_sample * scale,
            tau_c=policy.tau_c,
            test_dataset=test,
            loss=self.lspec,
            model=cfg.model,
            normalize=policy.normalize,
        )

        roster = await c.discover_providers(cfg.num_pr)
        shard_refs = [
            await asyncio.to_thread(c.store.put_blob, shard.to_csv(), "shard_", ".csv")
            for shard in shards
        ]
        theta = init_model(cfg.model)
        theta_ref = await c.store_model(theta)
        self.initial_loss = evaluate_loss(theta, cfg.model, self.lspec, cfg.dataset)
        c.history.record_global(theta)
        logger.info(
            "🚀 Training with %d providers, %d rounds (%s, outer %s), initial loss %.6g",
            cfg.num_pr, cfg.num_jobs, cfg.run_option, cfg.outer_mode, self.initial_loss,
        )
        return {
            "round": 1,
            "theta_global": theta,
            "theta_ref": theta_ref,
            "roster": roster,
            "shard_refs": shard_refs,
            "previous": {},
            "outer_state": OuterState(
                weights=cfg.outer_weights, outer_lr=cfg.outer_lr, momentum=cfg.outer_momentum
            ),
            "stop": False,
        }

    # ── request_round ────────────────────────────────
    def _inner_request(self, state: TrainingState, shard: int) -> JobRequest:
        cfg = self.cfg
        rnd = state["round"]
        shard_ref = state["shard_refs"][shard]
        relay = cfg.relays[0]
        previous = state.get("previous", {}).get(shard)
        if previous is None:
            primary = JobInput(data=shard_ref.url, input_type=InputType.URL, relay_hint=relay)
        else:
            primary = JobInput(data=previous[0], input_type=InputType.JOB, relay_hint=relay)
        hp = cfg.hyperparams.model_copy(
            update={"shuffle_seed": cfg.seed * 1_000_003 + rnd * 1_009 + shard}
        )
        return JobRequest(
            kind=cfg.kind,
            inputs=[primary],
            relays=cfg.relays,
            bid_msats=cfg.bid_msats,
            task=Task.INNER,
            run_option=cfg.run_option,
            data_set_url=shard_ref.url,
            data_set_sha256=shard_ref.sha256,
            model_state=state["theta_ref"],
            model_spec=cfg.model.to_json(),
            loss=cfg.loss,
            hyperparameters=hp,
            timeout_max=cfg.job_timeout,
            previous_result_id=previous[1] if previous else None,
        )

    async def _assign(
        self, rs: RoundState, shard: int, request: JobRequest, roster: list[str]
    ) -> Assignment:
        c = self.customer
        try:
            return await c.run_job(request, roster[shard], rs.round_index, rs, rs.theta_global)
        except JobFailedError:
            replacement = await c.reassign_job(
                roster[shard], request, roster, rs.round_index, None, rs, rs.theta_global
            )
            roster[shard] = replacement.provider
            return replacement.assignment

    async def request_round(self, state: TrainingState) -> dict:
        c = self.customer
        rnd = state["round"]
        roster = list(state["roster"])
        c.engaged = set(roster)
        rs = RoundState(rnd, state["theta_global"])
        c.log.record(rnd, "", ROUND_STARTED, detail=f"{len(roster)} providers")
        requests = {i: self._inner_request(state, i) for i in range(len(roster))}
        with tracer.start_as_current_span("customer.round") as span:
            span.set_attribute("fedstr.round", rnd)
            # one failed shard cancels the others so nothing is paid after an abort
            try:
                async with asyncio.TaskGroup() as tg:
                    tasks = [
                        tg.create_task(self._assign(rs, i, requests[i], roster))
                        for i in range(len(roster))
                    ]
            except ExceptionGroup as eg:
                raise eg.exceptions[0] from None
            results = [t.result() for t in tasks]
        return {
            "round_state": rs,
            "requests": requests,
            "assignments": dict(enumerate(results)),
            "roster": roster,
        }

    # ── validate ─────────────────────────────────────
    async def validate(self, state: TrainingState) -> dict:
        c = self.customer
        rnd = state["round"]
        rs = state["round_state"]
        theta = state["theta_global"]
        assignments = dict(state["assignments"])
        roster = list(state["roster"])

        for a in assignments.values():
            c.history.record(a.provider, a.params)
            rs.outputs[a.provider] = a.params
        outputs = {a.provider: a.params for a in assignments.values()}
        failed: list[int] = []
        for shard, a in sorted(assignments.items()):
            verdict = validate_output(a.provider, theta, outputs, c.history, c.validation_cfg)
            c.log.verdict(rnd, a.provider, verdict.passed, verdict.reason)
            if verdict.passed:
                rs.advance(a.provider, Phase.VALIDATED)
            else:
                rs.advance(a.provider, Phase.FAILED)
                c.log.record(rnd, a.provider, Phase.FAILED, a.result_event.id, verdict.reason)
                logger.warning("❌ %s… failed validation: %s", a.provider[:12], verdict.reason)
                failed.append(shard)

        for shard in failed:
            others = {
                a.provider: a.params for j, a in assignments.items() if j not in failed or j < shard
            }

            def check(sp: str, params: ModelParams, others=others) -> Verdict:
                c.history.record(sp, params)
                candidates = {**others, sp: params}
                return validate_output(sp, theta, candidates, c.history, c.validation_cfg)

            replacement = await c.reassign_job(
                assignments[shard].provider, state["requests"][shard], roster, rnd, check, rs, theta
            )
            assignments[shard] = replacement.assignment
            roster[shard] = replacement.provider
            rs.outputs[replacement.provider] = replacement.assignment.params
        return {"assignments": assignments, "roster": roster}

    # ── pay ──────────────────────────────────────────
    async def pay(self, state: TrainingState) -> dict:
        rnd = state["round"]
        for _, a in sorted(state["assignments"].items()):
            await self.customer.pay_result(a, rnd)
        return {}

    # ── outer ────────────────────────────────────────
    async def outer(self, state: TrainingState) -> dict:
        c, cfg = self.customer, self.cfg
        rnd = state["round"]
        theta = state["theta_global"]
        ordered = [a for _, a in sorted(state["assignments"].items())]
        outer_state = state["outer_state"]

        if cfg.outer_mode is OuterMode.DELEGATE:
            new_theta, new_state = await c.delegate_outer(
                ordered, theta, state["theta_ref"], outer_state, rnd, state["roster"]
            )
        else:
            inner = [a.params for a in ordered]
            if cfg.run_option is RunOption.FEDAVG:
                new_theta, new_state = outer_fedavg(inner, outer_state.weights), outer_state
            else:
                new_theta, new_state = outer_diloco(theta, inner, outer_state)
            c.log.record(rnd, "", OUTER, detail=f"self {cfg.run_option}")
        return {"theta_global": new_theta, "outer_state": new_state}

    # ── update ───────────────────────────────────────
    async def update(self, state: TrainingState) -> dict:
        c, cfg = self.customer, self.cfg
        rnd = state["round"]
        theta = state["theta_global"]
        theta_ref = await c.store_model(theta)
        c.history.record_global(theta)
        test_loss = evaluate_loss(theta, cfg.model, self.lspec, self.test_set)
        rs = state["round_state"]
        if not rs.complete:
            logger.warning("Round %d closed with unvalidated providers: %s", rnd, rs.phases)
        c.log.record(rnd, "", ROUND_COMPLETE, detail=f"test loss {test_loss:.6g}")
        logger.info("✅ Round %d/%d complete, test loss %.6g", rnd, cfg.num_jobs, test_loss)

        previous = {
            shard: (a.request_event.id, a.result_event.id)
            for shard, a in state["assignments"].items()
        }
        reached = cfg.target_loss is not None and test_loss <= cfg.target_loss
        return {
            "theta_ref": theta_ref,
            "previous": previous,
            "test_losses": [test_loss],
            "round": rnd + 1,
            "stop": reached or rnd >= cfg.num_jobs,
        }

    # ── finalize ─────────────────────────────────────
    async def finalize(self, state: TrainingState) -> dict:
        c, cfg = self.customer, self.cfg
        theta = state["theta_global"]
        rounds = state["round"] - 1
        final_loss = evaluate_loss(theta, cfg.model, self.lspec, cfg.dataset)
        summary = {
            "rounds_completed": rounds,
            "run_option": str(cfg.run_option),
            "outer_mode": str(cfg.outer_mode),
            "providers": list(state["roster"]),
            "initial_loss": self.initial_loss,
            "final_loss": final_loss,
            "test_losses": list(state.get("test_losses", [])),
            "final_params_sha256": sha256_hex(serialize_params(theta)),
        }
        c.log.record(rounds, "", TRAINING_DONE, detail=f"final loss {final_loss:.6g}")
        logger.info(
            "🏁 Training done after %d rounds: loss %.6g → %.6g",
            rounds, self.initial_loss, final_loss,
        )
        return {"summary": summary}


def _should_continue(state: TrainingState) -> str:
    return "stop" if state.get("stop") else "continue"


def build_training_graph(customer: Customer):
    """Compile the round loop for ``customer``."""
    nodes = TrainingNodes(customer)
    graph = StateGraph(TrainingState)

    # ── Add nodes ────────────────────────────────────
    graph.add_node("prepare", nodes.prepare)
    graph.add_node("request_round", nodes.request_round)
    graph.add_node("validate", nodes.validate)
    graph.add_node("pay", nodes.pay)
    graph.add_node("outer", nodes.outer)
    graph.add_node("update", nodes.update)
    graph.add_node("finalize", nodes.finalize)

    # ── Round loop ───────────────────────────────────
    graph.add_edge(START, "prepare")
    graph.add_edge("prepare", "request_round")
    graph.add_edge("request_round", "validate")
    graph.add_edge("validate", "pay")
    graph.add_edge("pay", "outer")
    graph.add_edge("outer", "update")
    graph.add_conditional_edges(
        "update",
        _should_continue,
        {"continue": "request_round", "stop": "finalize"},
    )

    # ── Terminal edge ────────────────────────────────
    graph.add_edge("finalize", END)
    return graph.compile()


async def run_training(
    cfg: CustomerConfig,
    pool: RelayPool | None = None,
    store: ModelStore | None = None,
    round_log: RoundLog | None = None,
) -> TrainingResult:
    """Run a full training session.

    Raises:
        TrainingAbortedError: On any unrecoverable failure; carries the round log.
    """
    customer = Customer(cfg, pool=pool, store=store, round_log=round_log)
    try:
        await customer.start()
        graph = build_training_graph(customer)
        with tracer.start_as_current_span("customer.training") as span:
            span.set_attribute("fedstr.rounds", cfg.num_jobs)
            final = await graph.ainvoke(
                {"test_losses": [], "errors": []},
                config={"recursion_limit": 5 * cfg.num_jobs + 10},
            )
    except TrainingAbortedError:
        raise
    except FedstrError as e:
        customer.log.record(0, "", TRAINING_ABORTED, detail=f"{type(e).__name__}: {e}")
        logger.error("🛑 Training aborted: %s", e)
        raise TrainingAbortedError(str(e), customer.log) from e
    finally:
        await customer.close()
    return TrainingResult(final["theta_global"], customer.log, final["summary"])
