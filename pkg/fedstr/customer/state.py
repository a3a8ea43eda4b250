"""Round bookkeeping and the training graph state.

Provider phases move forward along

    Requested → PaymentRequested → Paid → Processing → ResultReady → Validated

A missed feedback may skip intermediate phases. Failed is reachable from any
non-terminal phase, and Reassigned only from Failed.
"""

import operator
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Annotated, Any, TypedDict

from fedstr.errors import InvalidTransitionError
from fedstr.events import JobRequest, JobResult
from fedstr.ml.optim import OuterState
from fedstr.ml.params import ModelParams
from fedstr.nostr.event import Event
from fedstr.storage import StorageRef


class Phase(StrEnum):
    REQUESTED = "Requested"
    PAYMENT_REQUESTED = "PaymentRequested"
    PAID = "Paid"
    PROCESSING = "Processing"
    RESULT_READY = "ResultReady"
    VALIDATED = "Validated"
    FAILED = "Failed"
    REASSIGNED = "Reassigned"


_CHAIN = [
    Phase.REQUESTED,
    Phase.PAYMENT_REQUESTED,
    Phase.PAID,
    Phase.PROCESSING,
    Phase.RESULT_READY,
    Phase.VALIDATED,
]
_TERMINAL = {Phase.VALIDATED, Phase.FAILED, Phase.REASSIGNED}


def can_transition(current: Phase | None, target: Phase) -> bool:
    if current is None:
        return target is Phase.REQUESTED
    if target is Phase.FAILED:
        return current not in _TERMINAL
    if target is Phase.REASSIGNED:
        return current is Phase.FAILED
    if current in _TERMINAL:
        return False
    if target is Phase.VALIDATED:
        return current is Phase.RESULT_READY
    return _CHAIN.index(target) > _CHAIN.index(current)


@dataclass
class RoundState:
    """Per-round view of every provider that was assigned work."""

    round_index: int
    theta_global: ModelParams
    phases: dict[str, Phase] = field(default_factory=dict)
    job_request_ids: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, ModelParams] = field(default_factory=dict)

    def advance(self, sp: str, target: Phase) -> None:
        """Raises:
        InvalidTransitionError: If the lifecycle does not allow the move.
        """
        current = self.phases.get(sp)
        if current == target:
            return
        if not can_transition(current, target):
            raise InvalidTransitionError(f"{sp[:12]}…: {current} → {target} not allowed")
        self.phases[sp] = target

    @property
    def active(self) -> list[str]:
        return [sp for sp, phase in self.phases.items() if phase is not Phase.REASSIGNED]

    @property
    def complete(self) -> bool:
        active = self.active
        return bool(active) and all(self.phases[sp] is Phase.VALIDATED for sp in active)


@dataclass
class Assignment:
    """A provider's finished, hash-verified job."""

    provider: str
    request_event: Event
    result_event: Event
    result: JobResult
    params: ModelParams
    velocity: ModelParams | None = None

    @property
    def output_ref(self) -> StorageRef:
        return self.result.output


class TrainingState(TypedDict, total=False):
    """Shared state across the training graph nodes.

    Fields:
        round: Current round, starting at 1.
        theta_global: Current global parameters.
        theta_ref: Where theta_global is stored.
        roster: Provider currently owning each shard.
        shard_refs: Stored CSV shard per provider slot.
        round_state: Phase bookkeeping for the current round.
        requests: Inner request sent for each shard this round, reused on reassignment.
        assignments: Validated job per shard for the current round.
        previous: (request id, result id) of the last job per shard, for chaining.
        outer_state: DiLoCo outer weights and momentum.
        test_losses: Test-set loss after every round (append-only).
        errors: Accumulated non-fatal problems (append-only).
        stop: Set when the stopping condition holds.
    """

    round: int
    theta_global: ModelParams
    theta_ref: StorageRef
    roster: list[str]
    shard_refs: list[StorageRef]
    round_state: RoundState
    requests: dict[int, JobRequest]
    assignments: dict[int, Assignment]
    previous: dict[int, tuple[str, str]]
    outer_state: OuterState
    test_losses: Annotated[list[float], operator.add]
    errors: Annotated[list[str], operator.add]
    stop: bool
    summary: dict[str, Any]
