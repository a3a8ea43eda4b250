"""Offline checks over a relay's append-only log.

The flow-ordering audit reconstructs, for every training job request, the
first occurrence of each protocol step in relay arrival order::

    request → feedback payment-required → zap receipt → feedback processing
            → feedback success → job result

Steps must appear in that order. A chain that stops early (a busy
provider, a timeout) is fine as long as what exists is a prefix. A job with
neither payment step belongs to a zero-price provider and is checked
without them.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from fedstr.events import (
    JOB_FEEDBACK_KIND,
    FeedbackStatus,
    is_job_request_kind,
    is_job_result_kind,
)
from fedstr.nostr.event import Event
from fedstr.payments import ZAP_RECEIPT_KIND
from fedstr.roundlog import RoundCounters

logger = logging.getLogger(__name__)

FLOW_STEPS = ("request", "payment-required", "receipt", "processing", "success", "result")


@dataclass(frozen=True)
class FlowViolation:
    request_id: str
    message: str


def load_relay_log(path: str | Path) -> list[Event]:
    """Events in the order the relay stored them; unreadable lines are skipped."""
    events = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            events.append(Event.model_validate(json.loads(line)["event"]))
        except (ValueError, KeyError, TypeError) as e:
            logger.warning("Skipping relay log line %d: %s", n, e)
    return events


def _referenced_request(e: Event) -> str | None:
    for values in e.tag_values("e"):
        if values and not (len(values) > 2 and values[2] == "file-metadata"):
            return values[0]
    return None


def _step_of(e: Event) -> str | None:
    if e.kind == JOB_FEEDBACK_KIND:
        status = e.first_tag_value("status")
        if status == FeedbackStatus.PAYMENT_REQUIRED.wire:
            return "payment-required"
        if status in (FeedbackStatus.PROCESSING.wire, FeedbackStatus.SUCCESS.wire):
            return status
        return None
    if e.kind == ZAP_RECEIPT_KIND:
        return "receipt"
    if is_job_result_kind(e.kind):
        return "result"
    return None


def check_flow_ordering(events: list[Event]) -> list[FlowViolation]:
    """Ordering violations per job request; empty means the log is clean."""
    first_seen: dict[str, dict[str, int]] = {}
    for position, e in enumerate(events):
        if is_job_request_kind(e.kind):
            first_seen.setdefault(e.id, {}).setdefault("request", position)
            continue
        step = _step_of(e)
        request_id = _referenced_request(e) if step else None
        if step and request_id:
            first_seen.setdefault(request_id, {}).setdefault(step, position)

    violations = []
    for request_id, steps in first_seen.items():
        if "request" not in steps:
            # round payments reference job results, not requests
            if set(steps) != {"receipt"}:
                violations.append(FlowViolation(request_id, "events for an unknown job request"))
            continue
        previous = -1
        missing = None
        # a zero-price provider never asks for the initial payment
        free = not steps.keys() & {"payment-required", "receipt"}
        for step in FLOW_STEPS:
            if free and step in ("payment-required", "receipt"):
                continue
            position = steps.get(step)
            if position is None:
                missing = missing or step
                continue
            if missing is not None:
                violations.append(
                    FlowViolation(request_id, f"{step} present but {missing} is missing")
                )
                break
            if position < previous:
                violations.append(FlowViolation(request_id, f"{step} arrived out of order"))
                break
            previous = position
    return violations


def summarize(
    training: Mapping[str, Any],
    counters: RoundCounters,
    violations: list[FlowViolation],
    completed: bool,
    error: str | None = None,
) -> dict[str, Any]:
    """Machine-readable run summary (the demo's ``--summary-out`` document)."""
    return {
        "completed": completed,
        "error": error,
        **training,
        "hash_verifications": counters.hash_verifications,
        "integrity_errors": counters.integrity_errors,
        "validation_pass": counters.validation_pass,
        "validation_fail": counters.validation_fail,
        "reassignments": counters.reassignments,
        "payments_msats": dict(counters.payments_msats),
        "failures": dict(counters.failures),
        "flow_violations": [asdict(v) for v in violations],
    }
