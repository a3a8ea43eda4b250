"""Append-only round log written by the customer.

One JSON object per line::

    {"ts": 1718000000.123, "round": 1, "provider": "<hex>", "phase": "Validated",
     "event_id": "<hex>", "detail": ""}

``phase`` is a provider phase (Requested … Reassigned) or one of the run-level
markers below. Failure details start with a category prefix such as
``integrity:`` or ``timeout:``.
"""

from __future__ import annotations

import json
import logging
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

# run-level markers
ROUND_STARTED = "RoundStarted"
ROUND_COMPLETE = "RoundComplete"
VERDICT = "Verdict"
PAYMENT = "Payment"
OUTER = "Outer"
TRAINING_DONE = "TrainingDone"
TRAINING_ABORTED = "TrainingAborted"


@dataclass(frozen=True)
class RoundRecord:
    ts: float
    round: int
    provider: str
    phase: str
    event_id: str = ""
    detail: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "ts": self.ts,
                "round": self.round,
                "provider": self.provider,
                "phase": self.phase,
                "event_id": self.event_id,
                "detail": self.detail,
            },
            ensure_ascii=False,
        )


@dataclass
class RoundCounters:
    hash_verifications: int = 0
    integrity_errors: int = 0
    validation_pass: int = 0
    validation_fail: int = 0
    reassignments: int = 0
    payments_msats: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    failures: Counter = field(default_factory=Counter)


class RoundLog:
    """In-memory records plus an optional JSONL file, flushed per line."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[RoundRecord] = []
        self.counters = RoundCounters()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def record(
        self, round_index: int, provider: str, phase: str, event_id: str = "", detail: str = ""
    ) -> RoundRecord:
        entry = RoundRecord(time.time(), round_index, provider, phase, event_id, detail)
        self.records.append(entry)
        if phase == "Reassigned":
            self.counters.reassignments += 1
        if phase == "Failed" and ":" in detail:
            self.counters.failures[detail.split(":", 1)[0]] += 1
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(entry.to_json() + "\n")
        return entry

    def hash_verified(self) -> None:
        self.counters.hash_verifications += 1

    def integrity_error(self) -> None:
        self.counters.integrity_errors += 1

    def verdict(self, round_index: int, provider: str, passed: bool, detail: str = "") -> None:
        if passed:
            self.counters.validation_pass += 1
        else:
            self.counters.validation_fail += 1
        outcome = "pass" if passed else "fail"
        self.record(round_index, provider, VERDICT, detail=f"{outcome} {detail}".strip())

    def payment(self, round_index: int, provider: str, msats: int, receipt_id: str) -> None:
        self.counters.payments_msats[provider] += msats
        self.record(round_index, provider, PAYMENT, receipt_id, f"{msats} msats")

    def phases(self, phase: str) -> list[RoundRecord]:
        return [r for r in self.records if r.phase == phase]


def load_round_log(path: str | Path) -> list[RoundRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(RoundRecord(**json.loads(line)))
    return records
