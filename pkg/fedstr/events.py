"""Typed FEDSTR marketplace events over signed NOSTR events.

Kinds:
    8000–8999  job request (AI training)
    7000       job feedback
    6000–6999  job result (request kind 8000+k is answered by 6000+k)
    31990      provider discoverability (addressable, keyed by d tag)
    1063       file metadata for stored model blobs (optional)

Every ``build_*`` has a strict ``parse_*`` inverse; parse(build(x)) == x.
Tag grammars are documented in doc/protocol.md.
"""

from __future__ import annotations

import base64
import json
import math
import re
from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from fedstr.errors import SchemaError, WrongKindError
from fedstr.ml.models import LossKind
from fedstr.ml.optim import InnerHyperparams, RunOption
from fedstr.nostr.event import Event, make_template, sign_event
from fedstr.nostr.keys import Keypair
from fedstr.storage import StorageRef

JOB_REQUEST_KIND = 8000
JOB_REQUEST_KIND_MAX = 8999
JOB_RESULT_KIND = 6000
JOB_RESULT_KIND_MAX = 6999
JOB_FEEDBACK_KIND = 7000
DISCOVERABILITY_KIND = 31990
FILE_METADATA_KIND = 1063
LEGACY_JOB_KIND_MIN = 5000
LEGACY_JOB_KIND_MAX = 5999

RESULT_KIND_OFFSET = 2000
DEFAULT_D_TAG = "fedstr-ai-vm"
FILE_METADATA_MARKER = "file-metadata"
PRIMARY_MARKERS = ("", "primary")

_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")
_OUTPUT_RE = re.compile(r"^url:(?P<url>.+);sha256:(?P<sha>[^;]*);loss:(?P<loss>[^;]+)$")

# param tag names (wire)
P_TASK = "task"
P_RUN_OPTION = "run option"
P_DATA_SET = "data_set"
P_DATA_SET_SHA256 = "data_set_sha256"
P_MODEL_STATE = "initial/current-model-state"
P_MODEL = "model"
P_LOSS = "loss"
P_HYPERPARAMETERS = "hyperparameters"
P_SOURCE_CODE = "source_code"
P_EXPECTED_TIME = "expected_execution_time"
P_HARDWARE = "recommended_hardware_specification"
P_VALIDATION_RULES = "validation_rules_for_the_output"
P_TIMEOUT = "timeout-specification"
P_OUTER_WEIGHTS = "outer_weights"
P_OUTER_LR = "outer_lr"
P_OUTER_MOMENTUM = "outer_momentum"
P_OUTER_STATE = "outer_state"

KNOWN_PARAMS = frozenset(
    {
        P_TASK, P_RUN_OPTION, P_DATA_SET, P_DATA_SET_SHA256, P_MODEL_STATE, P_MODEL, P_LOSS,
        P_HYPERPARAMETERS, P_SOURCE_CODE, P_EXPECTED_TIME, P_HARDWARE, P_VALIDATION_RULES,
        P_TIMEOUT, P_OUTER_WEIGHTS, P_OUTER_LR, P_OUTER_MOMENTUM, P_OUTER_STATE,
    }
)


def result_kind_for(request_kind: int) -> int:
    return request_kind - RESULT_KIND_OFFSET


def is_job_request_kind(kind: int) -> bool:
    return JOB_REQUEST_KIND <= kind <= JOB_REQUEST_KIND_MAX


def is_job_result_kind(kind: int) -> bool:
    return JOB_RESULT_KIND <= kind <= JOB_RESULT_KIND_MAX


def is_legacy_job_kind(kind: int) -> bool:
    """Data-processing job kinds: recognized but not handled by the AI parsers."""
    return LEGACY_JOB_KIND_MIN <= kind <= LEGACY_JOB_KIND_MAX


class Task(StrEnum):
    INNER = "Inner"
    OUTER = "Outer"


class InputType(StrEnum):
    URL = "url"
    EVENT = "event"
    JOB = "job"
    TEXT = "text"


class FeedbackStatus(StrEnum):
    PAYMENT_REQUIRED = "payment_required"
    PROCESSING = "processing"
    ERROR = "error"
    SUCCESS = "success"
    PARTIAL = "partial"

    @property
    def wire(self) -> str:
        return self.value.replace("_", "-")

    @classmethod
    def from_wire(cls, value: str) -> FeedbackStatus:
        try:
            return cls(value.replace("-", "_"))
        except ValueError as e:
            raise SchemaError("status", f"unknown status {value!r}") from e


# ── Shared models ────────────────────────────────────
class _Record(BaseModel):
    model_config = ConfigDict(frozen=True)


class JobInput(_Record):
    data: str
    input_type: InputType
    relay_hint: str = ""
    marker: str = ""

    @property
    def is_primary(self) -> bool:
        return self.marker in PRIMARY_MARKERS


class InlineModelState(_Record):
    """Raw parameter bytes carried in the event itself (``raw:<base64>``)."""

    data: bytes

    def render(self) -> str:
        return "raw:" + base64.b64encode(self.data).decode("ascii")


def _hex64(value: str, tag: str) -> str:
    if not _HEX64_RE.match(value):
        raise SchemaError(tag, f"expected 64 lowercase hex characters, got {value[:70]!r}")
    return value


def _num(value: float) -> str:
    return repr(float(value))


def _parse_float(value: str, tag: str) -> float:
    try:
        parsed = float(value)
    except ValueError as e:
        raise SchemaError(tag, f"not a number: {value!r}") from e
    if not math.isfinite(parsed):
        raise SchemaError(tag, "must be finite")
    return parsed


def _parse_int(value: str, tag: str) -> int:
    try:
        parsed = int(value)
    except ValueError as e:
        raise SchemaError(tag, f"not an integer: {value!r}") from e
    if parsed < 0:
        raise SchemaError(tag, "must be non-negative")
    return parsed


def _check_kind(e: Event, low: int, high: int, what: str) -> None:
    if not low <= e.kind <= high:
        raise WrongKindError(f"kind {e.kind} is not a {what} ({low}–{high})")


def _single(e: Event, name: str, required: bool = True) -> list[str] | None:
    tags = e.tag_values(name)
    if not tags:
        if required:
            raise SchemaError(name, "missing")
        return None
    if len(tags) > 1 and any(t != tags[0] for t in tags[1:]):
        raise SchemaError(name, "duplicated with conflicting values")
    if not tags[0]:
        raise SchemaError(name, "has no value")
    return tags[0]


def _build(kind: int, tags: list[list[str]], content: str, signer: Keypair) -> Event:
    return sign_event(make_template(signer, kind, tags, content), signer)


# ── Job request ──────────────────────────────────────
class JobRequest(_Record):
    """Typed view of a kind 8000–8999 training job request."""

    kind: int = JOB_REQUEST_KIND
    inputs: list[JobInput]
    output_spec: str = "application/octet-stream"
    relays: list[str] = Field(default_factory=list)
    bid_msats: int | None = Field(default=None, ge=0)
    providers: list[str] = Field(default_factory=list)
    task: Task
    run_option: RunOption
    data_set_url: str = ""
    data_set_sha256: str | None = None
    model_state: StorageRef | InlineModelState
    model_spec: str
    loss: LossKind = LossKind.MSE
    hyperparameters: InnerHyperparams | None = None
    source_code_url: str = ""
    expected_execution_time: float | None = None
    hardware_spec: str = ""
    validation_rules_url: str = ""
    timeout_max: float | None = None
    previous_result_id: str | None = None
    outer_weights: list[float] | None = None
    outer_lr: float | None = None
    outer_momentum: float | None = None
    outer_state: StorageRef | None = None
    extra_params: list[tuple[str, str]] = Field(default_factory=list)

    @model_validator(mode="after")
    def _invariants(self) -> JobRequest:
        if not is_job_request_kind(self.kind):
            raise ValueError(f"job request kind {self.kind} outside 8000–8999")
        primaries = [i for i in self.inputs if i.is_primary]
        if len(primaries) != 1:
            raise ValueError(f"expected exactly one primary input, found {len(primaries)}")
        for i in self.inputs:
            if i.input_type is InputType.JOB and not _HEX64_RE.match(i.data):
                raise ValueError("job inputs must reference a prior job-request event id")
        for name, _ in self.extra_params:
            if name in KNOWN_PARAMS:
                raise ValueError(f"extra param {name!r} shadows a known param")
        return self

    @property
    def primary_input(self) -> JobInput:
        return next(i for i in self.inputs if i.is_primary)

    def inputs_marked(self, marker: str) -> list[JobInput]:
        return [i for i in self.inputs if i.marker == marker]

    def with_provider(self, pubkey: str) -> JobRequest:
        """Same request addressed to a different provider (reassignment)."""
        return self.model_copy(update={"providers": [pubkey]})


def _ref_param(name: str, ref: StorageRef) -> list[str]:
    tag = ["param", name, ref.render()]
    if ref.size_bytes is not None:
        tag.append(str(ref.size_bytes))
    return tag


def build_job_request(req: JobRequest, signer: Keypair) -> Event:
    tags: list[list[str]] = []
    for i in req.inputs:
        tags.append(["i", i.data, i.input_type.value, i.relay_hint, i.marker])
    tags.append(["output", req.output_spec])
    if req.relays:
        tags.append(["relays", *req.relays])
    if req.bid_msats is not None:
        tags.append(["bid", str(req.bid_msats)])
    tags.append(["t", "bitcoin"])
    for pubkey in req.providers:
        tags.append(["p", pubkey])
    if req.previous_result_id:
        tags.append(["e", req.previous_result_id, req.relays[0] if req.relays else ""])

    tags.append(["param", P_TASK, req.task.value])
    tags.append(["param", P_RUN_OPTION, req.run_option.value])
    if req.data_set_url:
        tags.append(["param", P_DATA_SET, req.data_set_url])
    if req.data_set_sha256:
        tags.append(["param", P_DATA_SET_SHA256, req.data_set_sha256])
    if isinstance(req.model_state, StorageRef):
        tags.append(_ref_param(P_MODEL_STATE, req.model_state))
    else:
        tags.append(["param", P_MODEL_STATE, req.model_state.render()])
    tags.append(["param", P_MODEL, req.model_spec])
    tags.append(["param", P_LOSS, req.loss.value])
    if req.hyperparameters is not None:
        tags.append(["param", P_HYPERPARAMETERS, req.hyperparameters.model_dump_json()])
    optional = [
        (P_SOURCE_CODE, req.source_code_url or None),
        (P_EXPECTED_TIME, _num(req.expected_execution_time)
         if req.expected_execution_time is not None else None),
        (P_HARDWARE, req.hardware_spec or None),
        (P_VALIDATION_RULES, req.validation_rules_url or None),
        (P_TIMEOUT, _num(req.timeout_max) if req.timeout_max is not None else None),
        (P_OUTER_WEIGHTS, ",".join(_num(w) for w in req.outer_weights)
         if req.outer_weights else None),
        (P_OUTER_LR, _num(req.outer_lr) if req.outer_lr is not None else None),
        (P_OUTER_MOMENTUM, _num(req.outer_momentum) if req.outer_momentum is not None else None),
    ]
    for name, value in optional:
        if value is not None:
            tags.append(["param", name, value])
    if req.outer_state is not None:
        tags.append(_ref_param(P_OUTER_STATE, req.outer_state))
    for name, value in req.extra_params:
        tags.append(["param", name, value])
    return _build(req.kind, tags, "", signer)


def _parse_ref(value: list[str], tag: str) -> StorageRef:
    size = _parse_int(value[1], tag) if len(value) > 1 and value[1] else None
    try:
        return StorageRef.parse(value[0], size)
    except (ValueError, ValidationError) as e:
        raise SchemaError(tag, str(e)) from e


def _parse_model_state(value: list[str], max_inline_bytes: int) -> StorageRef | InlineModelState:
    if value[0].startswith("raw:"):
        try:
            data = base64.b64decode(value[0][4:], validate=True)
        except ValueError as e:
            raise SchemaError(P_MODEL_STATE, "inline state is not base64") from e
        if len(data) > max_inline_bytes:
            raise SchemaError(
                P_MODEL_STATE, f"inline state of {len(data)} bytes exceeds {max_inline_bytes}"
            )
        return InlineModelState(data=data)
    return _parse_ref(value, P_MODEL_STATE)


def parse_job_request(e: Event, max_inline_bytes: int = 64 * 1024) -> JobRequest:
    """Strict parse of a training job request.

    Raises:
        WrongKindError: Kind outside 8000–8999 (legacy 5000–5999 included).
        SchemaError: Missing, duplicated or malformed tags, naming the tag.
    """
    _check_kind(e, JOB_REQUEST_KIND, JOB_REQUEST_KIND_MAX, "training job request")

    params: dict[str, list[str]] = {}
    extra: list[tuple[str, str]] = []
    for values in e.tag_values("param"):
        if len(values) < 2:
            raise SchemaError("param", f"malformed param tag {values!r}")
        name, rest = values[0], values[1:]
        if name not in KNOWN_PARAMS:
            extra.append((name, rest[0]))
            continue
        if name in params and params[name] != rest:
            raise SchemaError(name, "duplicated with conflicting values")
        params[name] = rest

    def required(name: str) -> list[str]:
        if name not in params:
            raise SchemaError(name, "missing")
        return params[name]

    def optional(name: str) -> str | None:
        return params[name][0] if name in params else None

    task_value = required(P_TASK)[0]
    try:
        task = Task(task_value)
    except ValueError as exc:
        raise SchemaError(P_TASK, f"unknown task {task_value!r}") from exc
    run_option_value = required(P_RUN_OPTION)[0]
    try:
        run_option = RunOption(run_option_value)
    except ValueError as exc:
        raise SchemaError(P_RUN_OPTION, f"unknown run option {run_option_value!r}") from exc
    try:
        loss = LossKind(optional(P_LOSS) or LossKind.MSE.value)
    except ValueError as exc:
        raise SchemaError(P_LOSS, f"unknown loss {params[P_LOSS][0]!r}") from exc

    inputs = []
    for values in e.tag_values("i"):
        if len(values) < 2:
            raise SchemaError("i", f"malformed input tag {values!r}")
        try:
            input_type = InputType(values[1])
        except ValueError as exc:
            raise SchemaError("i", f"unknown input type {values[1]!r}") from exc
        inputs.append(
            JobInput(
                data=values[0],
                input_type=input_type,
                relay_hint=values[2] if len(values) > 2 else "",
                marker=values[3] if len(values) > 3 else "",
            )
        )

    hyper = optional(P_HYPERPARAMETERS)
    try:
        hyperparameters = InnerHyperparams.model_validate_json(hyper) if hyper else None
    except ValidationError as exc:
        raise SchemaError(P_HYPERPARAMETERS, str(exc)) from exc

    bid = _single(e, "bid", required=False)
    previous = _single(e, "e", required=False)
    relays = e.first_tag("relays") or []
    output = _single(e, "output", required=False)
    weights = optional(P_OUTER_WEIGHTS)
    data_set_sha256 = optional(P_DATA_SET_SHA256)

    try:
        return JobRequest(
            kind=e.kind,
            inputs=inputs,
            output_spec=output[0] if output else "application/octet-stream",
            relays=list(relays),
            bid_msats=_parse_int(bid[0], "bid") if bid else None,
            providers=[v[0] for v in e.tag_values("p") if v],
            task=task,
            run_option=run_option,
            data_set_url=optional(P_DATA_SET) or "",
            data_set_sha256=_hex64(data_set_sha256, P_DATA_SET_SHA256) if data_set_sha256 else None,
            model_state=_parse_model_state(required(P_MODEL_STATE), max_inline_bytes),
            model_spec=required(P_MODEL)[0],
            loss=loss,
            hyperparameters=hyperparameters,
            source_code_url=optional(P_SOURCE_CODE) or "",
            expected_execution_time=_parse_float(optional(P_EXPECTED_TIME), P_EXPECTED_TIME)
            if optional(P_EXPECTED_TIME) is not None else None,
            hardware_spec=optional(P_HARDWARE) or "",
            validation_rules_url=optional(P_VALIDATION_RULES) or "",
            timeout_max=_parse_float(optional(P_TIMEOUT), P_TIMEOUT)
            if optional(P_TIMEOUT) is not None else None,
            previous_result_id=_hex64(previous[0], "e") if previous else None,
            outer_weights=[_parse_float(w, P_OUTER_WEIGHTS) for w in weights.split(",")]
            if weights else None,
            outer_lr=_parse_float(optional(P_OUTER_LR), P_OUTER_LR)
            if optional(P_OUTER_LR) is not None else None,
            outer_momentum=_parse_float(optional(P_OUTER_MOMENTUM), P_OUTER_MOMENTUM)
            if optional(P_OUTER_MOMENTUM) is not None else None,
            outer_state=_parse_ref(params[P_OUTER_STATE], P_OUTER_STATE)
            if P_OUTER_STATE in params else None,
            extra_params=extra,
        )
    except ValidationError as exc:
        raise SchemaError("i", exc.errors()[0]["msg"]) from exc


# ── Job feedback ─────────────────────────────────────
class JobFeedback(_Record):
    """Typed view of a kind 7000 job feedback event."""

    status: FeedbackStatus
    extra_info: str = ""
    amount_msats: int | None = Field(default=None, ge=0)
    bolt11: str | None = None
    job_request_id: str
    relay_hint: str = ""
    customer_pubkey: str
    payload: str | None = None
    lnurl: str | None = None

    @field_validator("payload", "bolt11", "lnurl")
    @classmethod
    def _empty_is_none(cls, v: str | None) -> str | None:
        return v or None


def build_feedback(fb: JobFeedback, signer: Keypair) -> Event:
    tags = [["status", fb.status.wire, fb.extra_info]]
    if fb.amount_msats is not None:
        amount = ["amount", str(fb.amount_msats)]
        if fb.bolt11:
            amount.append(fb.bolt11)
        tags.append(amount)
    tags.append(["e", fb.job_request_id, fb.relay_hint])
    tags.append(["p", fb.customer_pubkey])
    if fb.lnurl:
        tags.append(["lnurl", fb.lnurl])
    return _build(JOB_FEEDBACK_KIND, tags, fb.payload or "", signer)


def parse_feedback(e: Event) -> JobFeedback:
    """Raises:
    WrongKindError: Kind is not 7000.
    SchemaError: Unknown status or missing e/p tags.
    """
    _check_kind(e, JOB_FEEDBACK_KIND, JOB_FEEDBACK_KIND, "job feedback")
    status = _single(e, "status")
    amount = _single(e, "amount", required=False)
    request = _single(e, "e")
    customer = _single(e, "p")
    lnurl = _single(e, "lnurl", required=False)
    return JobFeedback(
        status=FeedbackStatus.from_wire(status[0]),
        extra_info=status[1] if len(status) > 1 else "",
        amount_msats=_parse_int(amount[0], "amount") if amount else None,
        bolt11=amount[1] if amount and len(amount) > 1 else None,
        job_request_id=_hex64(request[0], "e"),
        relay_hint=request[1] if len(request) > 1 else "",
        customer_pubkey=_hex64(customer[0], "p"),
        payload=e.content or None,
        lnurl=lnurl[0] if lnurl else None,
    )


# ── Job result ───────────────────────────────────────
class JobResult(_Record):
    """Typed view of a kind 6000–6999 job result."""

    kind: int = JOB_RESULT_KIND
    request_json: str
    job_request_id: str
    relay_hint: str = ""
    customer_pubkey: str
    amount_msats: int = Field(default=0, ge=0)
    bolt11: str | None = None
    info: list[tuple[str, str]] = Field(default_factory=list)
    output: StorageRef
    reported_loss: float
    file_metadata_id: str | None = None

    @model_validator(mode="after")
    def _invariants(self) -> JobResult:
        if not is_job_result_kind(self.kind):
            raise ValueError(f"job result kind {self.kind} outside 6000–6999")
        if not math.isfinite(self.reported_loss):
            raise ValueError("reported loss must be finite")
        return self

    def info_value(self, label: str) -> str | None:
        return next((v for k, v in self.info if k == label), None)


def build_job_result(r: JobResult, signer: Keypair) -> Event:
    tags = [
        ["request", r.request_json],
        ["e", r.job_request_id, r.relay_hint],
    ]
    if r.file_metadata_id:
        tags.append(["e", r.file_metadata_id, r.relay_hint, FILE_METADATA_MARKER])
    tags.append(["p", r.customer_pubkey])
    amount = ["amount", str(r.amount_msats)]
    if r.bolt11:
        amount.append(r.bolt11)
    tags.append(amount)
    for label, value in r.info:
        tags.append(["i", label, value])
    output = ["output", f"{r.output.render()};loss:{_num(r.reported_loss)}"]
    if r.output.size_bytes is not None:
        output.append(str(r.output.size_bytes))
    tags.append(output)
    return _build(r.kind, tags, "", signer)


def parse_job_result(e: Event) -> JobResult:
    """Raises:
    WrongKindError: Kind outside 6000–6999.
    SchemaError: Missing e tag, malformed output or digest.
    """
    _check_kind(e, JOB_RESULT_KIND, JOB_RESULT_KIND_MAX, "job result")
    request_ref = None
    file_metadata_id = None
    for values in e.tag_values("e"):
        if len(values) > 2 and values[2] == FILE_METADATA_MARKER:
            file_metadata_id = _hex64(values[0], "e")
        elif request_ref is None and values:
            request_ref = values
    if request_ref is None:
        raise SchemaError("e", "missing job request reference")

    output = _single(e, "output")
    match = _OUTPUT_RE.match(output[0])
    if not match:
        raise SchemaError("output", f"malformed output {output[0][:80]!r}")
    size = _parse_int(output[1], "output") if len(output) > 1 and output[1] else None
    ref = StorageRef(url=match["url"], sha256=_hex64(match["sha"], "output"), size_bytes=size)
    amount = _single(e, "amount", required=False)
    request = _single(e, "request")
    customer = _single(e, "p")
    return JobResult(
        kind=e.kind,
        request_json=request[0],
        job_request_id=_hex64(request_ref[0], "e"),
        relay_hint=request_ref[1] if len(request_ref) > 1 else "",
        customer_pubkey=_hex64(customer[0], "p"),
        amount_msats=_parse_int(amount[0], "amount") if amount else 0,
        bolt11=amount[1] if amount and len(amount) > 1 else None,
        info=[(v[0], v[1] if len(v) > 1 else "") for v in e.tag_values("i") if v],
        output=ref,
        reported_loss=_parse_float(match["loss"], "output"),
        file_metadata_id=file_metadata_id,
    )


# ── Discoverability ──────────────────────────────────
class ProviderSpec(_Record):
    hardware: str
    max_execution_time: float
    model_dimensions_range: str


class Discoverability(_Record):
    """Typed view of a kind 31990 provider announcement."""

    name: str
    about: str = ""
    supported_kinds: list[int] = Field(default_factory=list)
    specs: list[ProviderSpec] = Field(default_factory=list)
    d_tag: str = DEFAULT_D_TAG
    lnurl: str | None = None

    @property
    def usable(self) -> bool:
        return bool(self.supported_kinds)


def build_discoverability(d: Discoverability, signer: Keypair) -> Event:
    tags = [["d", d.d_tag]]
    tags.extend(["k", str(k)] for k in d.supported_kinds)
    tags.append(["t", "bitcoin"])
    for s in d.specs:
        tags.append(
            ["i", "specifications", s.hardware, _num(s.max_execution_time),
             s.model_dimensions_range]
        )
    if d.lnurl:
        tags.append(["lnurl", d.lnurl])
    content = json.dumps({"name": d.name, "about": d.about}, ensure_ascii=False)
    return _build(DISCOVERABILITY_KIND, tags, content, signer)


def parse_discoverability(e: Event) -> Discoverability:
    _check_kind(e, DISCOVERABILITY_KIND, DISCOVERABILITY_KIND, "discoverability announcement")
    try:
        content = json.loads(e.content) if e.content else {}
    except json.JSONDecodeError as exc:
        raise SchemaError("content", "not JSON") from exc
    if not isinstance(content, dict):
        raise SchemaError("content", "not a JSON object")
    specs = []
    for values in e.tag_values("i"):
        if not values or values[0] != "specifications":
            continue
        if len(values) < 4:
            raise SchemaError("i", "specifications tag needs hardware, time and dimensions")
        specs.append(
            ProviderSpec(
                hardware=values[1],
                max_execution_time=_parse_float(values[2], "i"),
                model_dimensions_range=values[3],
            )
        )
    kinds = []
    for values in e.tag_values("k"):
        if values:
            kinds.append(_parse_int(values[0], "k"))
    lnurl = _single(e, "lnurl", required=False)
    return Discoverability(
        name=str(content.get("name", "")),
        about=str(content.get("about", "")),
        supported_kinds=kinds,
        specs=specs,
        d_tag=e.first_tag_value("d") or "",
        lnurl=lnurl[0] if lnurl else None,
    )


# ── File metadata ────────────────────────────────────
class FileMetadata(_Record):
    """Typed view of a kind 1063 file metadata event."""

    url: str
    sha256: str
    mime: str = "application/octet-stream"
    size_bytes: int = Field(ge=0)
    alt: str = ""
    description: str = ""

    @field_validator("sha256")
    @classmethod
    def _hex_digest(cls, v: str) -> str:
        if not _HEX64_RE.match(v):
            raise ValueError("sha256 must be 64 lowercase hex characters")
        return v

    @classmethod
    def for_ref(cls, ref: StorageRef, description: str = "") -> FileMetadata:
        return cls(
            url=ref.url,
            sha256=ref.sha256,
            size_bytes=ref.size_bytes or 0,
            alt="FEDSTR model parameters",
            description=description,
        )


def build_file_metadata(m: FileMetadata, signer: Keypair) -> Event:
    tags = [
        ["url", m.url],
        ["x", m.sha256],
        ["m", m.mime],
        ["size", str(m.size_bytes)],
        ["alt", m.alt],
    ]
    return _build(FILE_METADATA_KIND, tags, m.description, signer)


def parse_file_metadata(e: Event) -> FileMetadata:
    _check_kind(e, FILE_METADATA_KIND, FILE_METADATA_KIND, "file metadata")
    mime = _single(e, "m", required=False)
    alt = e.first_tag("alt")
    return FileMetadata(
        url=_single(e, "url")[0],
        sha256=_hex64(_single(e, "x")[0], "x"),
        mime=mime[0] if mime else "application/octet-stream",
        size_bytes=_parse_int(_single(e, "size")[0], "size"),
        alt=alt[0] if alt else "",
        description=e.content,
    )
