"""Zap requests (9734), zap receipts (9735) and receipt validation.

Lightning is stubbed: invoices are ``lnstub1<amount_msats>m<16-hex hash>``
strings that are NOT interoperable with real Lightning. Each recipient runs
a ``StubLightningNode`` whose wallet key is its own identity key; payers hand
it the zap request over the relays (standing in for the lnurl pay callback)
and the node signs and publishes the receipt. A real NIP-57 backend can
replace the node behind the same interface.

A validated receipt is not proof of settlement; the final node check is a
pluggable hook that always passes in stub mode.
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import re
import time
from collections.abc import Callable
from dataclasses import dataclass

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from fedstr.errors import PaymentError
from fedstr.nostr.event import Event, make_template, sign_event, verify_event
from fedstr.nostr.filters import Filter
from fedstr.nostr.keys import Keypair
from fedstr.relay.client import RelayPool

logger = logging.getLogger(__name__)

ZAP_REQUEST_KIND = 9734
ZAP_RECEIPT_KIND = 9735

_BOLT11_RE = re.compile(r"^lnstub1(?P<amount>\d+)m(?P<hash>[0-9a-f]{16})$")

NodeCheck = Callable[[Event], bool]


def stub_node_check(receipt: Event) -> bool:
    """Stub for asking a Lightning node whether the invoice settled."""
    return True


def default_lnurl(pubkey: str) -> str:
    return f"lnurlstub:{pubkey}"


# ── Invoices ─────────────────────────────────────────
@dataclass(frozen=True)
class Bolt11Stub:
    amount_msats: int
    payment_hash: str

    def render(self) -> str:
        return f"lnstub1{self.amount_msats}m{self.payment_hash}"

    @classmethod
    def parse(cls, text: str) -> Bolt11Stub:
        """Raises:
        PaymentError: If ``text`` is not a stub invoice.
        """
        match = _BOLT11_RE.match(text or "")
        if not match:
            raise PaymentError(f"not a stub invoice: {text[:40]!r}")
        return cls(int(match["amount"]), match["hash"])

    @classmethod
    def for_reference(cls, amount_msats: int, reference: str) -> Bolt11Stub:
        """Invoice whose payment hash is derived from ``reference`` (an event id)."""
        digest = hashlib.sha256(reference.encode("utf-8")).digest()[:8].hex()
        return cls(amount_msats, digest)


# ── Zap request ──────────────────────────────────────
class ZapRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    amount_msats: int = Field(gt=0)
    lnurl: str
    recipient: str
    event_id: str | None = None
    relays: list[str] = Field(default_factory=list)
    content: str = ""


def create_zap_request(
    amount: int,
    lnurl: str,
    recipient: str,
    event_id: str | None,
    signer: Keypair,
    relays: list[str] | None = None,
    content: str = "",
) -> Event:
    """Signed kind 9734 event for the recipient's pay endpoint.

    Raises:
        PaymentError: If ``amount`` is not positive.
    """
    if amount <= 0:
        raise PaymentError(f"zap amount must be positive, got {amount}")
    tags = [
        ["relays", *(relays or [])],
        ["amount", str(amount)],
        ["lnurl", lnurl],
        ["p", recipient],
    ]
    if event_id:
        tags.append(["e", event_id])
    return sign_event(make_template(signer, ZAP_REQUEST_KIND, tags, content), signer)


def parse_zap_request(e: Event) -> ZapRequest:
    """Raises:
    PaymentError: Wrong kind or missing/malformed tags.
    """
    if e.kind != ZAP_REQUEST_KIND:
        raise PaymentError(f"kind {e.kind} is not a zap request")
    amount = e.first_tag_value("amount")
    recipient = e.first_tag_value("p")
    if amount is None or recipient is None:
        raise PaymentError("zap request needs amount and p tags")
    try:
        return ZapRequest(
            amount_msats=int(amount),
            lnurl=e.first_tag_value("lnurl") or "",
            recipient=recipient,
            event_id=e.first_tag_value("e"),
            relays=list(e.first_tag("relays") or []),
            content=e.content,
        )
    except (ValueError, ValidationError) as exc:
        raise PaymentError(f"malformed zap request: {exc}") from exc


# ── Receipts ─────────────────────────────────────────
def build_zap_receipt(
    request: Event, bolt11: str, wallet: Keypair, created_at: int | None = None
) -> Event:
    """Kind 9735 receipt embedding ``request`` as its description."""
    tags = [["p", request.first_tag_value("p") or ""], ["P", request.pubkey]]
    event_id = request.first_tag_value("e")
    if event_id:
        tags.append(["e", event_id])
    tags.append(["bolt11", bolt11])
    tags.append(["description", request.to_json()])
    return sign_event(make_template(wallet, ZAP_RECEIPT_KIND, tags, "", created_at), wallet)


class StubLightningNode:
    """The recipient's wallet: settles zap requests instantly and publishes the receipt.

    Receipts are signed by the wallet keypair, which is the recipient's own
    identity key. Payments are serialized so receipt timestamps never go
    backwards.
    """

    def __init__(self, wallet: Keypair, pool: RelayPool | None = None, lnurl: str | None = None):
        self.wallet = wallet
        self.pool = pool
        self.lnurl = lnurl or default_lnurl(wallet.pubkey_hex)
        self._lock = asyncio.Lock()
        self._last_created_at = 0
        self.paid_msats = 0

    async def stub_pay(self, request: Event) -> Event:
        """Mint an invoice for the requested amount and emit the receipt.

        Raises:
            PaymentError: If the zap request is malformed, unsigned or meant
                for another wallet.
        """
        zap = parse_zap_request(request)
        if not verify_event(request):
            raise PaymentError("zap request signature does not verify")
        if zap.recipient != self.wallet.pubkey_hex or zap.lnurl != self.lnurl:
            raise PaymentError("zap request is addressed to another wallet")
        bolt11 = Bolt11Stub.for_reference(zap.amount_msats, request.id).render()
        async with self._lock:
            created_at = max(int(time.time()), self._last_created_at)
            self._last_created_at = created_at
            receipt = build_zap_receipt(request, bolt11, self.wallet, created_at)
            if self.pool is not None:
                await self.pool.publish(receipt, urls=zap.relays or None)
            self.paid_msats += zap.amount_msats
        logger.info(
            "⚡ Settled %d msats from %s… (receipt %s…)",
            zap.amount_msats, request.pubkey[:12], receipt.id[:12],
        )
        return receipt


async def pay_via_relay(pool: RelayPool, request: Event, timeout: float) -> Event:
    """Hand ``request`` to the recipient's wallet and wait for its receipt.

    Raises:
        PaymentError: If the request is malformed or no valid receipt arrives
            within ``timeout`` seconds.
    """
    zap = parse_zap_request(request)
    expected = ExpectedPayment(
        recipient=zap.recipient,
        amount_msats=zap.amount_msats,
        lnurl=zap.lnurl,
        event_id=zap.event_id,
        wallet=zap.recipient,
    )
    tag_queries = {"e": [zap.event_id]} if zap.event_id else {"p": [zap.recipient]}
    filters = [Filter(kinds=[ZAP_RECEIPT_KIND], authors=[zap.recipient], tag_queries=tag_queries)]

    def settles(receipt: Event) -> bool:
        return _described_request_id(receipt) == request.id and (
            validate_receipt(receipt, expected).passed
        )

    await pool.publish(request, urls=zap.relays or None)
    receipt = await pool.wait_for(filters, timeout, predicate=settles)
    if receipt is None:
        raise PaymentError(f"no receipt from {zap.recipient[:12]}… within {timeout:.0f}s")
    return receipt


def _described_request_id(receipt: Event) -> str | None:
    try:
        return Event.from_json(receipt.first_tag_value("description") or "").id
    except ValueError:
        return None


# ── Validation ───────────────────────────────────────
@dataclass(frozen=True)
class ExpectedPayment:
    recipient: str
    amount_msats: int
    lnurl: str
    event_id: str | None = None
    wallet: str | None = None


@dataclass(frozen=True)
class ReceiptVerdict:
    passed: bool
    reason: str = ""
    amount_msats: int = 0


def validate_receipt(
    receipt: Event, expected: ExpectedPayment, node_check: NodeCheck = stub_node_check
) -> ReceiptVerdict:
    """Check a receipt against what the recipient asked for.

    The three protocol checks are recipient, bolt11 amount against the zap
    request's amount tag, and lnurl. The expected event id and amount are
    enforced as well so a receipt for another job cannot be replayed.
    """
    if receipt.kind != ZAP_RECEIPT_KIND:
        return ReceiptVerdict(False, "wrong kind")
    if not verify_event(receipt):
        return ReceiptVerdict(False, "invalid signature")
    if expected.wallet is not None and receipt.pubkey != expected.wallet:
        return ReceiptVerdict(False, "wallet mismatch")

    description = receipt.first_tag_value("description")
    try:
        request = Event.from_json(description or "")
        zap = parse_zap_request(request)
    except (ValueError, PaymentError):
        return ReceiptVerdict(False, "malformed description")
    if not verify_event(request):
        return ReceiptVerdict(False, "malformed description")

    recipient = receipt.first_tag_value("p")
    if recipient != expected.recipient or zap.recipient != expected.recipient:
        return ReceiptVerdict(False, "recipient mismatch")

    try:
        invoice = Bolt11Stub.parse(receipt.first_tag_value("bolt11") or "")
    except PaymentError:
        return ReceiptVerdict(False, "amount mismatch")
    if invoice.amount_msats != zap.amount_msats:
        return ReceiptVerdict(False, "amount mismatch")

    if zap.lnurl != expected.lnurl:
        return ReceiptVerdict(False, "lnurl mismatch")
    if expected.event_id is not None and zap.event_id != expected.event_id:
        return ReceiptVerdict(False, "event mismatch")
    if zap.amount_msats < expected.amount_msats:
        return ReceiptVerdict(False, "insufficient amount")
    if not node_check(receipt):
        return ReceiptVerdict(False, "node check failed")
    return ReceiptVerdict(True, amount_msats=zap.amount_msats)
