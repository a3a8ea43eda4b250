"""Unit tests for stub invoices, zap requests and receipt validation."""

import pytest

from fedstr.errors import PaymentError
from fedstr.nostr import generate_keypair, make_template, sign_event
from fedstr.payments import (
    ZAP_RECEIPT_KIND,
    Bolt11Stub,
    ExpectedPayment,
    StubLightningNode,
    build_zap_receipt,
    create_zap_request,
    parse_zap_request,
    validate_receipt,
)

pytestmark = pytest.mark.unit

LNURL = "lnurlstub:provider"
JOB_ID = "ab" * 32


@pytest.fixture
def customer():
    return generate_keypair(bytes([3]) * 32)


@pytest.fixture
def provider():
    return generate_keypair(bytes([4]) * 32)


@pytest.fixture
def expected(provider) -> ExpectedPayment:
    return ExpectedPayment(
        recipient=provider.pubkey_hex, amount_msats=1000, lnurl=LNURL, event_id=JOB_ID
    )


def _request(customer, provider, amount=1000, lnurl=LNURL, event_id=JOB_ID):
    return create_zap_request(amount, lnurl, provider.pubkey_hex, event_id, customer)


def _receipt(request, wallet, amount=None):
    zap = parse_zap_request(request)
    bolt11 = Bolt11Stub.for_reference(amount or zap.amount_msats, request.id).render()
    return build_zap_receipt(request, bolt11, wallet)


class TestBolt11Stub:
    """Stub invoice strings."""

    def test_render_and_parse(self):
        invoice = Bolt11Stub(2500, "0123456789abcdef")
        assert invoice.render() == "lnstub12500m0123456789abcdef"
        assert Bolt11Stub.parse(invoice.render()) == invoice

    @pytest.mark.parametrize("text", ["", "lnbc1...", "lnstub1m0123456789abcdef", "lnstub15mXYZ"])
    def test_rejects_garbage(self, text):
        with pytest.raises(PaymentError):
            Bolt11Stub.parse(text)

    def test_reference_hash_is_deterministic(self):
        assert Bolt11Stub.for_reference(5, "x") == Bolt11Stub.for_reference(5, "x")
        assert Bolt11Stub.for_reference(5, "x") != Bolt11Stub.for_reference(5, "y")


class TestZapRequest:
    """Kind 9734 construction and parsing."""

    def test_round_trip(self, customer, provider):
        e = create_zap_request(
            1000, LNURL, provider.pubkey_hex, JOB_ID, customer, relays=["ws://r"], content="hi"
        )
        zap = parse_zap_request(e)
        assert zap.amount_msats == 1000
        assert zap.recipient == provider.pubkey_hex
        assert zap.event_id == JOB_ID
        assert zap.relays == ["ws://r"]

    def test_non_positive_amount(self, customer, provider):
        with pytest.raises(PaymentError):
            _request(customer, provider, amount=0)

    def test_wrong_kind(self, customer):
        with pytest.raises(PaymentError):
            parse_zap_request(sign_event(make_template(customer, 1, [["amount", "1"]]), customer))


class TestReceiptValidation:
    """Receipt checks, one mutation per reason."""

    def test_valid_receipt_passes(self, customer, provider, expected):
        verdict = validate_receipt(_receipt(_request(customer, provider), customer), expected)
        assert verdict.passed
        assert verdict.amount_msats == 1000

    def test_overpayment_passes(self, customer, provider, expected):
        receipt = _receipt(_request(customer, provider, amount=1500), customer)
        assert validate_receipt(receipt, expected).passed

    def test_recipient_mismatch(self, customer, provider, expected):
        stranger = generate_keypair(bytes([9]) * 32)
        request = create_zap_request(1000, LNURL, stranger.pubkey_hex, JOB_ID, customer)
        verdict = validate_receipt(_receipt(request, customer), expected)
        assert verdict.reason == "recipient mismatch"

    def test_receipt_p_tag_mismatch(self, customer, provider, expected):
        request = _request(customer, provider)
        receipt = _receipt(request, customer)
        tags = [["p", "cd" * 32] if t[0] == "p" else t for t in receipt.tags]
        forged = sign_event(make_template(customer, ZAP_RECEIPT_KIND, tags), customer)
        assert validate_receipt(forged, expected).reason == "recipient mismatch"

    def test_amount_mismatch(self, customer, provider, expected):
        receipt = _receipt(_request(customer, provider), customer, amount=999)
        assert validate_receipt(receipt, expected).reason == "amount mismatch"

    def test_lnurl_mismatch(self, customer, provider, expected):
        receipt = _receipt(_request(customer, provider, lnurl="lnurlstub:other"), customer)
        assert validate_receipt(receipt, expected).reason == "lnurl mismatch"

    def test_event_mismatch(self, customer, provider, expected):
        receipt = _receipt(_request(customer, provider, event_id="ef" * 32), customer)
        assert validate_receipt(receipt, expected).reason == "event mismatch"

    def test_insufficient_amount(self, customer, provider, expected):
        receipt = _receipt(_request(customer, provider, amount=10), customer)
        assert validate_receipt(receipt, expected).reason == "insufficient amount"

    def test_tampered_receipt_signature(self, customer, provider, expected):
        receipt = _receipt(_request(customer, provider), customer)
        forged = receipt.model_copy(update={"created_at": receipt.created_at + 1})
        assert validate_receipt(forged, expected).reason == "invalid signature"

    def test_wrong_kind(self, customer, provider, expected):
        e = sign_event(make_template(customer, 1, []), customer)
        assert validate_receipt(e, expected).reason == "wrong kind"

    def test_malformed_description(self, customer, expected):
        tags = [["p", expected.recipient], ["bolt11", "lnstub11000m0123456789abcdef"],
                ["description", "{not json"]]
        receipt = sign_event(make_template(customer, ZAP_RECEIPT_KIND, tags), customer)
        assert validate_receipt(receipt, expected).reason == "malformed description"

    def test_receipt_from_another_wallet(self, customer, provider, expected):
        wallet_bound = ExpectedPayment(
            recipient=expected.recipient,
            amount_msats=expected.amount_msats,
            lnurl=expected.lnurl,
            event_id=expected.event_id,
            wallet=provider.pubkey_hex,
        )
        request = _request(customer, provider)
        assert validate_receipt(_receipt(request, provider), wallet_bound).passed
        assert validate_receipt(_receipt(request, customer), wallet_bound).reason == (
            "wallet mismatch"
        )

    def test_node_check_hook(self, customer, provider, expected):
        receipt = _receipt(_request(customer, provider), customer)
        verdict = validate_receipt(receipt, expected, node_check=lambda r: False)
        assert verdict.reason == "node check failed"


class TestStubLightningNode:
    """The recipient's wallet, without a relay."""

    async def test_stub_pay_mints_valid_receipt(self, customer, provider, expected):
        node = StubLightningNode(provider, lnurl=LNURL)
        receipt = await node.stub_pay(_request(customer, provider))
        assert receipt.kind == ZAP_RECEIPT_KIND
        assert receipt.pubkey == provider.pubkey_hex
        assert validate_receipt(receipt, expected).passed
        assert node.paid_msats == 1000

    async def test_receipt_timestamps_never_go_backwards(self, customer, provider):
        node = StubLightningNode(provider, lnurl=LNURL)
        first = await node.stub_pay(_request(customer, provider))
        second = await node.stub_pay(_request(customer, provider, amount=2000))
        assert second.created_at >= first.created_at

    async def test_malformed_request(self, provider):
        node = StubLightningNode(provider, lnurl=LNURL)
        with pytest.raises(PaymentError):
            await node.stub_pay(sign_event(make_template(provider, 9734, []), provider))

    async def test_request_for_another_wallet(self, customer, provider):
        node = StubLightningNode(customer)
        with pytest.raises(PaymentError, match="another wallet"):
            await node.stub_pay(_request(customer, provider))

    async def test_request_for_another_lnurl(self, customer, provider):
        node = StubLightningNode(provider)
        with pytest.raises(PaymentError, match="another wallet"):
            await node.stub_pay(_request(customer, provider))
