"""Unit tests for identities, event signing and filters."""

import os
import stat

import pytest

from fedstr.errors import InvalidKeyError, SignerMismatchError
from fedstr.nostr import (
    Event,
    Filter,
    compute_event_id,
    generate_keypair,
    make_template,
    matches_any,
    matches_filter,
    sign_event,
    verify_event,
)
from fedstr.nostr.event import canonical_serialization
from fedstr.nostr.keys import keypair_from_hex, load_or_create_keypair, save_keypair

pytestmark = pytest.mark.unit


def _signed(keypair, kind=1, tags=None, content="hello", created_at=1_700_000_000) -> Event:
    return sign_event(make_template(keypair, kind, tags, content, created_at), keypair)


class TestKeys:
    """Key generation and persistence."""

    def test_seeded_generation_is_deterministic(self):
        a = generate_keypair(bytes([7]) * 32)
        b = generate_keypair(bytes([7]) * 32)
        assert a.public_key == b.public_key
        assert len(a.public_key) == 32
        assert a.matches()

    def test_zero_seed_rejected(self):
        with pytest.raises(InvalidKeyError):
            generate_keypair(bytes(32))

    def test_short_seed_rejected(self):
        with pytest.raises(InvalidKeyError):
            generate_keypair(b"\x01" * 31)

    def test_non_hex_secret_rejected(self):
        with pytest.raises(InvalidKeyError):
            keypair_from_hex("not-hex")

    def test_secret_not_in_repr(self, keypair):
        assert keypair.secret_key.hex() not in repr(keypair)

    def test_save_and_reload(self, keypair, tmp_path):
        path = tmp_path / "keys" / "id.key"
        save_keypair(keypair, path)
        assert stat.S_IMODE(os.stat(path).st_mode) == 0o600
        assert load_or_create_keypair(path).public_key == keypair.public_key

    def test_load_or_create_creates_once(self, tmp_path):
        path = tmp_path / "id.key"
        first = load_or_create_keypair(path)
        assert path.exists()
        assert load_or_create_keypair(path).public_key == first.public_key


class TestSigning:
    """Canonical ids, Schnorr signatures and tamper detection."""

    def test_canonical_serialization_has_no_whitespace(self, keypair):
        t = make_template(keypair, 1, [["t", "x"]], "hi", 5)
        raw = canonical_serialization(t)
        assert raw == f'[0,"{keypair.pubkey_hex}",5,1,[["t","x"]],"hi"]'.encode()

    def test_sign_then_verify(self, keypair):
        e = _signed(keypair)
        assert e.id == compute_event_id(e.template()).hex()
        assert len(e.sig) == 128
        assert verify_event(e)

    def test_signer_mismatch(self, keypair, other_keypair):
        t = make_template(keypair, 1, content="x")
        with pytest.raises(SignerMismatchError):
            sign_event(t, other_keypair)

    @pytest.mark.parametrize(
        "change",
        [
            {"content": "tampered"},
            {"kind": 2},
            {"created_at": 1_700_000_001},
            {"tags": [["e", "ab"]]},
        ],
    )
    def test_field_mutation_breaks_verification(self, keypair, change):
        e = _signed(keypair)
        assert not verify_event(e.model_copy(update=change))

    def test_swapped_pubkey_fails(self, keypair, other_keypair):
        e = _signed(keypair)
        assert not verify_event(e.model_copy(update={"pubkey": other_keypair.pubkey_hex}))

    def test_flipped_signature_fails(self, keypair):
        e = _signed(keypair)
        flipped = ("0" if e.sig[0] != "0" else "1") + e.sig[1:]
        assert not verify_event(e.model_copy(update={"sig": flipped}))

    def test_garbage_fields_do_not_raise(self, keypair):
        e = _signed(keypair)
        assert not verify_event(e.model_copy(update={"sig": "zz", "pubkey": "short"}))

    def test_json_round_trip_keeps_signature_valid(self, keypair):
        e = _signed(keypair, tags=[["i", "data", "text"], ["param", "lr", "0.1"]])
        assert verify_event(Event.from_json(e.to_json()))

    def test_tag_helpers(self, keypair):
        e = _signed(keypair, tags=[["param", "a", "1"], ["param", "b", "2"], ["e", "ff"]])
        assert e.tag_values("param") == [["a", "1"], ["b", "2"]]
        assert e.first_tag_value("e") == "ff"
        assert e.first_tag("missing") is None

    def test_empty_tag_rejected(self, keypair):
        with pytest.raises(ValueError):
            make_template(keypair, 1, [[]])


class TestFilters:
    """Filter matching and wire conversion."""

    def test_kind_and_author_prefix(self, keypair, other_keypair):
        e = _signed(keypair, kind=6000)
        assert matches_filter(e, Filter(kinds=[6000], authors=[keypair.pubkey_hex[:8]]))
        assert not matches_filter(e, Filter(kinds=[7000]))
        assert not matches_filter(e, Filter(authors=[other_keypair.pubkey_hex]))

    def test_tag_query_is_disjunctive_within_field(self, keypair):
        e = _signed(keypair, tags=[["e", "abc"], ["p", "def"]])
        assert matches_filter(e, Filter(tag_queries={"e": ["xyz", "abc"]}))
        assert not matches_filter(e, Filter(tag_queries={"e": ["abc"], "p": ["nope"]}))

    def test_since_until_inclusive(self, keypair):
        e = _signed(keypair, created_at=100)
        assert matches_filter(e, Filter(since=100, until=100))
        assert not matches_filter(e, Filter(since=101))
        assert not matches_filter(e, Filter(until=99))

    def test_id_prefix(self, keypair):
        e = _signed(keypair)
        assert matches_filter(e, Filter(ids=[e.id[:10]]))

    def test_matches_any(self, keypair):
        e = _signed(keypair, kind=1)
        assert matches_any(e, [Filter(kinds=[2]), Filter(kinds=[1])])
        assert not matches_any(e, [])

    def test_wire_round_trip(self):
        f = Filter(kinds=[8000], tag_queries={"p": ["aa"]}, since=3, limit=10)
        wire = f.to_wire()
        assert wire == {"kinds": [8000], "since": 3, "limit": 10, "#p": ["aa"]}
        assert Filter.from_wire(wire) == f

    def test_from_wire_rejects_non_object(self):
        with pytest.raises(ValueError):
            Filter.from_wire(["kinds"])
