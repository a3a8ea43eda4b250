"""Unit tests for content-addressed model storage."""

import random
from pathlib import Path

import httpx
import pytest

from fedstr.errors import IntegrityError, RetrievalError, StorageError
from fedstr.ml import ModelFamily, ModelSpec, init_model, serialize_params
from fedstr.storage import (
    FileBackend,
    HttpBackend,
    ModelBlob,
    ModelStore,
    StorageRef,
    get_model,
    put_model,
    sha256_hex,
)

pytestmark = pytest.mark.unit


def _blob() -> ModelBlob:
    spec = ModelSpec(family=ModelFamily.MLP, input_dim=8, hidden=(16,), init_seed=1)
    return ModelBlob(serialize_params(init_model(spec)))


def _path(ref: StorageRef) -> Path:
    return Path(ref.url.removeprefix("file://"))


class TestStorageRef:
    """Wire form of storage references."""

    def test_render_and_parse(self):
        ref = StorageRef(url="file:///tmp/a.bin", sha256="ab" * 32)
        assert ref.render() == f"url:file:///tmp/a.bin;sha256:{'ab' * 32}"
        assert StorageRef.parse(ref.render()) == ref

    def test_parse_rejects_non_reference(self):
        with pytest.raises(ValueError):
            StorageRef.parse("https://example.org/model.bin")

    def test_digest_must_be_lowercase_hex(self):
        with pytest.raises(ValueError):
            StorageRef(url="file:///x", sha256="AB" * 32)


class TestModelStore:
    """Put/get through the file backend with verification on every read."""

    def test_put_names_blob_by_digest(self, store):
        blob = _blob()
        ref = store.put_model(blob)
        assert ref.sha256 == sha256_hex(blob.data)
        assert ref.size_bytes == len(blob.data)
        assert _path(ref).name == f"model_{ref.sha256}.bin"
        assert store.get_model(ref) == blob

    def test_put_is_idempotent(self, store):
        blob = _blob()
        assert store.put_model(blob) == store.put_model(blob)

    def test_empty_blob_rejected(self, store):
        with pytest.raises(StorageError):
            ModelBlob(b"")
        with pytest.raises(StorageError):
            store.put_blob(b"")

    def test_missing_blob(self, store):
        ref = store.put_model(_blob())
        _path(ref).unlink()
        with pytest.raises(RetrievalError):
            store.get_model(ref)

    def test_every_corruption_detected(self, store):
        blob = _blob()
        ref = store.put_model(blob)
        path = _path(ref)
        rng = random.Random(42)
        for trial in range(200):
            data = bytearray(blob.data)
            positions = rng.sample(range(len(data)), 1 if trial % 2 == 0 else rng.randint(2, 16))
            for pos in positions:
                data[pos] ^= rng.randint(1, 255)
            path.write_bytes(bytes(data))
            with pytest.raises(IntegrityError):
                store.get_model(ref)
        path.write_bytes(blob.data)
        for _ in range(200):
            assert store.get_model(ref) == blob

    def test_size_mismatch_detected(self, store):
        blob = _blob()
        ref = store.put_model(blob)
        lying = ref.model_copy(update={"size_bytes": ref.size_bytes + 1})
        with pytest.raises(IntegrityError):
            store.get_model(lying)

    def test_unsupported_scheme(self, store):
        with pytest.raises(RetrievalError):
            store.read_url("ftp://example.org/blob")

    def test_module_level_helpers(self, tmp_path):
        backend = FileBackend(tmp_path / "m")
        blob = _blob()
        assert get_model(put_model(blob, backend), backend) == blob


class TestHttpBackend:
    """HTTP backend against an in-memory transport."""

    @pytest.fixture
    def http_store(self):
        blobs: dict[str, bytes] = {}

        def handler(request: httpx.Request) -> httpx.Response:
            key = request.url.path
            if request.method == "PUT":
                blobs[key] = request.content
                return httpx.Response(201)
            if key in blobs:
                return httpx.Response(200, content=blobs[key])
            return httpx.Response(404)

        client = httpx.Client(transport=httpx.MockTransport(handler))
        backend = HttpBackend("http://blobs.local/models", max_blob_bytes=10_000, client=client)
        return ModelStore(backend), blobs

    def test_put_and_get(self, http_store):
        store, _ = http_store
        blob = _blob()
        ref = store.put_model(blob)
        assert ref.url.startswith("http://blobs.local/models/model_")
        assert store.get_model(ref) == blob

    def test_tampered_download(self, http_store):
        store, blobs = http_store
        ref = store.put_model(_blob())
        key = next(iter(blobs))
        blobs[key] = b"\x00" + blobs[key][1:]
        with pytest.raises(IntegrityError):
            store.get_model(ref)

    def test_missing_download(self, http_store):
        store, _ = http_store
        with pytest.raises(RetrievalError):
            store.read_url("http://blobs.local/models/nothing.bin")

    def test_size_cap(self, http_store):
        store, _ = http_store
        ref = store.put_blob(b"x" * 20_000)
        with pytest.raises(RetrievalError):
            store.get_blob(ref)

    def test_close_leaves_injected_client_open(self, http_store):
        store, _ = http_store
        client = store.backend._client
        store.close()
        assert not client.is_closed

    def test_close_releases_owned_client(self):
        backend = HttpBackend("http://blobs.local/models")
        ModelStore(backend).close()
        assert backend._client.is_closed


class TestFileBackend:
    """Atomic writes into the model directory."""

    def test_failed_rename_leaves_no_temp_file(self, tmp_path, monkeypatch):
        def refuse(src, dst):
            raise OSError("read-only target")

        monkeypatch.setattr("fedstr.storage.os.replace", refuse)
        backend = FileBackend(tmp_path)
        with pytest.raises(StorageError):
            backend.write("model_x.bin", b"payload")
        assert list(tmp_path.iterdir()) == []
