"""Content-addressed model storage with SHA-256 verification on every read.

Blobs are named by their digest (``model_<sha256>.bin``) so a reference is
``url + sha256``: whoever holds the reference can detect any mutation of
the bytes, whether by the storage host or a relay in between.

Backends:
    FileBackend: local directory, ``file://`` URLs, atomic writes
    HttpBackend: plain ``PUT``/``GET`` against an HTTP blob server
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol
from urllib.parse import urlparse
from urllib.request import url2pathname

import httpx
from pydantic import BaseModel, ConfigDict, field_validator

from fedstr.config import settings
from fedstr.errors import IntegrityError, RetrievalError, StorageError

logger = logging.getLogger(__name__)

_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")
_REF_RE = re.compile(r"^url:(?P<url>.+);sha256:(?P<sha>[^;]*)$")

MODEL_PREFIX = "model_"
MODEL_SUFFIX = ".bin"


class StorageRef(BaseModel):
    """URL plus SHA-256 digest of the bytes stored there."""

    model_config = ConfigDict(frozen=True)

    url: str
    sha256: str
    size_bytes: int | None = None

    @field_validator("sha256")
    @classmethod
    def _hex_digest(cls, v: str) -> str:
        if not _HEX64_RE.match(v):
            raise ValueError("sha256 must be 64 lowercase hex characters")
        return v

    def render(self) -> str:
        """Wire form ``url:<url>;sha256:<hex>``; size travels separately."""
        return f"url:{self.url};sha256:{self.sha256}"

    @classmethod
    def parse(cls, text: str, size_bytes: int | None = None) -> StorageRef:
        """Inverse of ``render``.

        Raises:
            ValueError: If the text is not a storage reference.
        """
        match = _REF_RE.match(text)
        if not match:
            raise ValueError(f"not a storage reference: {text[:80]!r}")
        return cls(url=match["url"], sha256=match["sha"], size_bytes=size_bytes)


@dataclass(frozen=True)
class ModelBlob:
    """Serialized parameter bytes."""

    data: bytes

    def __post_init__(self):
        if not self.data:
            raise StorageError("model blob must not be empty")

    @property
    def sha256(self) -> str:
        return sha256_hex(self.data)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ── Backends ─────────────────────────────────────────
class StorageBackend(Protocol):
    schemes: tuple[str, ...]

    def write(self, name: str, data: bytes) -> str: ...

    def read(self, url: str) -> bytes: ...


class FileBackend:
    """Directory of content-addressed files; writes are temp-file then rename."""

    schemes = ("file",)

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root or settings.model_root).resolve()

    def write(self, name: str, data: bytes) -> str:
        target = self.root / name
        tmp_name = None
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            with tempfile.NamedTemporaryFile(dir=self.root, prefix=".tmp_", delete=False) as tmp:
                tmp_name = tmp.name
                tmp.write(data)
                tmp.flush()
                os.fsync(tmp.fileno())
            os.replace(tmp_name, target)
        except OSError as e:
            if tmp_name is not None:
                with contextlib.suppress(OSError):
                    os.unlink(tmp_name)
            raise StorageError(f"cannot write {target}: {e}") from e
        return target.as_uri()

    def read(self, url: str) -> bytes:
        path = Path(url2pathname(urlparse(url).path))
        try:
            return path.read_bytes()
        except FileNotFoundError as e:
            raise RetrievalError(f"blob not found: {path}") from e
        except OSError as e:
            raise RetrievalError(f"cannot read {path}: {e}") from e


class HttpBackend:
    """``PUT <base>/<name>`` to store, ``GET <url>`` to fetch, with a size cap."""

    schemes = ("http", "https")

    def __init__(
        self,
        base_url: str = "",
        max_blob_bytes: int | None = None,
        timeout: float | None = None,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.max_blob_bytes = max_blob_bytes or settings.http_max_blob_bytes
        self._owns_client = client is None
        self._client = client or httpx.Client(timeout=timeout or settings.http_timeout_seconds)

    def close(self) -> None:
        if self._owns_client:
            self._client.close()

    def write(self, name: str, data: bytes) -> str:
        if not self.base_url:
            raise StorageError("HTTP backend has no base URL to upload to")
        url = f"{self.base_url}/{name}"
        try:
            response = self._client.put(url, content=data)
            response.raise_for_status()
        except httpx.HTTPError as e:
            raise StorageError(f"upload to {url} failed: {e}") from e
        return url

    def read(self, url: str) -> bytes:
        try:
            with self._client.stream("GET", url) as response:
                if response.status_code == 404:
                    raise RetrievalError(f"blob not found: {url}")
                response.raise_for_status()
                chunks: list[bytes] = []
                total = 0
                for chunk in response.iter_bytes():
                    total += len(chunk)
                    if total > self.max_blob_bytes:
                        raise RetrievalError(
                            f"blob at {url} exceeds {self.max_blob_bytes} bytes"
                        )
                    chunks.append(chunk)
                return b"".join(chunks)
        except httpx.HTTPError as e:
            raise RetrievalError(f"download from {url} failed: {e}") from e


# ── Facade ───────────────────────────────────────────
class ModelStore:
    """Writes through one backend, reads any supported URL scheme.

    Callers hand around ``StorageRef``s and never look at the backend type.
    """

    def __init__(self, backend: StorageBackend | None = None, readers: list | None = None):
        self.backend = backend or FileBackend()
        self._readers: dict[str, StorageBackend] = {}
        for reader in [*(readers or []), self.backend]:
            for scheme in reader.schemes:
                self._readers.setdefault(scheme, reader)
        self._readers.setdefault("file", FileBackend())

    def _reader_for(self, scheme: str) -> StorageBackend:
        if scheme in ("http", "https") and scheme not in self._readers:
            http = HttpBackend()
            self._readers["http"] = http
            self._readers["https"] = http
        reader = self._readers.get(scheme)
        if reader is None:
            raise RetrievalError(f"unsupported storage scheme {scheme!r}")
        return reader

    def close(self) -> None:
        """Release backend connections (HTTP clients)."""
        for backend in {id(b): b for b in [self.backend, *self._readers.values()]}.values():
            close = getattr(backend, "close", None)
            if close is not None:
                close()

    def put_blob(
        self, data: bytes, prefix: str = MODEL_PREFIX, suffix: str = MODEL_SUFFIX
    ) -> StorageRef:
        if not data:
            raise StorageError("refusing to store an empty blob")
        digest = sha256_hex(data)
        url = self.backend.write(f"{prefix}{digest}{suffix}", data)
        return StorageRef(url=url, sha256=digest, size_bytes=len(data))

    def read_url(self, url: str) -> bytes:
        """Unverified fetch, for inputs that travel without a digest."""
        return self._reader_for(urlparse(url).scheme).read(url)

    def get_blob(self, ref: StorageRef) -> bytes:
        """Fetch and verify.

        Raises:
            RetrievalError: Missing or unreachable blob.
            IntegrityError: Bytes do not hash to ``ref.sha256`` or have the wrong size.
        """
        data = self.read_url(ref.url)
        actual = sha256_hex(data)
        if actual != ref.sha256:
            raise IntegrityError(
                f"digest mismatch for {ref.url}: expected {ref.sha256[:16]}…, got {actual[:16]}…"
            )
        if ref.size_bytes is not None and ref.size_bytes != len(data):
            raise IntegrityError(
                f"size mismatch for {ref.url}: expected {ref.size_bytes}, got {len(data)}"
            )
        return data

    def put_model(self, blob: ModelBlob) -> StorageRef:
        ref = self.put_blob(blob.data)
        logger.debug("Stored model %s… (%d bytes)", ref.sha256[:12], len(blob.data))
        return ref

    def get_model(self, ref: StorageRef) -> ModelBlob:
        return ModelBlob(self.get_blob(ref))


def put_model(blob: ModelBlob, backend: StorageBackend | None = None) -> StorageRef:
    return ModelStore(backend).put_model(blob)


def get_model(ref: StorageRef, backend: StorageBackend | None = None) -> ModelBlob:
    return ModelStore(backend).get_model(ref)
