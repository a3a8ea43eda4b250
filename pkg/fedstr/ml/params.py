"""Flat parameter vectors and their byte-exact serialization.

Blob layout (all little-endian)::

    b"FSTR" | version u16 | entry count u32
    per entry: name length u16 | name utf-8 | rank u8 | dims u32 * rank
    values: float64 * sum(prod(dims))
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from fedstr.errors import FormatError, ModelError

MAGIC = b"FSTR"
FORMAT_VERSION = 1

Layout = tuple[tuple[str, tuple[int, ...]], ...]


def layout_size(layout: Layout) -> int:
    return sum(math.prod(shape) for _, shape in layout)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameter vector with named tensor layout.

    Invariants: every value finite; layout sizes sum to ``len(values)``.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(
            self, "layout", tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        )
        if layout_size(self.layout) != values.size:
            raise ModelError(
                f"layout describes {layout_size(self.layout)} values, vector has {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ModelError("parameters must be finite")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __len__(self) -> int:
        return self.values.size

    def tensors(self) -> dict[str, np.ndarray]:
        """Views of ``values`` shaped per layout entry."""
        out: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.layout:
            size = math.prod(shape)
            out[name] = self.values[offset : offset + size].reshape(shape)
            offset += size
        return out

    def with_values(self, values: np.ndarray) -> ModelParams:
        return ModelParams(values=values, layout=self.layout)

    def check_compatible(self, other: ModelParams) -> None:
        if self.layout != other.layout:
            raise ModelError("parameter layouts differ")


def serialize_params(p: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(p.layout))]
    for name, shape in p.layout:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
    parts.append(p.values.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError("truncated parameter blob")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_params(data: bytes) -> ModelParams:
    """Parse a parameter blob.

    Raises:
        FormatError: Bad magic, unknown version, truncation or trailing bytes.
    """
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise FormatError("bad magic")
    version, count = reader.unpack("<HI")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    layout = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("tensor name is not UTF-8") from e
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        layout.append((name, tuple(shape)))
    total = layout_size(tuple(layout))
    remaining = len(data) - reader.offset
    if remaining != total * 8:
        raise FormatError(f"expected {total * 8} value bytes, found {remaining}")
    values = np.frombuffer(reader.take(total * 8), dtype="<f8").astype(np.float64)
    try:
        return ModelParams(values=values, layout=tuple(layout))
    except ModelError as e:
        raise FormatError(str(e)) from e
