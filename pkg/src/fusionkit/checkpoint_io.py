"""Reading and writing checkpoints in the safetensors container format.

Layout: an 8-byte little-endian header length ``N``, ``N`` bytes of UTF-8
JSON, then the raw little-endian data section. The JSON maps each tensor
name to ``{"dtype", "shape", "data_offsets": [begin, end]}`` (offsets are
relative to the start of the data section) and may carry a
``"__metadata__"`` map of strings.

:func:`open_lazy` reads only the header; payloads are fetched per key by
:meth:`LazyCheckpoint.load_tensor`.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import IoError, MalformedHeader, UnknownKey, UnsupportedDtype
from .tensor_core import DType, TensorMap

FORMAT_VERSION = "fusionkit-safetensors-1"
MAX_HEADER_BYTES = 100 * 1024 * 1024
METADATA_KEY = "__metadata__"


@dataclass(frozen=True)
class CheckpointRef:
    path: Path
    format: str = "safetensors"

    def __post_init__(self):
        object.__setattr__(self, "path", Path(self.path))
        if self.format != "safetensors":
            raise UnsupportedDtype(f"unsupported checkpoint format {self.format!r}")


@dataclass(frozen=True)
class TensorEntry:
    dtype: DType
    shape: tuple[int, ...]
    begin: int
    end: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


def _as_int(value, what):
    # JSON booleans are ints in Python; reject them explicitly
    if isinstance(value, bool) or not isinstance(value, int):
        raise MalformedHeader(f"{what} must be an integer, got {value!r}")
    if value < 0:
        raise MalformedHeader(f"{what} must be non-negative, got {value}")
    return value


def parse_header(raw: bytes, data_size: int) -> tuple[dict[str, TensorEntry], dict[str, str]]:
    """Validate a header blob against a data section of ``data_size`` bytes."""
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedHeader("header must be a JSON object")

    metadata = doc.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    index = {}
    for name, info in doc.items():
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise MalformedHeader(f"{name!r}: entry must have exactly dtype, shape, data_offsets")
        if not isinstance(info["dtype"], str):
            raise MalformedHeader(f"{name!r}: dtype must be a string")
        dtype = DType.from_tag(info["dtype"])
        shape = info["shape"]
        offsets = info["data_offsets"]
        if not isinstance(shape, list):
            raise MalformedHeader(f"{name!r}: shape must be a list")
        if not isinstance(offsets, list) or len(offsets) != 2:
            raise MalformedHeader(f"{name!r}: data_offsets must be [begin, end]")
        shape = tuple(_as_int(d, f"{name!r} shape entry") for d in shape)
        begin, end = (_as_int(o, f"{name!r} offset") for o in offsets)
        if end < begin or end > data_size:
            raise MalformedHeader(
                f"{name!r}: byte range [{begin}, {end}) outside data section of {data_size} bytes"
            )
        if end - begin != math.prod(shape) * dtype.width:
            raise MalformedHeader(f"{name!r}: byte range does not match dtype and shape")
        index[name] = TensorEntry(dtype, shape, begin, end)

    spans = sorted((e.begin, e.end, k) for k, e in index.items() if e.end > e.begin)
    for (_, prev_end, prev), (begin, _, name) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise MalformedHeader(f"byte ranges of {prev!r} and {name!r} overlap")
    return dict(sorted(index.items())), metadata


class LazyCheckpoint:
    """An open checkpoint whose tensors are read on demand.

    Safe to share between threads; reads are serialised on an internal lock.
    """

    def __init__(self, ref: CheckpointRef, fh, index, metadata, data_start):
        self.ref = ref
        self.index: dict[str, TensorEntry] = index
        self.metadata: dict[str, str] = metadata
        self._fh = fh
        self._data_start = data_start
        self._lock = threading.Lock()

    def keys(self) -> list[str]:
        return list(self.index)

    def __contains__(self, key) -> bool:
        return key in self.index

    def __len__(self) -> int:
        return len(self.index)

    def load_tensor(self, key: str) -> np.ndarray:
        try:
            entry = self.index[key]
        except KeyError:
            raise UnknownKey(f"{key!r} not in {self.ref.path}") from None
        size = entry.end - entry.begin
        with self._lock:
            if self._fh is None:
                raise IoError(f"{self.ref.path} is closed")
            try:
                self._fh.seek(self._data_start + entry.begin)
                buf = self._fh.read(size)
            except OSError as exc:
                raise IoError(f"reading {key!r} from {self.ref.path}: {exc}") from None
        if len(buf) != size:
            raise IoError(f"{self.ref.path}: short read for {key!r} ({len(buf)} of {size} bytes)")
        le = entry.dtype.np_dtype.newbyteorder("<")
        arr = np.frombuffer(buf, dtype=le).astype(entry.dtype.np_dtype, copy=True)
        return arr.reshape(entry.shape)

    def load_all(self) -> TensorMap:
        return {k: self.load_tensor(k) for k in self.index}

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"LazyCheckpoint({str(self.ref.path)!r}, {len(self.index)} tensors)"


def open_lazy(ref: CheckpointRef | str | os.PathLike, opener: Callable = open) -> LazyCheckpoint:
    """Open a checkpoint and parse its header without touching tensor payloads.

    ``opener(path, mode)`` may be replaced, e.g. to instrument reads.
    """
    if not isinstance(ref, CheckpointRef):
        ref = CheckpointRef(ref)
    try:
        fh = opener(ref.path, "rb")
    except OSError as exc:
        raise IoError(f"cannot open {ref.path}: {exc}") from None
    try:
        fh.seek(0, os.SEEK_END)
        file_size = fh.tell()
        fh.seek(0)
        prefix = fh.read(8)
        if len(prefix) != 8:
            raise MalformedHeader(f"{ref.path}: file shorter than the 8-byte length prefix")
        (n,) = struct.unpack("<Q", prefix)
        if n > MAX_HEADER_BYTES:
            raise MalformedHeader(f"{ref.path}: header length {n} exceeds {MAX_HEADER_BYTES}")
        if 8 + n > file_size:
            raise MalformedHeader(f"{ref.path}: header length {n} runs past end of file")
        raw = fh.read(n)
        if len(raw) != n:
            raise MalformedHeader(f"{ref.path}: truncated header")
        index, metadata = parse_header(raw, file_size - 8 - n)
    except OSError as exc:
        fh.close()
        raise IoError(f"reading {ref.path}: {exc}") from None
    except BaseException:
        fh.close()
        raise
    return LazyCheckpoint(ref, fh, index, metadata, 8 + n)


def load_tensor(cp: LazyCheckpoint, key: str) -> np.ndarray:
    return cp.load_tensor(key)


def load_all(cp: LazyCheckpoint) -> TensorMap:
    return cp.load_all()


def load_file(path: str | os.PathLike) -> TensorMap:
    with open_lazy(path) as cp:
        return cp.load_all()


def serialize(m: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    """Encode a tensor map as safetensors bytes (deterministic)."""
    header = {}
    chunks = []
    offset = 0
    for key in sorted(m):
        arr = np.asarray(m[key])
        dtype = DType.of(arr)
        payload = np.ascontiguousarray(arr, dtype=dtype.np_dtype.newbyteorder("<")).tobytes()
        header[key] = {
            "dtype": dtype.tag,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(payload)],
        }
        chunks.append(payload)
        offset += len(payload)
    meta = {"format_version": FORMAT_VERSION}
    if metadata:
        meta.update(metadata)
    header[METADATA_KEY] = dict(sorted(meta.items()))
    blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the destination directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        _unlink_quietly(tmp)
        raise IoError(f"cannot write {path}: {exc}") from None
    except BaseException:
        _unlink_quietly(tmp)
        raise


def _unlink_quietly(path):
    try:
        os.unlink(path)
    except OSError:
        pass


def save_map(
    m: Mapping[str, np.ndarray],
    path: str | os.PathLike,
    metadata: Mapping[str, str] | None = None,
) -> CheckpointRef:
    atomic_write_bytes(path, serialize(m, metadata))
    return CheckpointRef(Path(path))


@dataclass
class InMemoryCheckpoint:
    """Duck-types :class:`LazyCheckpoint` over an in-memory tensor map."""

    tensors: Mapping[str, np.ndarray]
    index: dict = field(init=False)

    def __post_init__(self):
        self.index = {
            k: TensorEntry(DType.of(np.asarray(v)), tuple(np.shape(v)), 0, 0)
            for k, v in sorted(self.tensors.items())
        }

    def keys(self):
        return list(self.index)

    def load_tensor(self, key):
        if key not in self.index:
            raise UnknownKey(f"{key!r} not in in-memory checkpoint")
        return np.array(self.tensors[key], copy=True)

    def load_all(self):
        return {k: self.load_tensor(k) for k in self.index}

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        pass
