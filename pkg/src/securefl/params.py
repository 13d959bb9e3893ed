"""Model parameter containers and their FP16 wire codec.

A :class:`ParameterSet` is an ordered, immutable collection of named tensors,
each tagged with the optimizer group it belongs to.  All entries share one
contiguous float64 buffer so that server-side arithmetic can run on a single
vector.  On the wire every value travels as little-endian IEEE-754 binary16.

Wire layout (all integers little-endian)::

    header   magic "PS16" | version u8 | flags u8 | reserved u16
             | entry_count u32 | saturated u32                  (16 bytes)
    entry    name_len u32 | name utf-8 | group u8 | rank u32 | dims u32 * rank
             | values binary16 * numel                          (one per entry)
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    BadMagic,
    CodecError,
    NonFiniteValue,
    ShapeMismatch,
    TruncatedPayload,
    UnknownVersion,
)

MAGIC = b"PS16"
VERSION = 1
FP16_MAX = 65504.0

_HEADER = struct.Struct("<4sBBHII")
HEADER_SIZE = _HEADER.size


class Group(enum.IntEnum):
    """Optimizer group of a tensor: biases, normalization gains, or decayed weights."""

    BIAS = 0
    NORM = 1
    DECAY = 2


_GROUPS = frozenset(int(g) for g in Group)


class Entry(NamedTuple):
    name: str
    group: Group
    shape: tuple[int, ...]
    values: np.ndarray  # flat float64 view, read-only

    @property
    def size(self) -> int:
        return int(self.values.size)

    def array(self) -> np.ndarray:
        return self.values.reshape(self.shape)


def _numel(shape: Sequence[int]) -> int:
    return int(math.prod(shape))


class ParameterSet:
    """Immutable ordered mapping ``name -> (group, shape, values)``."""

    __slots__ = ("_specs", "_flat", "_index")

    def __init__(self, entries: Iterable[tuple[str, Group, Sequence[int], object]] = ()):
        specs = []
        chunks = []
        index = {}
        offset = 0
        for name, group, shape, values in entries:
            if name in index:
                raise ValueError(f"duplicate parameter name {name!r}")
            shape = tuple(int(d) for d in shape)
            if any(d < 0 for d in shape):
                raise ValueError(f"negative dimension in {name!r}: {shape}")
            arr = np.asarray(values, dtype=np.float64).reshape(-1)
            if arr.size != _numel(shape):
                raise ShapeMismatch(
                    f"{name!r}: shape {shape} needs {_numel(shape)} values, got {arr.size}"
                )
            index[name] = len(specs)
            specs.append((name, Group(group), shape, offset, arr.size))
            chunks.append(arr)
            offset += arr.size
        flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float64)
        self._init(tuple(specs), flat, index, owned=True)

    def _init(self, specs, flat, index, owned=False):
        if not owned and flat.flags.writeable:
            flat = np.array(flat, dtype=np.float64, copy=True)
        flat.flags.writeable = False
        self._specs = specs
        self._flat = flat
        self._index = index

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], groups: Mapping[str, Group]) -> "ParameterSet":
        return cls((k, groups[k], np.shape(v), v) for k, v in arrays.items())

    def with_flat(self, flat: np.ndarray) -> "ParameterSet":
        """Same layout, new values."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self._flat.shape:
            raise ShapeMismatch(f"flat vector of size {flat.size}, expected {self._flat.size}")
        out = ParameterSet.__new__(ParameterSet)
        out._init(self._specs, flat, self._index)
        return out

    def zeros_like(self) -> "ParameterSet":
        return self.with_flat(np.zeros_like(self._flat))

    def subset(self, names: Iterable[str]) -> "ParameterSet":
        wanted = set(names)
        return ParameterSet(
            (e.name, e.group, e.shape, e.values) for e in self if e.name in wanted
        )

    # read access -------------------------------------------------------
    @property
    def flat(self) -> np.ndarray:
        return self._flat

    @property
    def names(self) -> list[str]:
        return [s[0] for s in self._specs]

    @property
    def numel(self) -> int:
        return int(self._flat.size)

    def layout(self) -> tuple:
        return tuple((s[0], s[1], s[2]) for s in self._specs)

    def group_mask(self, group: Group) -> np.ndarray:
        mask = np.zeros(self._flat.size, dtype=bool)
        for _, g, _, off, n in self._specs:
            if g == group:
                mask[off:off + n] = True
        return mask

    def _entry(self, spec) -> Entry:
        name, group, shape, off, n = spec
        return Entry(name, group, shape, self._flat[off:off + n])

    def __getitem__(self, name: str) -> Entry:
        return self._entry(self._specs[self._index[name]])

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __iter__(self) -> Iterator[Entry]:
        return (self._entry(s) for s in self._specs)

    def __len__(self) -> int:
        return len(self._specs)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return self.layout() == other.layout() and np.array_equal(self._flat, other._flat)

    def __hash__(self):
        return hash((self.layout(), self._flat.tobytes()))

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{g.name}{list(s)}" for n, g, s in self.layout())
        return f"ParameterSet({inner})"


def check_compatible(a: ParameterSet, b: ParameterSet) -> None:
    if a.layout() != b.layout():
        raise ShapeMismatch(f"incompatible parameter sets: {a!r} vs {b!r}")


def axpy(dst: ParameterSet, a: float, src: ParameterSet) -> ParameterSet:
    """Return ``dst + a * src`` elementwise.

    Raises:
        ShapeMismatch: if names, groups or shapes differ.
    """
    check_compatible(dst, src)
    return dst.with_flat(dst.flat + a * src.flat)


# --- codec ---------------------------------------------------------------


def entry_overhead(name: str, rank: int) -> int:
    return 4 + len(name.encode("utf-8")) + 1 + 4 + 4 * rank


def encoded_size(p: ParameterSet) -> int:
    """Exact byte length of ``encode_fp16(p)``."""
    return HEADER_SIZE + sum(entry_overhead(e.name, len(e.shape)) for e in p) + 2 * p.numel


class WireHeader(NamedTuple):
    version: int
    flags: int
    entry_count: int
    saturated: int


def encode_fp16(p: ParameterSet) -> bytes:
    """Serialize ``p`` with binary16 values.

    Values with magnitude above the binary16 range are clamped to +-65504 and
    counted in the header's ``saturated`` field.

    Raises:
        NonFiniteValue: if any value is NaN or infinite.
    """
    flat = p.flat
    if not np.all(np.isfinite(flat)):
        bad = [e.name for e in p if not np.all(np.isfinite(e.values))]
        raise NonFiniteValue(f"non-finite values in {bad}")
    over = np.abs(flat) > FP16_MAX
    saturated = int(np.count_nonzero(over))
    if saturated:
        flat = np.clip(flat, -FP16_MAX, FP16_MAX)
    half = flat.astype("<f2")
    parts = [_HEADER.pack(MAGIC, VERSION, 0, 0, len(p), saturated)]
    for name, group, shape, off, n in p._specs:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<BI{len(shape)}I", int(group), len(shape), *shape))
        parts.append(half[off:off + n].tobytes())
    return b"".join(parts)


def peek_header(b: bytes) -> WireHeader:
    if len(b) < len(MAGIC) or bytes(b[:4]) != MAGIC:
        raise BadMagic("payload does not start with a parameter-set magic")
    if len(b) < HEADER_SIZE:
        raise TruncatedPayload("header truncated")
    _, version, flags, _, count, saturated = _HEADER.unpack_from(b, 0)
    if version != VERSION:
        raise UnknownVersion(f"parameter-set wire version {version}")
    return WireHeader(version, flags, count, saturated)


def decode_fp16(b: bytes) -> ParameterSet:
    """Inverse of :func:`encode_fp16`; values are widened to float64."""
    header = peek_header(b)
    buf = memoryview(b)
    pos = HEADER_SIZE
    specs = []

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedPayload(f"need {n} bytes at offset {pos}, have {len(buf) - pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    for _ in range(header.entry_count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        group, rank = struct.unpack("<BI", take(5))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        values = np.frombuffer(take(2 * _numel(dims)), dtype="<f2").astype(np.float64)
        if group not in _GROUPS:
            raise CodecError(f"entry {name!r} has unknown group tag {group}")
        specs.append((name, Group(group), dims, values))
    if pos != len(buf):
        raise TruncatedPayload(f"{len(buf) - pos} trailing bytes after values")
    return ParameterSet(specs)


# --- checkpoints -----------------------------------------------------------

_CKPT_MAGIC = b"CKP1"


@dataclass(frozen=True)
class Checkpoint:
    """Learnable parameters plus non-learnable buffers and string metadata."""

    params: ParameterSet
    meta: dict[str, str] = field(default_factory=dict)
    buffers: ParameterSet = field(default_factory=ParameterSet)

    def __post_init__(self):
        if "round" in self.meta and int(self.meta["round"]) < 0:
            raise ValueError("checkpoint round index must be >= 0")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Meta block followed by the FP16 encodings of params and buffers."""
    parts = [_CKPT_MAGIC, struct.pack("<BI", VERSION, len(ckpt.meta))]
    for k in sorted(ckpt.meta):
        parts.append(_pack_str(k))
        parts.append(_pack_str(str(ckpt.meta[k])))
    for ps in (ckpt.params, ckpt.buffers):
        blob = encode_fp16(ps)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def decode_checkpoint(b: bytes) -> Checkpoint:
    if len(b) < 4 or bytes(b[:4]) != _CKPT_MAGIC:
        raise BadMagic("not a checkpoint")
    buf = memoryview(b)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedPayload("checkpoint truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<BI", take(5))
    if version != VERSION:
        raise UnknownVersion(f"checkpoint version {version}")
    meta = {}
    for _ in range(count):
        key = bytes(take(struct.unpack("<I", take(4))[0])).decode("utf-8")
        meta[key] = bytes(take(struct.unpack("<I", take(4))[0])).decode("utf-8")
    sets = []
    for _ in range(2):
        (n,) = struct.unpack("<Q", take(8))
        sets.append(decode_fp16(bytes(take(n))))
    if pos != len(buf):
        raise TruncatedPayload("trailing bytes after checkpoint")
    return Checkpoint(sets[0], meta, sets[1])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
