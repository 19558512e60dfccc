"""Shared domain types, canonical binary encoding and content hashing.

Every signature and attestation in the package is computed over bytes
produced by :func:`encode`, so the format is deliberately small and strict:

* each value starts with a one-byte tag
* integers are signed 64-bit big-endian, floats IEEE-754 binary64 big-endian
* strings are UTF-8 and, like byte strings, carry a 4-byte length prefix
* maps and sets are emitted in ascending order of their encoded keys/items
* registered dataclasses and enums carry a 2-byte type id

The decoder rejects anything the encoder could not have produced, which makes
the encoding injective: distinct byte strings never decode to the same value.
The bit layout is documented in ``docs/encoding.md``.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import struct
from dataclasses import dataclass
from typing import Any, Optional

__all__ = [
    "PdecoError",
    "DecodeError",
    "OperationKind",
    "DataSelector",
    "ComputationRequest",
    "ComputeResult",
    "encode",
    "decode",
    "decode_as",
    "content_hash",
    "hash_value",
    "canonical",
    "canonical_enum",
]


class PdecoError(Exception):
    """Base class for every error raised by this package."""


class DecodeError(PdecoError, ValueError):
    """Bytes are not a valid canonical encoding."""


T_NONE = 0x00
T_FALSE = 0x01
T_TRUE = 0x02
T_INT = 0x03
T_FLOAT = 0x04
T_BYTES = 0x05
T_STR = 0x06
T_LIST = 0x07
T_MAP = 0x08
T_SET = 0x09
T_ENUM = 0x0A
T_RECORD = 0x0B

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1
MAX_DEPTH = 64

_records_by_id: dict[int, type] = {}
_record_ids: dict[type, int] = {}
_enums_by_id: dict[int, type] = {}
_enum_ids: dict[type, int] = {}


def canonical(type_id: int):
    """Register a dataclass with the codec under ``type_id``.

    Fields are encoded in declaration order. Decoding calls the constructor,
    so ``__post_init__`` validation runs on hostile input too.
    """

    def wrap(cls):
        if not dataclasses.is_dataclass(cls):
            raise TypeError(f"{cls.__name__} is not a dataclass")
        if type_id in _records_by_id and _records_by_id[type_id] is not cls:
            raise ValueError(f"record type id {type_id:#x} already taken")
        _records_by_id[type_id] = cls
        _record_ids[cls] = type_id
        return cls

    return wrap


def canonical_enum(type_id: int):
    """Register an int-valued enum with the codec under ``type_id``."""

    def wrap(cls):
        if type_id in _enums_by_id and _enums_by_id[type_id] is not cls:
            raise ValueError(f"enum type id {type_id:#x} already taken")
        for member in cls:
            if not 0 <= int(member.value) <= 255:
                raise ValueError("enum discriminants must fit in one byte")
        _enums_by_id[type_id] = cls
        _enum_ids[cls] = type_id
        return cls

    return wrap


# -- encoder ---------------------------------------------------------------


def encode(value: Any) -> bytes:
    """Return the canonical encoding of ``value``."""
    out = bytearray()
    _encode_into(value, out, 0)
    return bytes(out)


def _len_prefix(n: int) -> bytes:
    if n > 0xFFFFFFFF:
        raise ValueError("length exceeds 32-bit prefix")
    return struct.pack(">I", n)


def _encode_into(v: Any, out: bytearray, depth: int) -> None:
    if depth > MAX_DEPTH:
        raise ValueError("value nested too deeply")
    if v is None:
        out.append(T_NONE)
    elif v is True:
        out.append(T_TRUE)
    elif v is False:
        out.append(T_FALSE)
    elif isinstance(v, enum.Enum):
        type_id = _enum_ids.get(type(v))
        if type_id is None:
            raise TypeError(f"enum {type(v).__name__} is not registered")
        out.append(T_ENUM)
        out += struct.pack(">HB", type_id, int(v.value))
    elif isinstance(v, int):
        if not INT_MIN <= v <= INT_MAX:
            raise ValueError(f"integer {v} outside signed 64-bit range")
        out.append(T_INT)
        out += struct.pack(">q", v)
    elif isinstance(v, float):
        out.append(T_FLOAT)
        out += struct.pack(">d", v)
    elif isinstance(v, (bytes, bytearray, memoryview)):
        b = bytes(v)
        out.append(T_BYTES)
        out += _len_prefix(len(b))
        out += b
    elif isinstance(v, str):
        b = v.encode("utf-8")
        out.append(T_STR)
        out += _len_prefix(len(b))
        out += b
    elif dataclasses.is_dataclass(v) and not isinstance(v, type):
        type_id = _record_ids.get(type(v))
        if type_id is None:
            raise TypeError(f"dataclass {type(v).__name__} is not registered")
        fields = dataclasses.fields(v)
        out.append(T_RECORD)
        out += struct.pack(">HH", type_id, len(fields))
        for f in fields:
            _encode_into(getattr(v, f.name), out, depth + 1)
    elif isinstance(v, (list, tuple)):
        out.append(T_LIST)
        out += _len_prefix(len(v))
        for item in v:
            _encode_into(item, out, depth + 1)
    elif isinstance(v, (set, frozenset)):
        items = sorted(encode_nested(item, depth + 1) for item in v)
        out.append(T_SET)
        out += _len_prefix(len(items))
        for item in items:
            out += item
    elif isinstance(v, dict):
        pairs = sorted(
            (encode_nested(k, depth + 1), encode_nested(val, depth + 1))
            for k, val in v.items()
        )
        out.append(T_MAP)
        out += _len_prefix(len(pairs))
        for k, val in pairs:
            out += k
            out += val
    else:
        raise TypeError(f"cannot canonically encode {type(v).__name__}")


def encode_nested(v: Any, depth: int) -> bytes:
    out = bytearray()
    _encode_into(v, out, depth)
    return bytes(out)


# -- decoder ---------------------------------------------------------------


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise DecodeError("truncated input")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Any:
    """Decode one canonical value; trailing bytes are an error."""
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise DecodeError("expected bytes")
    reader = _Reader(bytes(data))
    value = _decode_from(reader, 0)
    if reader.pos != len(reader.buf):
        raise DecodeError("trailing bytes after value")
    return value


def decode_as(data: bytes, cls: type) -> Any:
    """Decode and require the result to be an instance of ``cls``."""
    value = decode(data)
    if not isinstance(value, cls):
        raise DecodeError(f"expected {cls.__name__}, got {type(value).__name__}")
    return value


def _decode_from(r: _Reader, depth: int) -> Any:
    if depth > MAX_DEPTH:
        raise DecodeError("value nested too deeply")
    (tag,) = r.take(1)
    if tag == T_NONE:
        return None
    if tag == T_FALSE:
        return False
    if tag == T_TRUE:
        return True
    if tag == T_INT:
        return r.unpack(">q")[0]
    if tag == T_FLOAT:
        return r.unpack(">d")[0]
    if tag == T_BYTES:
        (n,) = r.unpack(">I")
        return r.take(n)
    if tag == T_STR:
        (n,) = r.unpack(">I")
        try:
            return r.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid UTF-8") from exc
    if tag == T_LIST:
        (n,) = r.unpack(">I")
        return tuple(_decode_from(r, depth + 1) for _ in range(n))
    if tag == T_SET:
        (n,) = r.unpack(">I")
        items = _decode_sorted(r, n, depth)
        try:
            result = frozenset(items)
        except TypeError as exc:
            raise DecodeError("unhashable set member") from exc
        if len(result) != n:
            raise DecodeError("duplicate set member")
        return result
    if tag == T_MAP:
        (n,) = r.unpack(">I")
        result = {}
        prev = None
        for _ in range(n):
            start = r.pos
            key = _decode_from(r, depth + 1)
            key_bytes = r.buf[start:r.pos]
            if prev is not None and key_bytes <= prev:
                raise DecodeError("map keys not in canonical order")
            prev = key_bytes
            try:
                if key in result:
                    raise DecodeError("duplicate map key")
                result[key] = _decode_from(r, depth + 1)
            except TypeError as exc:
                raise DecodeError("unhashable map key") from exc
        return result
    if tag == T_ENUM:
        type_id, disc = r.unpack(">HB")
        cls = _enums_by_id.get(type_id)
        if cls is None:
            raise DecodeError(f"unknown enum type {type_id:#x}")
        try:
            return cls(disc)
        except ValueError as exc:
            raise DecodeError(f"unknown {cls.__name__} discriminant {disc}") from exc
    if tag == T_RECORD:
        type_id, nfields = r.unpack(">HH")
        cls = _records_by_id.get(type_id)
        if cls is None:
            raise DecodeError(f"unknown record type {type_id:#x}")
        fields = dataclasses.fields(cls)
        if nfields != len(fields):
            raise DecodeError(f"{cls.__name__}: expected {len(fields)} fields, got {nfields}")
        kwargs = {f.name: _decode_from(r, depth + 1) for f in fields}
        try:
            return cls(**kwargs)
        except DecodeError:
            raise
        except (TypeError, ValueError) as exc:
            raise DecodeError(f"{cls.__name__}: {exc}") from exc
    raise DecodeError(f"unknown tag {tag:#x}")


def _decode_sorted(r: _Reader, n: int, depth: int):
    items = []
    prev = None
    for _ in range(n):
        start = r.pos
        items.append(_decode_from(r, depth + 1))
        raw = r.buf[start:r.pos]
        if prev is not None and raw <= prev:
            raise DecodeError("set members not in canonical order")
        prev = raw
    return items


# -- hashing ---------------------------------------------------------------


def content_hash(data: bytes) -> bytes:
    """SHA-256 digest (32 bytes) of ``data``."""
    return hashlib.sha256(data).digest()


def hash_value(value: Any) -> bytes:
    """Content hash of the canonical encoding of ``value``."""
    return content_hash(encode(value))


# -- domain types ----------------------------------------------------------


@canonical_enum(0x0001)
class OperationKind(enum.Enum):
    """What a service provider wants to do with a data source.

    ``SHARE`` decodes but is refused by every policy check.
    """

    COMPUTE = 0
    TRAIN = 1
    SHARE = 2

    @classmethod
    def parse(cls, text: str) -> "OperationKind":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown operation {text!r}") from None

    @property
    def label(self) -> str:
        return self.name.capitalize()


def _check_identifier(name: str, value: Any) -> None:
    if not isinstance(value, str) or not value or any(c.isspace() for c in value):
        raise ValueError(f"{name} must be a non-empty identifier without whitespace")


@canonical(0x0010)
@dataclass(frozen=True)
class DataSelector:
    """Which slice of a data source a request wants to compute over.

    ``max_records=None`` means unlimited. ``time_range`` is an inclusive
    ``(start_ms, end_ms)`` pair on ``collected_at``.
    """

    source_id: str
    schema_tag: str
    max_records: Optional[int] = None
    time_range: Optional[tuple[int, int]] = None

    def __post_init__(self):
        _check_identifier("source_id", self.source_id)
        _check_identifier("schema_tag", self.schema_tag)
        if self.max_records is not None:
            if isinstance(self.max_records, bool) or not isinstance(self.max_records, int):
                raise ValueError("max_records must be an integer")
            if self.max_records < 1:
                raise ValueError("max_records must be >= 1 when bounded")
        if self.time_range is not None:
            tr = tuple(self.time_range)
            if len(tr) != 2 or not all(isinstance(t, int) and not isinstance(t, bool) for t in tr):
                raise ValueError("time_range must be a pair of integer timestamps")
            if tr[0] > tr[1]:
                raise ValueError("time_range start must not exceed end")
            object.__setattr__(self, "time_range", tr)


REQUEST_DOMAIN = b"pdeco/request/v1\x00"


@canonical(0x0011)
@dataclass(frozen=True)
class ComputationRequest:
    request_id: bytes
    requester_did: str
    operation: OperationKind
    function_id: str
    function_params: bytes
    selector: DataSelector
    issued_at: int
    requester_signature: bytes = b""

    def __post_init__(self):
        if not isinstance(self.request_id, bytes) or len(self.request_id) != 16:
            raise ValueError("request_id must be 16 bytes")
        _check_identifier("requester_did", self.requester_did)
        _check_identifier("function_id", self.function_id)
        if not isinstance(self.operation, OperationKind):
            raise ValueError("operation must be an OperationKind")
        if not isinstance(self.function_params, bytes):
            raise ValueError("function_params must be bytes")
        if not isinstance(self.selector, DataSelector):
            raise ValueError("selector must be a DataSelector")
        if isinstance(self.issued_at, bool) or not isinstance(self.issued_at, int):
            raise ValueError("issued_at must be integer milliseconds")
        if not isinstance(self.requester_signature, bytes):
            raise ValueError("requester_signature must be bytes")

    def signing_bytes(self) -> bytes:
        """Bytes covered by ``requester_signature``: every other field."""
        unsigned = dataclasses.replace(self, requester_signature=b"")
        return REQUEST_DOMAIN + encode(unsigned)

    def params(self) -> Any:
        """Decoded ``function_params`` (empty params decode to ``{}``)."""
        if not self.function_params:
            return {}
        return decode(self.function_params)


@canonical(0x0012)
@dataclass(frozen=True)
class ComputeResult:
    request_id: bytes
    payload: bytes
    record_count: int

    def __post_init__(self):
        if not isinstance(self.request_id, bytes) or len(self.request_id) != 16:
            raise ValueError("request_id must be 16 bytes")
        if not isinstance(self.payload, bytes):
            raise ValueError("payload must be bytes")
        if isinstance(self.record_count, bool) or not isinstance(self.record_count, int):
            raise ValueError("record_count must be an integer")
        if self.record_count < 0:
            raise ValueError("record_count must be non-negative")

    def output(self) -> Any:
        return decode(self.payload)
