"""Data plugs and the user's append-only, source-signed record store.

Every record is signed by the (simulated) source that produced it, giving a
chain of possession the enclave re-checks before computing. Records are only
ever appended; on disk the log is a sequence of 4-byte big-endian length
prefixes followed by the canonical encoding of a :class:`DataRecord`.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Union

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .access import AccessPolicy, ComputationPolicy, load_policy, save_policy
from .core import (
    DataSelector,
    DecodeError,
    PdecoError,
    canonical,
    canonical_enum,
    content_hash,
    decode,
    decode_as,
    encode,
)
from .identity import verify_signature

logger = logging.getLogger(__name__)

DEFAULT_POLL_INTERVAL_S = 30.0


class DuplicateSource(PdecoError):
    pass


class BadCredential(PdecoError):
    pass


class UnknownSource(PdecoError):
    pass


class SchemaError(PdecoError, ValueError):
    pass


# -- schemas ---------------------------------------------------------------

SCHEMAS: dict[str, dict[str, type]] = {
    "post.v1": {"title": str, "body": str, "liked": bool},
    "comment.v1": {"text": str},
    "labeled_title.v1": {"title": str, "engaged": bool},
    "metric.v1": {"label": str, "x": float, "y": float},
}

TEXT_FIELDS: dict[str, tuple[str, ...]] = {
    "post.v1": ("title", "body"),
    "comment.v1": ("text",),
    "labeled_title.v1": ("title",),
    "metric.v1": ("label",),
}


def validate_item(schema_tag: str, item: Mapping[str, Any]) -> dict[str, Any]:
    """Normalize a raw item to exactly the schema's fields, or raise SchemaError."""
    fields = SCHEMAS.get(schema_tag)
    if fields is None:
        raise SchemaError(f"unregistered schema {schema_tag!r}")
    if not isinstance(item, Mapping):
        raise SchemaError("item is not an object")
    if set(item) != set(fields):
        raise SchemaError(f"{schema_tag} expects fields {sorted(fields)}, got {sorted(item)}")
    out = {}
    for name, typ in fields.items():
        value = item[name]
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if typ is not bool and isinstance(value, bool):
            raise SchemaError(f"{name}: expected {typ.__name__}")
        if not isinstance(value, typ):
            raise SchemaError(f"{name}: expected {typ.__name__}, got {type(value).__name__}")
        out[name] = value
    return out


def decode_payload(schema_tag: str, payload: bytes) -> dict[str, Any]:
    try:
        value = decode(payload)
    except DecodeError as exc:
        raise SchemaError(str(exc)) from exc
    return validate_item(schema_tag, value)


def record_text(schema_tag: str, payload: Mapping[str, Any]) -> str:
    return " ".join(payload[f] for f in TEXT_FIELDS[schema_tag])


# -- records ---------------------------------------------------------------

RECORD_DOMAIN = b"pdeco/record/v1\x00"


@canonical_enum(0x0003)
class PlugKind(enum.Enum):
    FILE_DROP = 0
    MOCK_API = 1

    @classmethod
    def parse(cls, text: str) -> "PlugKind":
        norm = text.replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.name.replace("_", "").lower() == norm:
                return member
        raise ValueError(f"unknown plug kind {text!r}")


@canonical(0x0040)
@dataclass(frozen=True)
class DataSourceDescriptor:
    source_id: str
    schema_tag: str
    source_signing_key: bytes
    plug_kind: PlugKind
    credential_ref: str
    initial_policy: ComputationPolicy

    def __post_init__(self):
        if self.schema_tag not in SCHEMAS:
            raise ValueError(f"unregistered schema {self.schema_tag!r}")


@canonical(0x0041)
@dataclass(frozen=True)
class DataRecord:
    record_id: str
    source_id: str
    schema_tag: str
    payload: bytes
    collected_at: int
    source_signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return RECORD_DOMAIN + encode(
            (self.record_id, self.source_id, self.schema_tag, self.payload, self.collected_at)
        )

    def verify(self, source_key: Optional[bytes]) -> bool:
        if not source_key or not isinstance(self.source_signature, bytes):
            return False
        return verify_signature(source_key, self.source_signature, self.signing_bytes())

    def fields(self) -> dict[str, Any]:
        return decode_payload(self.schema_tag, self.payload)


class SimulatedSource:
    """Stands in for an external data source that signs what it emits."""

    def __init__(self, source_id: str, seed: bytes):
        if len(seed) != 32:
            raise ValueError("source seed must be 32 bytes")
        self.source_id = source_id
        self.seed = bytes(seed)
        self._key = Ed25519PrivateKey.from_private_bytes(seed)
        self.public_key = self._key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    def issue(self, schema_tag: str, payload: bytes, collected_at: int, seq: int) -> DataRecord:
        record_id = content_hash(encode((self.source_id, schema_tag, payload, collected_at, seq)))[:16].hex()
        unsigned = DataRecord(record_id, self.source_id, schema_tag, payload, collected_at)
        return DataRecord(
            record_id, self.source_id, schema_tag, payload, collected_at,
            self._key.sign(unsigned.signing_bytes()),
        )


# -- plugs -----------------------------------------------------------------


class MockApiService:
    """In-process fake of a third-party API guarded by a bearer token."""

    def __init__(self, token: str, items: Iterable[Mapping[str, Any]] = ()):
        self._token = token
        self._items = list(items)

    def publish(self, *items: Mapping[str, Any]) -> None:
        self._items.extend(items)

    def authenticate(self, credential: str) -> bool:
        return credential == self._token

    def fetch(self, credential: str, cursor: int) -> tuple[list[dict], int]:
        if not self.authenticate(credential):
            raise BadCredential("token rejected by mock API")
        return [dict(i) for i in self._items[cursor:]], len(self._items)


class DataPlug:
    kind: PlugKind

    def __init__(self, poll_interval_s: float = DEFAULT_POLL_INTERVAL_S):
        self.poll_interval_s = poll_interval_s
        self.last_poll_ms: Optional[int] = None

    def accepts(self, credential: str) -> bool:
        raise NotImplementedError

    def fetch(self, credential: str) -> list[dict]:
        raise NotImplementedError

    def due(self, now: int) -> bool:
        return self.last_poll_ms is None or now - self.last_poll_ms >= self.poll_interval_s * 1000


class FileDropPlug(DataPlug):
    """Reads ``*.jsonl`` files dropped into a directory, each file once."""

    kind = PlugKind.FILE_DROP

    def __init__(self, directory: Union[str, Path, None] = None, poll_interval_s: float = DEFAULT_POLL_INTERVAL_S):
        super().__init__(poll_interval_s)
        self.directory = Path(directory) if directory is not None else None
        self._seen: set[str] = set()

    def accepts(self, credential: str) -> bool:
        return isinstance(credential, str) and bool(credential.strip())

    def fetch(self, credential: str) -> list[dict]:
        if self.directory is None or not self.directory.is_dir():
            return []
        items: list[dict] = []
        for path in sorted(self.directory.glob("*.jsonl")):
            if path.name in self._seen:
                continue
            self._seen.add(path.name)
            items.extend(read_jsonl(path))
        return items


class MockApiPlug(DataPlug):
    kind = PlugKind.MOCK_API

    def __init__(self, service: MockApiService, poll_interval_s: float = DEFAULT_POLL_INTERVAL_S):
        super().__init__(poll_interval_s)
        self.service = service
        self._cursor = 0

    def accepts(self, credential: str) -> bool:
        return self.service.authenticate(credential)

    def fetch(self, credential: str) -> list[dict]:
        items, self._cursor = self.service.fetch(credential, self._cursor)
        return items


def read_jsonl(path: Union[str, Path]) -> list[Any]:
    """One JSON object per line; malformed lines come back as ``None``."""
    items: list[Any] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                items.append(json.loads(line))
            except json.JSONDecodeError:
                items.append(None)
    return items


# -- record store ----------------------------------------------------------

_LEN = struct.Struct(">I")


def _scan_log(data: bytes) -> tuple[list[Optional[DataRecord]], int]:
    """Split a log into records; returns entries and the end of the last whole one."""
    entries: list[Optional[DataRecord]] = []
    pos = 0
    while pos + _LEN.size <= len(data):
        (n,) = _LEN.unpack_from(data, pos)
        end = pos + _LEN.size + n
        if end > len(data):
            break
        try:
            entries.append(decode_as(data[pos + _LEN.size:end], DataRecord))
        except DecodeError:
            entries.append(None)
        pos = end
    return entries, pos


class RecordStore:
    """Append-only record log with a (source, schema) index.

    ``key_lookup`` maps a source id to its public key; records failing
    verification are kept in the log (it is append-only) but never served.
    """

    def __init__(self, key_lookup: Callable[[str], Optional[bytes]], path: Union[str, Path, None] = None):
        self._key_lookup = key_lookup
        self.path = Path(path) if path is not None else None
        self._records: list[Optional[DataRecord]] = []
        self._valid: list[bool] = []
        self._index: dict[tuple[str, str], list[int]] = {}
        if self.path is not None and self.path.exists():
            self._recover()

    def _recover(self) -> None:
        data = self.path.read_bytes()
        entries, end = _scan_log(data)
        if end != len(data):
            logger.warning("dropping %d bytes of torn write at end of %s", len(data) - end, self.path)
            with open(self.path, "r+b") as fh:
                fh.truncate(end)
        for rec in entries:
            self._index_record(rec)

    def _index_record(self, rec: Optional[DataRecord]) -> None:
        i = len(self._records)
        self._records.append(rec)
        ok = rec is not None and rec.verify(self._key_lookup(rec.source_id))
        self._valid.append(ok)
        if rec is not None:
            self._index.setdefault((rec.source_id, rec.schema_tag), []).append(i)

    def append(self, rec: DataRecord) -> None:
        if not rec.verify(self._key_lookup(rec.source_id)):
            raise ValueError("refusing to store a record whose source signature does not verify")
        if self.path is not None:
            blob = encode(rec)
            with open(self.path, "ab") as fh:
                fh.write(_LEN.pack(len(blob)) + blob)
                fh.flush()
                os.fsync(fh.fileno())
        self._index_record(rec)

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> list[DataRecord]:
        return [r for r, ok in zip(self._records, self._valid) if ok]

    def query(self, selector: DataSelector) -> list[DataRecord]:
        """Newest first (ties by record id), truncated to ``max_records``."""
        hits = []
        for i in self._index.get((selector.source_id, selector.schema_tag), ()):
            if not self._valid[i]:
                continue
            rec = self._records[i]
            if selector.time_range is not None:
                start, end = selector.time_range
                if not start <= rec.collected_at <= end:
                    continue
            hits.append(rec)
        hits.sort(key=lambda r: (-r.collected_at, r.record_id))
        if selector.max_records is not None:
            hits = hits[: selector.max_records]
        return hits

    def verify_chain(self, source_id: str) -> bool:
        """True iff every stored record of ``source_id`` carries a valid signature.

        A file-backed store is re-read from disk, so tampering after load is
        caught. An undecodable entry cannot be attributed and fails every source.
        """
        if self.path is not None:
            entries = _scan_log(self.path.read_bytes())[0] if self.path.exists() else []
        else:
            entries = self._records
        key = self._key_lookup(source_id)
        for rec in entries:
            if rec is None:
                return False
            if rec.source_id == source_id and not rec.verify(key):
                return False
        return True


def query(store: RecordStore, selector: DataSelector) -> list[DataRecord]:
    return store.query(selector)


def verify_chain(store: RecordStore, source_id: str) -> bool:
    return store.verify_chain(source_id)


# -- the user's data vault ---------------------------------------------------


@dataclass
class IngestReport:
    accepted: int = 0
    rejected: int = 0
    errors: list[str] = field(default_factory=list)


@dataclass
class _SourceEntry:
    descriptor: DataSourceDescriptor
    signer: SimulatedSource
    plug: Optional[DataPlug] = None
    credential: Optional[str] = None


class PersonalDataStore:
    """The user-side state that data plugs feed: sources, records and policy.

    With ``root`` set, everything persists under that directory
    (``records.log``, ``sources.json``, ``policy.toml``).
    """

    def __init__(
        self,
        owner_did: str,
        root: Union[str, Path, None] = None,
        seed: Optional[bytes] = None,
    ):
        self.owner_did = owner_did
        self.root = Path(root) if root is not None else None
        self._seed = seed if seed is not None else os.urandom(32)
        self._sources: dict[str, _SourceEntry] = {}
        self.policy = AccessPolicy(owner_did=owner_did)
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._load_meta()
        self.store = RecordStore(self.source_key, self.root / "records.log" if self.root else None)

    # persistence
    def _load_meta(self) -> None:
        meta = self.root / "sources.json"
        if meta.exists():
            doc = json.loads(meta.read_text(encoding="utf-8"))
            self._seed = bytes.fromhex(doc["seed"])
            for entry in doc["sources"]:
                descriptor = decode_as(bytes.fromhex(entry["descriptor"]), DataSourceDescriptor)
                signer = SimulatedSource(descriptor.source_id, bytes.fromhex(entry["signer_seed"]))
                self._sources[descriptor.source_id] = _SourceEntry(descriptor, signer)
        policy_path = self.root / "policy.toml"
        if policy_path.exists():
            self.policy = load_policy(policy_path)

    def save(self) -> None:
        if self.root is None:
            return
        doc = {
            "owner_did": self.owner_did,
            "seed": self._seed.hex(),
            "sources": [
                {"descriptor": encode(e.descriptor).hex(), "signer_seed": e.signer.seed.hex()}
                for e in self._sources.values()
            ],
        }
        (self.root / "sources.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
        save_policy(self.policy, self.root / "policy.toml")

    # sources
    def source_key(self, source_id: str) -> Optional[bytes]:
        entry = self._sources.get(source_id)
        return entry.descriptor.source_signing_key if entry else None

    def list_sources(self) -> list[str]:
        return sorted(self._sources)

    def descriptor(self, source_id: str) -> DataSourceDescriptor:
        try:
            return self._sources[source_id].descriptor
        except KeyError:
            raise UnknownSource(source_id) from None

    def new_source_signer(self, source_id: str) -> SimulatedSource:
        return SimulatedSource(source_id, content_hash(self._seed + b"/source/" + source_id.encode()))

    def register_source(
        self,
        descriptor: DataSourceDescriptor,
        credential: str,
        signer: SimulatedSource,
        plug: Optional[DataPlug] = None,
    ) -> None:
        """Install a source and its initial computation policy."""
        if descriptor.source_id in self._sources:
            raise DuplicateSource(descriptor.source_id)
        if signer.public_key != descriptor.source_signing_key or signer.source_id != descriptor.source_id:
            raise ValueError("signer does not match descriptor")
        plug = plug if plug is not None else FileDropPlug()
        if plug.kind is not descriptor.plug_kind:
            raise ValueError("plug kind does not match descriptor")
        if not plug.accepts(credential):
            raise BadCredential(f"credential rejected for {descriptor.source_id}")
        self._sources[descriptor.source_id] = _SourceEntry(descriptor, signer, plug, credential)
        self.policy = self.policy.with_policy(descriptor.source_id, descriptor.initial_policy)
        self.save()

    def add_source(
        self,
        source_id: str,
        schema_tag: str,
        credential: str,
        initial_policy: ComputationPolicy,
        plug: Optional[DataPlug] = None,
    ) -> DataSourceDescriptor:
        """Convenience wrapper: mint the simulated source key and register."""
        if source_id in self._sources:
            raise DuplicateSource(source_id)
        plug = plug if plug is not None else FileDropPlug()
        signer = self.new_source_signer(source_id)
        descriptor = DataSourceDescriptor(
            source_id=source_id,
            schema_tag=schema_tag,
            source_signing_key=signer.public_key,
            plug_kind=plug.kind,
            credential_ref=content_hash(credential.encode("utf-8")).hex()[:16],
            initial_policy=initial_policy,
        )
        self.register_source(descriptor, credential, signer, plug)
        return descriptor

    # ingest
    def ingest(self, source_id: str, raw_items: Iterable[Any], now: int) -> IngestReport:
        """Validate, sign and append items; invalid ones are skipped and counted.

        An item may carry ``collected_at`` (ms); otherwise ``now`` is used.
        """
        entry = self._sources.get(source_id)
        if entry is None:
            raise UnknownSource(source_id)
        schema = entry.descriptor.schema_tag
        report = IngestReport()
        for item in raw_items:
            try:
                if not isinstance(item, Mapping):
                    raise SchemaError("item is not an object")
                item = dict(item)
                collected_at = item.pop("collected_at", now)
                if isinstance(collected_at, bool) or not isinstance(collected_at, int):
                    raise SchemaError("collected_at must be integer milliseconds")
                payload = encode(validate_item(schema, item))
            except SchemaError as exc:
                report.rejected += 1
                report.errors.append(str(exc))
                continue
            self.store.append(entry.signer.issue(schema, payload, collected_at, len(self.store)))
            report.accepted += 1
        return report

    def poll(self, now: int) -> IngestReport:
        """Run every plug whose polling interval has elapsed."""
        total = IngestReport()
        for source_id, entry in sorted(self._sources.items()):
            if entry.plug is None or not entry.plug.due(now):
                continue
            entry.plug.last_poll_ms = now
            report = self.ingest(source_id, entry.plug.fetch(entry.credential), now)
            total.accepted += report.accepted
            total.rejected += report.rejected
            total.errors.extend(report.errors)
        return total

    def set_policy(self, policy: AccessPolicy) -> None:
        self.policy = policy
        self.save()
