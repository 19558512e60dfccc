"""User and service-provider controllers, wire frames and the audit log.

Everything that crosses the wire is a :class:`Frame`: either a ``HELLO``
carrying a DID document in the clear, or a ``SEALED`` envelope whose
plaintext is one canonical message. A user controller only ever emits four
message types: its DID document, a deny, a compute reply and a model update.
None of them can carry a stored record.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Protocol, Sequence, Union

from .access import Decision, DenyReason, RequestHistory, allow, authenticate, now_ms
from .analytics import EvaluationError
from .core import (
    ComputationRequest,
    ComputeResult,
    DataSelector,
    DecodeError,
    OperationKind,
    PdecoError,
    canonical,
    canonical_enum,
    decode,
    decode_as,
    encode,
    hash_value,
)
from .enclave import (
    ENCLAVE_VERSION,
    Attestation,
    EnclaveInstance,
    FunctionBundle,
    FunctionNotLoaded,
    InputSignatureInvalid,
    UnknownFunctionFamily,
    measure,
    vrf,
)
from .federated import ModelAggregator, ModelUpdate
from .identity import (
    AgentIdentity,
    DidDocument,
    InvalidDidDocument,
    MessageEnvelope,
    SecureChannel,
    TamperDetected,
    TransportError,
)
from .store import PersonalDataStore

logger = logging.getLogger(__name__)

FRESHNESS_MS = 5 * 60 * 1000
REPLAY_RETENTION_MS = 24 * 60 * 60 * 1000
GENESIS_HASH = b"\x00" * 32

ALLOWED_OUTBOUND = frozenset({"DidDocument", "Deny", "ComputeResult", "ModelUpdate"})


class Denied(PdecoError):
    def __init__(self, reason: DenyReason):
        super().__init__(f"request denied: {reason.label}")
        self.reason = reason


class AttestationInvalid(PdecoError):
    pass


class Timeout(PdecoError):
    pass


class UnknownPeer(TransportError):
    pass


# -- wire messages -----------------------------------------------------------


@canonical_enum(0x0004)
class FrameKind(enum.Enum):
    HELLO = 0
    SEALED = 1


@canonical(0x0070)
@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    body: bytes

    def to_bytes(self) -> bytes:
        return encode(self)


@canonical(0x0071)
@dataclass(frozen=True)
class DenyMessage:
    request_id: bytes
    reason: DenyReason


@canonical(0x0072)
@dataclass(frozen=True)
class ComputeReply:
    result: ComputeResult
    attestation: Attestation


def message_type(msg: Any) -> str:
    if isinstance(msg, DidDocument):
        return "DidDocument"
    if isinstance(msg, DenyMessage):
        return "Deny"
    if isinstance(msg, ComputeReply):
        return "ComputeResult"
    if isinstance(msg, ModelUpdate):
        return "ModelUpdate"
    if isinstance(msg, ComputationRequest):
        return "ComputationRequest"
    return type(msg).__name__


def hello_frame(doc: DidDocument) -> bytes:
    return Frame(FrameKind.HELLO, doc.to_bytes()).to_bytes()


def sealed_frame(env: MessageEnvelope) -> bytes:
    return Frame(FrameKind.SEALED, env.to_bytes()).to_bytes()


@dataclass
class Delivery:
    """What happened to one inbound frame."""

    replies: list[bytes] = field(default_factory=list)
    accepted: bool = True
    error: Optional[str] = None
    message: Optional[str] = None


Observer = Callable[[str, dict], None]


# -- audit log ---------------------------------------------------------------


@canonical(0x0073)
@dataclass(frozen=True)
class AuditEntry:
    seq: int
    timestamp: int
    request_id: bytes
    requester_did: str
    decision: str
    reason: str
    result_hash: bytes
    prev_hash: bytes
    entry_hash: bytes = b""

    def compute_hash(self) -> bytes:
        return hash_value(replace(self, entry_hash=b""))

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "request_id": self.request_id.hex(),
            "requester_did": self.requester_did,
            "decision": self.decision,
            "reason": self.reason,
            "result_hash": self.result_hash.hex(),
            "prev_hash": self.prev_hash.hex(),
            "entry_hash": self.entry_hash.hex(),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "AuditEntry":
        return cls(
            seq=int(doc["seq"]),
            timestamp=int(doc["timestamp"]),
            request_id=bytes.fromhex(doc["request_id"]),
            requester_did=doc["requester_did"],
            decision=doc["decision"],
            reason=doc["reason"],
            result_hash=bytes.fromhex(doc["result_hash"]),
            prev_hash=bytes.fromhex(doc["prev_hash"]),
            entry_hash=bytes.fromhex(doc["entry_hash"]),
        )


class AuditLog:
    """Hash-chained, append-only record of every inbound request decision."""

    def __init__(self, path: Union[str, Path, None] = None):
        self.path = Path(path) if path is not None else None
        self.entries: list[AuditEntry] = []
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self.entries = [AuditEntry.from_json(json.loads(line)) for line in fh if line.strip()]

    def append(
        self,
        timestamp: int,
        request_id: bytes,
        requester_did: str,
        decision: str,
        reason: str = "",
        result_hash: bytes = b"",
    ) -> AuditEntry:
        prev = self.entries[-1].entry_hash if self.entries else GENESIS_HASH
        entry = AuditEntry(len(self.entries), timestamp, request_id, requester_did,
                           decision, reason, result_hash, prev)
        entry = replace(entry, entry_hash=entry.compute_hash())
        self.entries.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
        return entry

    def first_invalid(self) -> Optional[int]:
        prev = GENESIS_HASH
        for i, e in enumerate(self.entries):
            if e.seq != i or e.prev_hash != prev or e.compute_hash() != e.entry_hash:
                return i
            prev = e.entry_hash
        return None

    def verify(self) -> bool:
        return self.first_invalid() is None

    def __len__(self) -> int:
        return len(self.entries)


# -- user controller -----------------------------------------------------------


class UserController:
    """Enforces the owner's access control on every inbound request.

    Pipeline per sealed frame: unpack, decode, authenticate, freshness and
    replay check, ``allow``, then (on Permit) query the store and execute in
    the enclave. Exactly one audit entry is appended per sealed frame.

    ``outbound_hook`` rewrites outbound messages before sealing. It exists so
    the simulator can model a compromised host sitting outside the enclave.
    """

    def __init__(
        self,
        identity: AgentIdentity,
        vault: PersonalDataStore,
        enclave: EnclaveInstance,
        clock: Optional[Callable[[], int]] = None,
        observer: Optional[Observer] = None,
        audit_path: Union[str, Path, None] = None,
    ):
        self.identity = identity
        self.did = identity.did
        self.vault = vault
        self.enclave = enclave
        self.clock = clock or now_ms
        self.observer = observer
        self.channels: dict[str, SecureChannel] = {}
        self.seen_request_ids: dict[tuple[str, bytes], int] = {}
        self.history = RequestHistory()
        self.audit = AuditLog(audit_path)
        self.outbound_hook: Optional[Callable[[Any, str], list[Any]]] = None
        self.enclave_calls = 0

    def document(self) -> DidDocument:
        return self.identity.document(self.enclave.public_key)

    def hello(self) -> bytes:
        return hello_frame(self.document())

    def connect(self, peer: DidDocument) -> SecureChannel:
        """Open a channel to ``peer``; an existing channel is never reset."""
        ch = self.channels.get(peer.did)
        if ch is None:
            ch = SecureChannel(self.identity, peer)
            self.channels[peer.did] = ch
        return ch

    def _emit(self, kind: str, detail: dict) -> None:
        if self.observer is not None:
            self.observer(kind, detail)

    def receive(self, data: bytes) -> Delivery:
        try:
            frame = decode_as(data, Frame)
        except DecodeError as exc:
            return self._transport_error("?", TamperDetected(f"undecodable frame: {exc}"))
        if frame.kind is FrameKind.HELLO:
            return self._receive_hello(frame)
        try:
            env = MessageEnvelope.from_bytes(frame.body)
        except DecodeError as exc:
            return self._transport_error("?", TamperDetected(f"undecodable envelope: {exc}"))
        out = self.handle_request(env)
        if isinstance(out, Delivery):
            return out
        return Delivery(replies=out, accepted=True, message="ComputationRequest")

    def _receive_hello(self, frame: Frame) -> Delivery:
        try:
            doc = DidDocument.from_bytes(frame.body)
            known = doc.did in self.channels
            self.connect(doc)
        except (DecodeError, InvalidDidDocument) as exc:
            return Delivery(accepted=False, error=f"InvalidDidDocument: {exc}")
        return Delivery(replies=[] if known else [self.hello()], message="DidDocument")

    def _transport_error(self, sender: str, exc: Exception) -> Delivery:
        name = type(exc).__name__
        self.audit.append(self.clock(), b"", sender, "Error", name)
        self._emit("uc.transport_error", {"sender": sender, "error": name})
        return Delivery(accepted=False, error=name)

    def handle_request(self, env: MessageEnvelope):
        """Process one sealed envelope; returns reply frames or an error Delivery."""
        ch = self.channels.get(env.sender_did)
        if ch is None:
            return self._transport_error(env.sender_did, UnknownPeer(env.sender_did))
        try:
            plaintext = ch.unpack(env)
        except TransportError as exc:
            return self._transport_error(env.sender_did, exc)
        try:
            re = decode_as(plaintext, ComputationRequest)
        except DecodeError as exc:
            return self._transport_error(env.sender_did, TamperDetected(f"not a request: {exc}"))
        now = self.clock()
        decision, reply = self._decide_and_run(re, ch, now)
        result_hash = b""
        if isinstance(reply, (ComputeReply, ModelUpdate)):
            result_hash = reply.attestation.result_hash
        reason = decision.reason.label if decision.reason else ""
        self.audit.append(now, re.request_id, re.requester_did,
                          "Permit" if decision.permitted else "Deny", reason, result_hash)
        self._emit("uc.decision", {
            "request_id": re.request_id.hex(),
            "requester": re.requester_did,
            "source": re.selector.source_id,
            "op": re.operation.label,
            "function": re.function_id,
            "decision": "Permit" if decision.permitted else "Deny",
            "reason": reason,
        })
        messages = [reply]
        if self.outbound_hook is not None:
            messages = self.outbound_hook(reply, env.sender_did)
        return [self.seal(env.sender_did, m) for m in messages]

    handle_train = handle_request

    def _decide_and_run(self, re: ComputationRequest, ch: SecureChannel, now: int):
        peer_key = ch.peer.signing_public_key
        if re.requester_did != ch.peer_did or not authenticate(re, peer_key):
            return self._deny(re, DenyReason.BAD_SIGNATURE)
        if abs(now - re.issued_at) > FRESHNESS_MS:
            return self._deny(re, DenyReason.STALE)
        self._evict(now)
        key = (re.requester_did, re.request_id)
        if key in self.seen_request_ids:
            return self._deny(re, DenyReason.REPLAY)
        self.seen_request_ids[key] = re.issued_at
        decision = allow(self.vault.policy, re, now, self.history, requester_key=peer_key)
        if not decision.permitted:
            return decision, DenyMessage(re.request_id, decision.reason)
        self.history.record(re.requester_did, re.selector.source_id, now)
        records = self.vault.store.query(re.selector)
        self.enclave_calls += 1
        try:
            result, att = self.enclave.execute(re, records, self.vault.source_key)
        except (FunctionNotLoaded, InputSignatureInvalid, EvaluationError, UnknownFunctionFamily) as exc:
            logger.info("enclave refused %s: %s", re.request_id.hex(), exc)
            return self._deny(re, DenyReason.EXECUTION_FAILED)
        if re.operation is OperationKind.TRAIN:
            round_no = int(decode(result.payload)["round"])
            return decision, ModelUpdate(round_no, self.did, result, att)
        return decision, ComputeReply(result, att)

    @staticmethod
    def _deny(re: ComputationRequest, reason: DenyReason):
        return Decision.deny(reason), DenyMessage(re.request_id, reason)

    def _evict(self, now: int) -> None:
        horizon = now - REPLAY_RETENTION_MS
        stale = [k for k, issued in self.seen_request_ids.items() if issued < horizon]
        for k in stale:
            del self.seen_request_ids[k]

    def seal(self, peer_did: str, message: Any) -> bytes:
        return sealed_frame(self.channels[peer_did].pack(encode(message)))


# -- service provider controller -------------------------------------------------


@dataclass
class Outcome:
    request_id: bytes
    target: str
    status: str  # ok | denied | attestation_invalid | timeout
    result: Optional[ComputeResult] = None
    reason: Optional[DenyReason] = None


@dataclass
class _Pending:
    target: str
    request: ComputationRequest


class SpController:
    """Issues signed requests, verifies attested replies and hosts the aggregator."""

    def __init__(
        self,
        identity: AgentIdentity,
        bundles: Sequence[FunctionBundle] = (),
        enclave_version: str = ENCLAVE_VERSION,
        seed: Optional[int] = None,
        clock: Optional[Callable[[], int]] = None,
        observer: Optional[Observer] = None,
    ):
        self.identity = identity
        self.did = identity.did
        self.clock = clock or now_ms
        self.observer = observer
        self.bundles = {b.function_id: b for b in bundles}
        self.measurements = {fid: measure(b, enclave_version) for fid, b in self.bundles.items()}
        self.channels: dict[str, SecureChannel] = {}
        self.attestation_keys: dict[str, bytes] = {}
        self.aggregator = ModelAggregator(identity, self.attestation_keys, seed=seed, clock=self.clock)
        self.pending: dict[bytes, _Pending] = {}
        self.outcomes: dict[bytes, Outcome] = {}
        self.fl_inbox: list[ModelUpdate] = []

    def _emit(self, kind: str, detail: dict) -> None:
        if self.observer is not None:
            self.observer(kind, detail)

    def document(self) -> DidDocument:
        return self.identity.document()

    def hello(self) -> bytes:
        return hello_frame(self.document())

    def connect(self, peer: DidDocument) -> SecureChannel:
        ch = self.channels.get(peer.did)
        if ch is None:
            ch = SecureChannel(self.identity, peer)
            self.channels[peer.did] = ch
            if peer.attestation_public_key:
                self.attestation_keys[peer.did] = peer.attestation_public_key
        return ch

    def build_request(
        self,
        function_id: str,
        selector: DataSelector,
        params: Optional[Mapping[str, Any]] = None,
        operation: OperationKind = OperationKind.COMPUTE,
    ) -> ComputationRequest:
        req = ComputationRequest(
            request_id=self.aggregator.new_request_id(),
            requester_did=self.did,
            operation=operation,
            function_id=function_id,
            function_params=encode(dict(params or {})),
            selector=selector,
            issued_at=self.clock(),
        )
        return replace(req, requester_signature=self.identity.sign(req.signing_bytes()))

    def seal(self, peer_did: str, message: Any) -> bytes:
        return sealed_frame(self.channels[peer_did].pack(encode(message)))

    def issue(
        self,
        target: str,
        function_id: str,
        selector: DataSelector,
        params: Optional[Mapping[str, Any]] = None,
    ) -> tuple[ComputationRequest, bytes]:
        """Sign a compute request for ``target``, register it as pending, seal it."""
        if target not in self.channels:
            raise UnknownPeer(target)
        if function_id not in self.measurements:
            raise FunctionNotLoaded(f"no bundle loaded for {function_id!r}")
        req = self.build_request(function_id, selector, params)
        self.track(target, req)
        return req, self.seal(target, req)

    def track(self, target: str, request: ComputationRequest) -> None:
        """Register a request issued elsewhere (e.g. an earlier process) as pending."""
        self.pending[request.request_id] = _Pending(target, request)

    def expire(self, request_id: bytes) -> Optional[Outcome]:
        """Resolve a still-pending request as timed out."""
        p = self.pending.pop(request_id, None)
        if p is None:
            return None
        return self._resolve(Outcome(request_id, p.target, "timeout"))

    def _resolve(self, outcome: Outcome) -> Outcome:
        self.outcomes[outcome.request_id] = outcome
        self._emit("sp.outcome", {
            "request_id": outcome.request_id.hex(),
            "target": outcome.target,
            "status": outcome.status,
            "reason": outcome.reason.label if outcome.reason else "",
        })
        return outcome

    def receive(self, data: bytes) -> Delivery:
        try:
            frame = decode_as(data, Frame)
        except DecodeError as exc:
            return Delivery(accepted=False, error=f"TamperDetected: {exc}")
        if frame.kind is FrameKind.HELLO:
            try:
                doc = DidDocument.from_bytes(frame.body)
                known = doc.did in self.channels
                self.connect(doc)
            except (DecodeError, InvalidDidDocument) as exc:
                return Delivery(accepted=False, error=f"InvalidDidDocument: {exc}")
            return Delivery(replies=[] if known else [self.hello()], message="DidDocument")
        try:
            env = MessageEnvelope.from_bytes(frame.body)
            ch = self.channels.get(env.sender_did)
            if ch is None:
                raise UnknownPeer(env.sender_did)
            msg = decode(ch.unpack(env))
        except DecodeError as exc:
            self._emit("sp.transport_error", {"error": "TamperDetected"})
            return Delivery(accepted=False, error=f"TamperDetected: {exc}")
        except TransportError as exc:
            self._emit("sp.transport_error", {"error": type(exc).__name__})
            return Delivery(accepted=False, error=type(exc).__name__)
        kind = message_type(msg)
        if isinstance(msg, ModelUpdate):
            if msg.agent_did != env.sender_did:
                self._emit("sp.update_dropped", {"sender": env.sender_did, "why": "sender_mismatch"})
                return Delivery(accepted=False, error="SenderMismatch", message=kind)
            self.fl_inbox.append(msg)
            self._emit("sp.update_received", {
                "sender": env.sender_did,
                "request_id": msg.result.request_id.hex(),
                "update_hash": hash_value(msg).hex(),
            })
            return Delivery(message=kind)
        if isinstance(msg, ComputeReply):
            self._handle_compute_reply(env.sender_did, msg)
            return Delivery(message=kind)
        if isinstance(msg, DenyMessage):
            p = self.pending.get(msg.request_id)
            if p is not None and p.target == env.sender_did:
                del self.pending[msg.request_id]
                self._resolve(Outcome(msg.request_id, p.target, "denied", reason=msg.reason))
            return Delivery(message=kind)
        return Delivery(accepted=False, error="UnexpectedMessage", message=kind)

    def _handle_compute_reply(self, sender: str, reply: ComputeReply) -> None:
        rid = reply.result.request_id
        p = self.pending.get(rid)
        if p is None or p.target != sender:
            self._emit("sp.unsolicited", {"sender": sender, "request_id": rid.hex()})
            return
        del self.pending[rid]
        key = self.attestation_keys.get(sender, b"")
        ok = vrf(key, self.measurements[p.request.function_id], p.request, reply.result, reply.attestation)
        status = "ok" if ok else "attestation_invalid"
        self._resolve(Outcome(rid, sender, status, result=reply.result if ok else None))

    def request_compute(
        self,
        target: str,
        function_id: str,
        selector: DataSelector,
        params: Optional[Mapping[str, Any]],
        transport: "SyncTransport",
    ) -> ComputeResult:
        """Blocking request over a synchronous transport; returns a verified result."""
        req, frame = self.issue(target, function_id, selector, params)
        for reply in transport.deliver(frame, target):
            self.receive(reply)
        outcome = self.outcomes.get(req.request_id) or self.expire(req.request_id)
        if outcome.status == "ok":
            return outcome.result
        if outcome.status == "denied":
            raise Denied(outcome.reason)
        if outcome.status == "attestation_invalid":
            raise AttestationInvalid(f"attestation for {req.request_id.hex()} failed verification")
        raise Timeout(f"no reply from {target}")


# -- synchronous transports ------------------------------------------------------


class SyncTransport(Protocol):
    def deliver(self, frame: bytes, recipient: str) -> list[bytes]:
        ...


class DirectTransport:
    """Calls the recipient's ``receive`` in-process; unknown recipients are offline."""

    def __init__(self, nodes: Mapping[str, Any] = ()):
        self.nodes: dict[str, Any] = dict(nodes)
        self.outbound: dict[str, list[bytes]] = {}

    def add(self, node: Any) -> None:
        self.nodes[node.did] = node

    def deliver(self, frame: bytes, recipient: str) -> list[bytes]:
        node = self.nodes.get(recipient)
        if node is None:
            return []
        replies = node.receive(frame).replies
        self.outbound.setdefault(recipient, []).extend(replies)
        return replies


def handshake(a: Any, b: Any) -> None:
    """Exchange DID documents between two controllers."""
    a.connect(b.document())
    b.connect(a.document())


class DirectFederatedTransport:
    """Federated-round transport over a :class:`DirectTransport`."""

    def __init__(self, sp: SpController, transport: DirectTransport):
        self.sp = sp
        self.transport = transport

    def collect(self, requests: Mapping[str, ComputationRequest], timeout_ms: int) -> list[ModelUpdate]:
        for did, req in requests.items():
            if did not in self.sp.channels:
                continue
            for reply in self.transport.deliver(self.sp.seal(did, req), did):
                self.sp.receive(reply)
        updates, self.sp.fl_inbox = self.sp.fl_inbox, []
        return updates
