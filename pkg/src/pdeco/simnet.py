"""Deterministic discrete-event network with pluggable adversaries.

One heap of ``(time, seq)`` events drives every agent; there is no wall
clock anywhere. Each message's latency and drop decision derive from
``hash(seed, src, dst, link_seq)``, so adding adversarial traffic on one
link never perturbs the randomness of another. Links are FIFO, which keeps
the strictly increasing channel counters valid under random latency.

Network adversaries (``TamperEnvelope``, ``ReplayEnvelope``,
``InjectForgedRequest``) act on frames in flight. Envelopes are
AEAD-sealed, so a wire adversary can never produce a readable but altered
result; ``TamperResult``, ``ForgeAttestation`` and ``PoisonUpdate`` therefore
model a compromised host sitting between a user's enclave and its channel,
rewriting outbound messages before they are sealed.
"""

from __future__ import annotations

import enum
import json
import logging
import random
import sys
from dataclasses import dataclass, field, replace
from functools import partial
from heapq import heappop, heappush
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from .access import ComputationPolicy, grant
from .agents import ComputeReply, DenyMessage, SpController, UserController
from .analytics import ModelParams, TrainHyper
from .core import (
    ComputationRequest,
    ComputeResult,
    DataSelector,
    OperationKind,
    PdecoError,
    content_hash,
    decode,
    encode,
    hash_value,
)
from .enclave import Attestation, EnclaveInstance, make_bundle
from .federated import (
    GlobalModel,
    InsufficientParticipants,
    ModelUpdate,
    RoundConfig,
    run_rounds,
)
from .identity import AgentIdentity, generate_identity
from .store import FileDropPlug, PersonalDataStore, read_jsonl
from . import synth

logger = logging.getLogger(__name__)

EPOCH_MS = 1_700_000_000_000
TRACE_SCHEMA = 1


class ScenarioError(PdecoError):
    pass


class AdversaryMode(enum.Enum):
    NONE = "None"
    TAMPER_ENVELOPE = "TamperEnvelope"
    REPLAY_ENVELOPE = "ReplayEnvelope"
    INJECT_FORGED_REQUEST = "InjectForgedRequest"
    TAMPER_RESULT = "TamperResult"
    FORGE_ATTESTATION = "ForgeAttestation"
    POISON_UPDATE = "PoisonUpdate"

    @classmethod
    def parse(cls, text: str) -> "AdversaryMode":
        for m in cls:
            if m.value.lower() == str(text).lower():
                return m
        raise ScenarioError(f"unknown adversary mode {text!r}")


WIRE_MODES = (AdversaryMode.TAMPER_ENVELOPE, AdversaryMode.REPLAY_ENVELOPE)
HOST_MODES = (AdversaryMode.TAMPER_RESULT, AdversaryMode.FORGE_ATTESTATION, AdversaryMode.POISON_UPDATE)


@dataclass(frozen=True)
class AdversarySpec:
    mode: AdversaryMode = AdversaryMode.NONE
    target: str = "*"
    probability: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ScenarioError("adversary probability must lie in [0, 1]")

    def matches(self, *names: str) -> bool:
        return self.target == "*" or self.target in names


@dataclass(frozen=True)
class SourceConfig:
    source_id: str
    schema_tag: str
    items: tuple = ()
    functions: tuple[str, ...] = ()
    max_records: int = 10_000
    max_requests_per_day: int = 10_000


@dataclass(frozen=True)
class GrantConfig:
    sp: str
    source_id: str
    op: OperationKind = OperationKind.COMPUTE
    expires_in_ms: Optional[int] = None


@dataclass(frozen=True)
class BundleConfig:
    function_id: str
    family: str
    params: tuple = ()  # sorted (key, value) pairs

    def make(self, provided_by: str):
        return make_bundle(self.function_id, self.family, provided_by, **dict(self.params))


@dataclass(frozen=True)
class AgentConfig:
    name: str
    role: str  # "user" | "sp"
    sources: tuple[SourceConfig, ...] = ()
    grants: tuple[GrantConfig, ...] = ()
    bundles: tuple[BundleConfig, ...] = ()
    offline: bool = False

    def __post_init__(self):
        if self.role not in ("user", "sp"):
            raise ScenarioError(f"agent {self.name!r}: role must be 'user' or 'sp'")


@dataclass(frozen=True)
class SimConfig:
    seed: int
    agents: tuple[AgentConfig, ...]
    latency_ms: tuple[int, int] = (5, 20)
    drop_rate: float = 0.0
    adversary: AdversarySpec = field(default_factory=AdversarySpec)
    duration_ms: int = 3_600_000
    timeout_ms: int = 10_000

    def __post_init__(self):
        lo, hi = self.latency_ms
        if not 0 <= lo <= hi:
            raise ScenarioError("latency range must satisfy 0 <= lo <= hi")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ScenarioError("drop_rate must lie in [0, 1]")
        names = [a.name for a in self.agents]
        if len(set(names)) != len(names):
            raise ScenarioError("agent names must be unique")
        if "mallory" in names:
            raise ScenarioError("'mallory' is reserved for the adversary")


@dataclass(frozen=True)
class RequestStep:
    at_ms: int
    sp: str
    target: str
    function_id: str
    source_id: str
    schema_tag: str
    max_records: Optional[int] = 100
    params: tuple = ()
    repeat: int = 1
    interval_ms: int = 0


@dataclass(frozen=True)
class FederatedStep:
    at_ms: int
    sp: str
    agents: tuple[str, ...]
    function_id: str
    source_id: str
    schema_tag: str = "labeled_title.v1"
    rounds: int = 1
    min_participants: int = 1
    hyper: TrainHyper = field(default_factory=TrainHyper)
    feature_dim: int = 256
    hidden_dim: int = 0
    init_seed: Optional[int] = None
    max_records: int = 10_000


@dataclass(frozen=True)
class Scenario:
    steps: tuple = ()


# -- trace ---------------------------------------------------------------------


@dataclass(frozen=True)
class TraceEvent:
    time: int
    seq: int
    kind: str
    actor: str
    payload_hash: str = ""
    detail: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"time": self.time, "seq": self.seq, "kind": self.kind, "actor": self.actor,
             "payload_hash": self.payload_hash, "detail": dict(self.detail)},
            sort_keys=True, separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "TraceEvent":
        doc = json.loads(line)
        return cls(doc["time"], doc["seq"], doc["kind"], doc["actor"], doc["payload_hash"], doc["detail"])


def trace_bytes(trace: Iterable[TraceEvent]) -> bytes:
    return "".join(e.to_json() + "\n" for e in trace).encode("utf-8")


def write_trace(path: Union[str, Path], trace: Iterable[TraceEvent]) -> None:
    Path(path).write_bytes(trace_bytes(trace))


def read_trace(path: Union[str, Path]) -> list[TraceEvent]:
    with open(path, encoding="utf-8") as fh:
        return [TraceEvent.from_json(line) for line in fh if line.strip()]


def _jsonable(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, enum.Enum):
        return getattr(value, "label", value.name)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def derive(seed: int, *parts: Any) -> bytes:
    return content_hash(encode(["pdeco/sim", seed, *parts]))


def derive_int(seed: int, *parts: Any) -> int:
    return int.from_bytes(derive(seed, *parts)[:8], "big")


# -- simulation ------------------------------------------------------------------


@dataclass
class SimResult:
    trace: list[TraceEvent]
    outcomes: dict[str, dict[str, str]]
    global_models: dict[str, GlobalModel]
    audits: dict[str, Any]
    outbound: dict[str, list[bytes]]
    metrics: dict[str, Any]
    nodes: dict[str, Any]

    def trace_bytes(self) -> bytes:
        return trace_bytes(self.trace)

    @property
    def global_model(self) -> Optional[GlobalModel]:
        if not self.global_models:
            return None
        return self.global_models[sorted(self.global_models)[0]]


class Simulation:
    def __init__(self, config: SimConfig):
        self.config = config
        self.seed = config.seed
        self.adversary = config.adversary
        self.now = 0
        self.trace: list[TraceEvent] = []
        self._heap: list = []
        self._event_seq = 0
        self._msg_seq = 0
        self._link_seq: dict[tuple[str, str], int] = {}
        self._link_free: dict[tuple[str, str], int] = {}
        self._adv_rng = random.Random(derive_int(self.seed, "adversary"))
        self._last_update: dict[str, ModelUpdate] = {}
        self.nodes: dict[str, Any] = {}
        self.names: dict[str, str] = {}
        self.offline: set[str] = set()
        self.outbound: dict[str, list[bytes]] = {}
        self.global_models: dict[str, GlobalModel] = {}
        self.mallory: Optional[AgentIdentity] = None
        self._setup()

    # clock and trace
    def clock(self) -> int:
        return EPOCH_MS + self.now

    def record(self, kind: str, actor: str, payload: bytes = b"", **detail: Any) -> None:
        ph = content_hash(payload).hex() if payload else ""
        self.trace.append(TraceEvent(
            self.now, len(self.trace), kind, actor, ph,
            {k: _jsonable(v) for k, v in detail.items()},
        ))

    def _observe(self, name: str, kind: str, detail: dict) -> None:
        self.record(kind, name, **detail)

    def did(self, name: str) -> str:
        return self.nodes[name].did

    # setup
    def _setup(self) -> None:
        cfg = self.config
        sps = [a for a in cfg.agents if a.role == "sp"]
        users = [a for a in cfg.agents if a.role == "user"]
        for a in cfg.agents:
            ident = generate_identity(derive(self.seed, "identity", a.name))
            observer = partial(self._observe, a.name)
            if a.role == "sp":
                bundles = [b.make(ident.did) for b in a.bundles]
                node = SpController(ident, bundles, seed=derive_int(self.seed, "sp", a.name),
                                    clock=self.clock, observer=observer)
            else:
                vault = PersonalDataStore(ident.did, seed=derive(self.seed, "vault", a.name))
                enclave = EnclaveInstance(seed=derive(self.seed, "enclave", a.name))
                node = UserController(ident, vault, enclave, clock=self.clock, observer=observer)
                self.outbound[a.name] = []
            self.nodes[a.name] = node
            self.names[ident.did] = a.name
            if a.offline:
                self.offline.add(a.name)
            self.record("agent", a.name, role=a.role, did=ident.did)

        loaded = {}
        for a in sps:
            for b in self.nodes[a.name].bundles.values():
                if b.function_id in loaded:
                    raise ScenarioError(f"function id {b.function_id!r} provided twice")
                loaded[b.function_id] = b
        for a in users:
            uc = self.nodes[a.name]
            for fid in sorted(loaded):
                uc.enclave.load_bundle(loaded[fid])
            for src in a.sources:
                cp = ComputationPolicy(frozenset(src.functions), src.max_records, src.max_requests_per_day)
                uc.vault.add_source(src.source_id, src.schema_tag, "sim", cp, plug=FileDropPlug())
                report = uc.vault.ingest(src.source_id, src.items, self.clock())
                self.record("ingest", a.name, source=src.source_id, accepted=report.accepted,
                            rejected=report.rejected)
                self.record("policy.cp", a.name, source=src.source_id, functions=sorted(src.functions),
                            max_records=src.max_records, max_requests_per_day=src.max_requests_per_day)
            policy = uc.vault.policy
            for g in a.grants:
                if g.sp not in self.nodes or self.nodes[g.sp] is uc:
                    raise ScenarioError(f"{a.name}: grant names unknown service provider {g.sp!r}")
                now = self.clock()
                expires = now + g.expires_in_ms if g.expires_in_ms is not None else None
                policy = grant(policy, self.did(g.sp), g.source_id, g.op, expires, now)
                entry = policy.find(self.did(g.sp), g.source_id, g.op)
                self.record("policy.grant", a.name, sp=self.did(g.sp), source=g.source_id, op=g.op,
                            granted_at=entry.granted_at, expires_at=entry.expires_at)
            uc.vault.policy = policy

        # DID documents are exchanged out of band before traffic starts.
        for s in sps:
            for u in users:
                self._handshake(s.name, u.name)

        if self.adversary.mode is not AdversaryMode.NONE:
            self.mallory = generate_identity(derive(self.seed, "identity", "mallory"))
            self.record("adversary", "mallory", mode=self.adversary.mode.value,
                        target=self.adversary.target, probability=self.adversary.probability,
                        did=self.mallory.did)
        if self.adversary.mode is AdversaryMode.INJECT_FORGED_REQUEST:
            m = SpController(self.mallory, seed=derive_int(self.seed, "sp", "mallory"), clock=self.clock,
                             observer=partial(self._observe, "mallory"))
            self.nodes["mallory"] = m
            self.names[m.did] = "mallory"
            for u in users:
                self._handshake("mallory", u.name)
        if self.adversary.mode in HOST_MODES:
            for u in users:
                self.nodes[u.name].outbound_hook = partial(self._host_hook, u.name)

    def _handshake(self, sp_name: str, user_name: str) -> None:
        sp, uc = self.nodes[sp_name], self.nodes[user_name]
        sp.connect(uc.document())
        uc.connect(sp.document())
        self.outbound[user_name].append(uc.hello())
        self.record("hello", user_name, uc.hello(), peer=sp.did)

    # event queue
    def schedule(self, at: int, action: Callable[[], None]) -> None:
        heappush(self._heap, (at, self._event_seq, action))
        self._event_seq += 1

    def run_until(self, deadline: int) -> None:
        while self._heap and self._heap[0][0] <= deadline:
            at, _, action = heappop(self._heap)
            self.now = at
            action()
        self.now = max(self.now, deadline)

    def run_all(self) -> None:
        while self._heap:
            at, _, action = heappop(self._heap)
            self.now = at
            action()

    # network
    def send(self, src: str, dst: str, frame: bytes) -> None:
        link = (src, dst)
        n = self._link_seq.get(link, 0)
        self._link_seq[link] = n + 1
        msg_id = self._next_msg_id()
        h = derive(self.seed, "link", src, dst, n)
        u_drop = int.from_bytes(h[:8], "big") / 2.0**64
        u_lat = int.from_bytes(h[8:16], "big") / 2.0**64
        if src in self.outbound:
            self.outbound[src].append(frame)
        self.record("send", src, frame, dst=dst, msg_id=msg_id)
        if dst in self.offline:
            self.record("drop", src, frame, dst=dst, msg_id=msg_id, why="offline")
            return
        if u_drop < self.config.drop_rate:
            self.record("drop", src, frame, dst=dst, msg_id=msg_id, why="loss")
            return
        lo, hi = self.config.latency_ms
        latency = lo + min(int(u_lat * (hi - lo + 1)), hi - lo)
        deliveries = [(frame, msg_id)]
        mode = self.adversary.mode
        if mode in WIRE_MODES and self.adversary.matches(src, dst) and self._activate():
            deliveries = self._wire_attack(mode, src, dst, frame, msg_id)
        for f, mid in deliveries:
            arrive = max(self.now + latency, self._link_free.get(link, 0))
            self._link_free[link] = arrive
            self.schedule(arrive, partial(self._deliver, src, dst, f, mid))

    def _next_msg_id(self) -> int:
        self._msg_seq += 1
        return self._msg_seq

    def _activate(self) -> bool:
        return self._adv_rng.random() < self.adversary.probability

    def _deliver(self, src: str, dst: str, frame: bytes, msg_id: int) -> None:
        d = self.nodes[dst].receive(frame)
        self.record("recv", dst, frame, src=src, msg_id=msg_id, accepted=d.accepted,
                    error=d.error or "", message=d.message or "")
        for reply in d.replies:
            self.send(dst, src, reply)

    # adversaries
    def _wire_attack(self, mode: AdversaryMode, src: str, dst: str, frame: bytes, msg_id: int):
        if mode is AdversaryMode.TAMPER_ENVELOPE:
            buf = bytearray(frame)
            pos = self._adv_rng.randrange(len(buf))
            buf[pos] ^= 1 << self._adv_rng.randrange(8)
            forged_id = self._next_msg_id()
            self.record("adv.TamperEnvelope", "mallory", bytes(buf), src=src, dst=dst,
                        original=msg_id, msg_id=forged_id, offset=pos)
            return [(bytes(buf), forged_id)]
        replay_id = self._next_msg_id()
        self.record("adv.ReplayEnvelope", "mallory", frame, src=src, dst=dst,
                    original=msg_id, msg_id=replay_id)
        return [(frame, msg_id), (frame, replay_id)]

    def _inject_forged(self, sp_name: str, target: str, genuine: ComputationRequest) -> None:
        m = self.nodes["mallory"]
        own = m.build_request(genuine.function_id, genuine.selector, genuine.params())
        self.record("adv.InjectForgedRequest", "mallory", request_id=own.request_id,
                    requester=own.requester_did, target=self.did(target), variant="own_identity")
        self.send("mallory", target, m.seal(self.did(target), own))
        spoof = replace(own, request_id=m.aggregator.new_request_id(), requester_did=genuine.requester_did,
                        requester_signature=b"")
        spoof = replace(spoof, requester_signature=self.mallory.sign(spoof.signing_bytes()))
        self.record("adv.InjectForgedRequest", "mallory", request_id=spoof.request_id,
                    requester=spoof.requester_did, target=self.did(target), variant="spoofed_requester")
        self.send("mallory", target, m.seal(self.did(target), spoof))

    def _host_hook(self, user: str, message: Any, peer_did: str) -> list[Any]:
        mode = self.adversary.mode
        if not isinstance(message, (ComputeReply, ModelUpdate)):
            return [message]
        is_update = isinstance(message, ModelUpdate)
        if mode is AdversaryMode.POISON_UPDATE and not is_update:
            return [message]
        peer = self.names.get(peer_did, "")
        if not self.adversary.matches(user, peer) or not self._activate():
            if is_update:
                self._last_update[user] = message
            return [message]
        rid = message.result.request_id
        if mode is AdversaryMode.TAMPER_RESULT:
            forged = _with_result(message, _flip_payload(message.result, self._adv_rng))
            self._note_forgery("adv.TamperResult", user, rid, forged)
            return [forged]
        if mode is AdversaryMode.FORGE_ATTESTATION:
            att = message.attestation
            fake = replace(att, nonce=bytes(self._adv_rng.getrandbits(8) for _ in range(16)), enclave_signature=b"")
            fake = replace(fake, enclave_signature=self.mallory.sign(fake.signing_bytes()))
            forged = replace(message, attestation=fake)
            self._note_forgery("adv.ForgeAttestation", user, rid, forged)
            return [forged]
        # PoisonUpdate: the honest update still goes out first; poison follows it.
        out = [message]
        boosted = _with_result(message, _scale_model(message.result, 1e3))
        self._note_forgery("adv.PoisonUpdate", user, rid, boosted, variant="scaled")
        out.append(boosted)
        stale = self._last_update.get(user)
        if stale is not None:
            self._note_forgery("adv.PoisonUpdate", user, stale.result.request_id, stale, variant="stale")
            out.append(stale)
        self._last_update[user] = message
        return out

    def _note_forgery(self, kind: str, user: str, rid: bytes, message: Any, **extra: Any) -> None:
        self.record(kind, "mallory", encode(message), host=user, request_id=rid,
                    message_hash=hash_value(message), **extra)

    # scenario steps
    def _run_request(self, step: RequestStep) -> None:
        sp = self.nodes[step.sp]
        target = self.did(step.target)
        selector = DataSelector(step.source_id, step.schema_tag, step.max_records)
        req, frame = sp.issue(target, step.function_id, selector, dict(step.params))
        self.record("sp.issue", step.sp, request_id=req.request_id, requester=sp.did, target=target,
                    function=step.function_id, source=step.source_id, op=req.operation)
        self.send(step.sp, step.target, frame)
        self.schedule(self.now + self.config.timeout_ms, partial(sp.expire, req.request_id))
        if (self.adversary.mode is AdversaryMode.INJECT_FORGED_REQUEST
                and self.adversary.matches(step.sp, step.target) and self._activate()):
            self._inject_forged(step.sp, step.target, req)

    def _run_federated(self, step: FederatedStep) -> None:
        sp = self.nodes[step.sp]
        dids = tuple(self.did(a) for a in step.agents)
        config = RoundConfig(
            eligible_agents=dids,
            function_id=step.function_id,
            expected_measurement=sp.measurements[step.function_id],
            source_id=step.source_id,
            rounds_total=step.rounds,
            min_participants=step.min_participants,
            hyper=step.hyper,
            schema_tag=step.schema_tag,
            max_records=step.max_records,
            timeout_ms=self.config.timeout_ms,
        )
        if step.init_seed is None:
            params = ModelParams.zeros(step.feature_dim, step.hidden_dim)
        else:
            params = ModelParams.init(step.feature_dim, step.hidden_dim, step.init_seed)
        transport = SimFederatedTransport(self, step.sp)

        def emit(metrics, agg):
            for upd in agg.accepted:
                self.record("fl.update", step.sp, request_id=upd.result.request_id, agent=upd.agent_did,
                            message_hash=hash_value(upd), accepted=True, reason="")
            for upd, why in agg.rejected:
                self.record("fl.update", step.sp, request_id=_safe_rid(upd), agent=getattr(upd, "agent_did", ""),
                            message_hash=_safe_hash(upd), accepted=False, reason=why)
            self.record("fl.round", step.sp, round=metrics.round, participants=metrics.participants,
                        rejected=metrics.rejected, mean_loss=metrics.mean_loss,
                        params_hash=hash_value(agg.params.to_wire()))

        try:
            gm = run_rounds(sp.aggregator, config, transport, GlobalModel(params), emit)
        except InsufficientParticipants as exc:
            self.record("fl.aborted", step.sp, why=str(exc))
            return
        self.global_models[step.sp] = gm
        self.record("fl.done", step.sp, rounds=gm.round, params_hash=hash_value(gm.params.to_wire()))

    def run(self, scenario: Scenario) -> SimResult:
        for step in scenario.steps:
            if isinstance(step, RequestStep):
                for k in range(step.repeat):
                    self.schedule(step.at_ms + k * step.interval_ms, partial(self._run_request, step))
            elif isinstance(step, FederatedStep):
                self.schedule(step.at_ms, partial(self._run_federated, step))
            else:
                raise ScenarioError(f"unknown step {step!r}")
        self.run_until(self.config.duration_ms)
        self.run_all()
        return self.result()

    def result(self) -> SimResult:
        outcomes: dict[str, dict[str, str]] = {}
        metrics: dict[str, Any] = {"events": len(self.trace)}
        for e in self.trace:
            metrics[e.kind] = metrics.get(e.kind, 0) + 1
            if e.kind == "sp.outcome":
                outcomes.setdefault(e.actor, {})[e.detail["request_id"]] = e.detail["status"]
                key = f"outcome.{e.detail['status']}"
                metrics[key] = metrics.get(key, 0) + 1
            elif e.kind == "uc.decision":
                key = f"decision.{e.detail['decision']}"
                metrics[key] = metrics.get(key, 0) + 1
        audits = {n: node.audit for n, node in self.nodes.items() if isinstance(node, UserController)}
        return SimResult(list(self.trace), outcomes, dict(self.global_models), audits,
                         {k: list(v) for k, v in self.outbound.items()}, metrics, self.nodes)


class SimFederatedTransport:
    """Sends round requests through the simulated network and waits out the timeout."""

    def __init__(self, sim: Simulation, sp_name: str):
        self.sim = sim
        self.sp_name = sp_name

    def collect(self, requests: Mapping[str, ComputationRequest], timeout_ms: int) -> list[ModelUpdate]:
        sim = self.sim
        sp = sim.nodes[self.sp_name]
        sp.fl_inbox = []
        for did, req in requests.items():
            if did not in sp.channels:
                continue
            sim.record("fl.distribute", self.sp_name, request_id=req.request_id, requester=sp.did,
                       target=did, function=req.function_id, source=req.selector.source_id, op=req.operation)
            sim.send(self.sp_name, sim.names[did], sp.seal(did, req))
        sim.run_until(sim.now + timeout_ms)
        updates, sp.fl_inbox = sp.fl_inbox, []
        return updates


def _with_result(message: Any, result: ComputeResult) -> Any:
    return replace(message, result=result)


def _flip_payload(result: ComputeResult, rng: random.Random) -> ComputeResult:
    buf = bytearray(result.payload)
    if not buf:
        return replace(result, record_count=result.record_count + 1)
    buf[rng.randrange(len(buf))] ^= 1 << rng.randrange(8)
    return replace(result, payload=bytes(buf))


def _scale_model(result: ComputeResult, factor: float) -> ComputeResult:
    doc = decode(result.payload)
    model = ModelParams.from_wire(doc["model"])
    boosted = ModelParams(model.feature_dim, model.hidden_dim, np.asarray(model.weights) * factor)
    doc = dict(doc, model=boosted.to_wire())
    return replace(result, payload=encode(doc))


def _safe_rid(upd: Any) -> bytes:
    try:
        return upd.result.request_id
    except AttributeError:
        return b""


def _safe_hash(upd: Any) -> bytes:
    try:
        return hash_value(upd)
    except (TypeError, ValueError):
        return b""


def run_sim(config: SimConfig, scenario: Scenario) -> SimResult:
    return Simulation(config).run(scenario)


# -- security properties -------------------------------------------------------


PROPERTIES = ("NoUnauthorizedPermit", "AllTamperRejected", "AllForgedAttRejected", "PoisonExcluded")


@dataclass
class SecurityCheck:
    property: str
    holds: bool
    checked: int
    counterexamples: list[TraceEvent]


def assert_security(trace: Iterable[TraceEvent], prop: str) -> SecurityCheck:
    """Scan a trace for violations of one security property."""
    trace = list(trace)
    checks = {
        "NoUnauthorizedPermit": _check_permits,
        "AllTamperRejected": partial(_check_forgeries, ("adv.TamperEnvelope", "adv.ReplayEnvelope", "adv.TamperResult")),
        "AllForgedAttRejected": partial(_check_forgeries, ("adv.ForgeAttestation",)),
        "PoisonExcluded": partial(_check_forgeries, ("adv.PoisonUpdate",)),
    }
    if prop not in checks:
        raise ValueError(f"unknown property {prop!r}; expected one of {', '.join(PROPERTIES)}")
    checked, bad = checks[prop](trace)
    return SecurityCheck(prop, not bad, checked, bad)


DAY_MS = 86_400_000


def _check_permits(trace: list[TraceEvent]) -> tuple[int, list[TraceEvent]]:
    grants: dict[tuple, tuple[int, int]] = {}
    cps: dict[tuple, dict] = {}
    issued: dict[str, str] = {}
    used: dict[tuple, int] = {}
    checked, bad = 0, []
    for e in trace:
        d = e.detail
        if e.kind == "policy.grant":
            grants[(e.actor, d["sp"], d["source"], d["op"])] = (d["granted_at"], d["expires_at"])
        elif e.kind == "policy.cp":
            cps[(e.actor, d["source"])] = d
        elif e.kind in ("sp.issue", "fl.distribute"):
            issued[d["request_id"]] = d["requester"]
        elif e.kind == "uc.decision":
            checked += 1
            if d["decision"] != "Permit":
                continue
            now = EPOCH_MS + e.time
            g = grants.get((e.actor, d["requester"], d["source"], d["op"]))
            cp = cps.get((e.actor, d["source"]))
            day = (e.actor, d["requester"], d["source"], now // DAY_MS)
            used[day] = used.get(day, 0) + 1
            ok = (
                issued.get(d["request_id"]) == d["requester"]
                and g is not None and g[0] <= now and (g[1] is None or now < g[1])
                and cp is not None and d["function"] in cp["functions"]
                and used[day] <= cp["max_requests_per_day"]
            )
            if not ok:
                bad.append(e)
    return checked, bad


def _check_forgeries(kinds: tuple[str, ...], trace: list[TraceEvent]) -> tuple[int, list[TraceEvent]]:
    """Every forged frame must be refused, and no forged result or update may be accepted."""
    forged_frames: dict[int, TraceEvent] = {}
    forged_msgs: dict[str, TraceEvent] = {}
    forged_rids: dict[str, TraceEvent] = {}
    bad = []
    for e in trace:
        d = e.detail
        if e.kind in kinds:
            if e.kind in ("adv.TamperEnvelope", "adv.ReplayEnvelope"):
                forged_frames[d["msg_id"]] = e
            else:
                forged_msgs[d["message_hash"]] = e
                if e.kind != "adv.PoisonUpdate":
                    forged_rids[d["request_id"]] = e
        elif e.kind == "recv" and d["msg_id"] in forged_frames and d["accepted"]:
            bad.append(e)
        elif e.kind == "sp.outcome" and d["request_id"] in forged_rids and d["status"] == "ok":
            bad.append(e)
        elif e.kind == "fl.update" and d["accepted"] and (
            d["message_hash"] in forged_msgs or d["request_id"] in forged_rids
        ):
            bad.append(e)
    return len(forged_frames) + len(forged_msgs), bad


# -- scenario files --------------------------------------------------------------


def load_scenario(path: Union[str, Path]) -> tuple[SimConfig, Scenario]:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return scenario_from_dict(doc, path.parent)


def _require(doc: Mapping, key: str, where: str) -> Any:
    if key not in doc:
        raise ScenarioError(f"{where}: missing {key!r}")
    return doc[key]


def _source_items(src: Mapping, base: Path, where: str) -> tuple:
    n_ways = sum(k in src for k in ("items", "data", "synthetic"))
    if n_ways != 1:
        raise ScenarioError(f"{where}: give exactly one of items, data, synthetic")
    if "items" in src:
        items = list(src["items"])
    elif "data" in src:
        try:
            items = read_jsonl(base / src["data"])
        except OSError as exc:
            raise ScenarioError(f"{where}: {exc}") from None
    else:
        kind = src["synthetic"]
        count = int(src.get("count", 100))
        seed = int(src.get("data_seed", 0))
        gens = {"titles": synth.synthetic_titles, "posts": synth.synthetic_posts, "random_posts": synth.random_posts}
        if kind not in gens:
            raise ScenarioError(f"{where}: unknown synthetic kind {kind!r}")
        items = gens[kind](count, seed)
    if "shard" in src:
        i, k = src["shard"]
        items = items[i::k]
    return tuple(items)


def scenario_from_dict(doc: Mapping, base: Union[str, Path] = ".") -> tuple[SimConfig, Scenario]:
    base = Path(base)
    try:
        sim = doc.get("sim", {})
        adv = doc.get("adversary", {})
        adversary = AdversarySpec(
            AdversaryMode.parse(adv.get("mode", "None")),
            str(adv.get("target", "*")),
            float(adv.get("probability", 1.0)),
        )
        agents = []
        for i, a in enumerate(doc.get("agent", [])):
            where = f"agent[{i}]"
            name = _require(a, "name", where)
            sources = []
            for j, s in enumerate(a.get("source", [])):
                w = f"{where}.source[{j}]"
                sources.append(SourceConfig(
                    _require(s, "id", w), _require(s, "schema", w), _source_items(s, base, w),
                    tuple(s.get("functions", ())), int(s.get("max_records", 10_000)),
                    int(s.get("max_requests_per_day", 10_000)),
                ))
            grants = [
                GrantConfig(_require(g, "sp", where), _require(g, "source", where),
                            OperationKind.parse(g.get("op", "Compute")), g.get("expires_in_ms"))
                for g in a.get("grant", [])
            ]
            reserved = {"id", "family"}
            bundles = [
                BundleConfig(_require(b, "id", where), _require(b, "family", where),
                             tuple(sorted((k, v) for k, v in b.items() if k not in reserved)))
                for b in a.get("bundle", [])
            ]
            agents.append(AgentConfig(name, a.get("role", "user"), tuple(sources), tuple(grants),
                                      tuple(bundles), bool(a.get("offline", False))))
        latency = sim.get("latency_ms", [5, 20])
        if isinstance(latency, int):
            latency = [latency, latency]
        config = SimConfig(
            seed=int(sim.get("seed", 0)),
            agents=tuple(agents),
            latency_ms=(int(latency[0]), int(latency[1])),
            drop_rate=float(sim.get("drop_rate", 0.0)),
            adversary=adversary,
            duration_ms=int(sim.get("duration_ms", 3_600_000)),
            timeout_ms=int(sim.get("timeout_ms", 10_000)),
        )
        steps: list = []
        for i, r in enumerate(doc.get("request", [])):
            w = f"request[{i}]"
            steps.append(RequestStep(
                int(r.get("at_ms", 0)), _require(r, "sp", w), _require(r, "target", w),
                _require(r, "function", w), _require(r, "source", w), r.get("schema", "post.v1"),
                r.get("max_records", 100), tuple(sorted(r.get("params", {}).items())),
                int(r.get("repeat", 1)), int(r.get("interval_ms", 0)),
            ))
        for i, f in enumerate(doc.get("federated", [])):
            w = f"federated[{i}]"
            steps.append(FederatedStep(
                int(f.get("at_ms", 0)), _require(f, "sp", w), tuple(_require(f, "agents", w)),
                _require(f, "function", w), _require(f, "source", w),
                f.get("schema", "labeled_title.v1"), int(f.get("rounds", 1)),
                int(f.get("min_participants", 1)),
                TrainHyper(int(f.get("epochs", 5)), float(f.get("learning_rate", 0.5)), int(f.get("seed", 0))),
                int(f.get("feature_dim", 256)), int(f.get("hidden_dim", 0)), f.get("init_seed"),
                int(f.get("max_records", 10_000)),
            ))
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError, PdecoError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from None
    _validate(config, Scenario(tuple(steps)))
    return config, Scenario(tuple(steps))


def _validate(config: SimConfig, scenario: Scenario) -> None:
    roles = {a.name: a.role for a in config.agents}
    for step in scenario.steps:
        if roles.get(step.sp) != "sp":
            raise ScenarioError(f"{step.sp!r} is not a service provider")
        targets = (step.target,) if isinstance(step, RequestStep) else step.agents
        for t in targets:
            if roles.get(t) != "user":
                raise ScenarioError(f"{t!r} is not a user agent")
        bundles = {b.function_id for a in config.agents if a.name == step.sp for b in a.bundles}
        if step.function_id not in bundles:
            raise ScenarioError(f"{step.sp} ships no bundle {step.function_id!r}")
