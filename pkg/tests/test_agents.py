import json
from dataclasses import replace

import pytest

from helpers import NOW, World
from pdeco.access import DenyReason
from pdeco.agents import (
    ALLOWED_OUTBOUND,
    AttestationInvalid,
    AuditLog,
    ComputeReply,
    Denied,
    DenyMessage,
    DirectFederatedTransport,
    Frame,
    FrameKind,
    Timeout,
    UnknownPeer,
    hello_frame,
    message_type,
)
from pdeco.analytics import ModelParams, TrainHyper
from pdeco.core import DataSelector, OperationKind, decode, decode_as, encode
from pdeco.federated import GlobalModel, RoundConfig, run_rounds
from pdeco.identity import MessageEnvelope, SecureChannel, generate_identity

POSTS = DataSelector("posts", "post.v1", 10)


def compute(w, fid="count", selector=POSTS, params=None):
    return w.sp.request_compute(w.uc.did, fid, selector, params or {}, w.transport)


def sp_view(w, frames):
    """Decode frames sent by the user agent as the provider sees them."""
    ch = SecureChannel(w.sp_id, w.uc.document())
    return [decode(ch.unpack(MessageEnvelope.from_bytes(decode_as(f, Frame).body))) for f in frames]


def test_happy_path_count():
    w = World()
    res = compute(w)
    assert res.output() == {"kind": "count", "value": 7}
    assert w.uc.enclave_calls == 1
    (entry,) = w.uc.audit.entries
    assert entry.decision == "Permit" and entry.result_hash != b""


def test_ner_over_the_pipeline():
    w = World()
    assert compute(w, "ner").output() == {"counts": {"acme": 7}}


def test_no_grant_never_reaches_enclave():
    w = World(grant_ops=())
    with pytest.raises(Denied) as err:
        compute(w)
    assert err.value.reason is DenyReason.NO_GRANT
    assert w.uc.enclave_calls == 0
    assert w.uc.audit.entries[0].reason == "NoGrant"


def test_policy_violation_and_rate_limit():
    w = World(per_day=1)
    with pytest.raises(Denied) as err:
        compute(w, selector=DataSelector("posts", "post.v1", 1000))
    assert err.value.reason is DenyReason.POLICY_VIOLATION
    compute(w)
    with pytest.raises(Denied) as err:
        compute(w)
    assert err.value.reason is DenyReason.RATE_LIMITED


def test_replayed_request_is_denied():
    w = World()
    req, frame = w.sp.issue(w.uc.did, "count", POSTS)
    w.uc.receive(frame)
    # Re-seal the identical request so the channel accepts it as a new envelope.
    again = w.uc.receive(w.sp.seal(w.uc.did, req))
    (msg,) = sp_view(w, again.replies)
    assert msg == DenyMessage(req.request_id, DenyReason.REPLAY)
    assert w.uc.enclave_calls == 1


def test_replay_memory_expires_after_retention():
    w = World()
    req, frame = w.sp.issue(w.uc.did, "count", POSTS)
    w.uc.receive(frame)
    w.clock.t += 24 * 3600 * 1000 + 1
    out = w.uc.receive(w.sp.seal(w.uc.did, req))
    # Once forgotten, the request is too old to pass the freshness window anyway.
    (msg,) = sp_view(w, out.replies)
    assert msg.reason is DenyReason.STALE


def test_stale_and_future_requests_are_denied():
    w = World()
    w.clock.t = NOW - 10 * 60 * 1000
    req, _ = w.sp.issue(w.uc.did, "count", POSTS)
    w.clock.t = NOW
    (msg,) = sp_view(w, w.uc.receive(w.sp.seal(w.uc.did, req)).replies)
    assert msg.reason is DenyReason.STALE
    w.clock.t = NOW + 10 * 60 * 1000
    req, _ = w.sp.issue(w.uc.did, "count", POSTS)
    w.clock.t = NOW
    (msg,) = sp_view(w, w.uc.receive(w.sp.seal(w.uc.did, req)).replies)
    assert msg.reason is DenyReason.STALE


def test_request_for_someone_else_is_bad_signature():
    w = World()
    mallory = generate_identity(b"\x77" * 32)
    req = w.sp.build_request("count", POSTS)
    spoofed = replace(req, requester_did=mallory.did)
    spoofed = replace(spoofed, requester_signature=mallory.sign(spoofed.signing_bytes()))
    (msg,) = sp_view(w, w.uc.receive(w.sp.seal(w.uc.did, spoofed)).replies)
    assert msg.reason is DenyReason.BAD_SIGNATURE
    assert w.uc.enclave_calls == 0


def test_execution_failure_is_reported_as_deny():
    w = World(functions=("count", "ner", "missing"))
    w.sp.measurements["missing"] = b"\x00" * 32
    req = w.sp.build_request("missing", POSTS)
    w.sp.track(w.uc.did, req)
    for reply in w.transport.deliver(w.sp.seal(w.uc.did, req), w.uc.did):
        w.sp.receive(reply)
    assert w.sp.outcomes[req.request_id].reason is DenyReason.EXECUTION_FAILED


def test_offline_agent_times_out():
    w = World()
    w.transport.nodes.clear()
    with pytest.raises(Timeout):
        compute(w)


def test_unknown_peer_is_refused_by_sp():
    w = World()
    with pytest.raises(UnknownPeer):
        w.sp.issue("did:pds:bnobody", "count", POSTS)


def test_tampered_reply_fails_attestation():
    w = World()
    w.uc.outbound_hook = lambda reply, peer: [
        replace(reply, result=replace(reply.result, payload=encode({"kind": "count", "value": 999})))
    ]
    with pytest.raises(AttestationInvalid):
        compute(w)


def test_reply_from_other_enclave_fails_attestation():
    w = World()
    w.sp.attestation_keys[w.uc.did] = generate_identity(b"\x66" * 32).signing_public_key
    with pytest.raises(AttestationInvalid):
        compute(w)


def test_train_with_zero_epochs_returns_global_model():
    w = World(grant_ops=("Train",))
    m = w.sp.measurements["train"]
    config = RoundConfig((w.uc.did,), "train", m, "titles", rounds_total=1, hyper=TrainHyper(epochs=0),
                         max_records=50)
    init = GlobalModel(ModelParams.init(256, 0, seed=1))
    final = run_rounds(w.sp.aggregator, config, DirectFederatedTransport(w.sp, w.transport), init)
    assert final.params.identical(init.params)
    assert final.round == 1
    assert final.history[0].participants == 1


def test_train_without_grant_is_denied():
    w = World()
    req = w.sp.build_request("train", DataSelector("titles", "labeled_title.v1", 5),
                             {"round": 1, "model": ModelParams.zeros().to_wire(), "hyper": TrainHyper().to_wire()},
                             operation=OperationKind.TRAIN)
    (msg,) = sp_view(w, w.uc.receive(w.sp.seal(w.uc.did, req)).replies)
    assert msg.reason is DenyReason.NO_GRANT


def test_update_n_samples_matches_records():
    w = World(grant_ops=("Train",))
    m = w.sp.measurements["train"]
    config = RoundConfig((w.uc.did,), "train", m, "titles", hyper=TrainHyper(epochs=1), max_records=50)
    seen = []
    run_rounds(w.sp.aggregator, config, DirectFederatedTransport(w.sp, w.transport),
               GlobalModel(ModelParams.zeros()), emit=lambda mt, agg: seen.append(agg))
    (upd,) = seen[0].accepted
    assert decode(upd.result.payload)["n_samples"] == 2


def test_every_outbound_message_is_an_allowed_type():
    w = World(per_day=3)
    for fid in ("count", "ner", "count", "count"):
        try:
            compute(w, fid)
        except Denied:
            pass
    sent = sp_view(w, w.transport.outbound[w.uc.did])
    assert {message_type(m) for m in sent} <= ALLOWED_OUTBOUND
    assert {message_type(m) for m in sent} == {"ComputeResult", "Deny"}


def test_audit_has_one_entry_per_frame_including_errors():
    w = World(grant_ops=())
    for _ in range(2):
        with pytest.raises(Denied):
            compute(w)
    w.uc.receive(b"\xff")
    w.uc.receive(Frame(FrameKind.SEALED, b"junk").to_bytes())
    assert [e.decision for e in w.uc.audit.entries] == ["Deny", "Deny", "Error", "Error"]
    assert w.uc.audit.verify()


def test_audit_detects_mutation_deletion_and_reorder():
    log = AuditLog()
    for i in range(4):
        log.append(NOW + i, bytes([i]) * 16, "did:pds:bsp", "Permit")
    assert log.verify()
    original = list(log.entries)
    log.entries[2] = replace(log.entries[2], decision="Deny")
    assert log.first_invalid() == 2
    log.entries = original[:1] + original[2:]
    assert log.first_invalid() == 1
    log.entries = [original[1], original[0]] + original[2:]
    assert log.first_invalid() == 0


def test_audit_persists_as_jsonl(tmp_path):
    path = tmp_path / "audit.jsonl"
    log = AuditLog(path)
    log.append(NOW, b"\x01" * 16, "did:pds:bsp", "Deny", "NoGrant")
    log.append(NOW + 1, b"\x02" * 16, "did:pds:bsp", "Permit", "", b"\x03" * 32)
    again = AuditLog(path)
    assert again.entries == log.entries and again.verify()
    lines = path.read_text().splitlines()
    doc = json.loads(lines[0])
    doc["reason"] = "Permit"
    lines[0] = json.dumps(doc, sort_keys=True)
    path.write_text("\n".join(lines) + "\n")
    assert not AuditLog(path).verify()


def test_hello_opens_channel_once():
    w = World()
    stranger = generate_identity(b"\x55" * 32)
    first = w.uc.receive(hello_frame(stranger.document()))
    assert first.message == "DidDocument" and len(first.replies) == 1
    assert w.uc.receive(hello_frame(stranger.document())).replies == []
    bad = replace(stranger.document(), did="did:pds:bforged")
    assert not w.uc.receive(hello_frame(bad)).accepted


def test_sp_ignores_unsolicited_replies():
    w = World()
    req, frame = w.sp.issue(w.uc.did, "count", POSTS)
    replies = w.transport.deliver(frame, w.uc.did)
    del w.sp.pending[req.request_id]
    w.sp.receive(replies[0])
    assert req.request_id not in w.sp.outcomes


def test_compute_reply_type_name():
    assert message_type(DenyMessage(b"\x00" * 16, DenyReason.NO_GRANT)) == "Deny"
    assert message_type(object()) == "object"
    assert ComputeReply.__name__ == "ComputeReply"
