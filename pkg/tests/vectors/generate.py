"""Build the golden encoding vectors from fixed seeds.

Run ``python tests/vectors/generate.py`` to (re)write the ``*.hex`` files.
Tests only ever compare against the committed files.
"""

import sys
from dataclasses import replace
from pathlib import Path

from pdeco.access import AccessPolicy, ComputationPolicy, DenyReason, grant
from pdeco.agents import AuditLog, ComputeReply, DenyMessage, Frame, FrameKind, hello_frame
from pdeco.analytics import ModelParams
from pdeco.core import ComputationRequest, DataSelector, OperationKind, encode
from pdeco.enclave import EnclaveInstance, make_bundle, measure
from pdeco.federated import ModelUpdate
from pdeco.identity import SecureChannel, generate_identity
from pdeco.store import PersonalDataStore

HERE = Path(__file__).resolve().parent
T0 = 1_700_000_000_000

USER = generate_identity(b"\xa1" * 32)
SP = generate_identity(b"\xb2" * 32)


def _request(function_id="count-posts", op=OperationKind.COMPUTE, params=None, source="posts", schema="post.v1"):
    req = ComputationRequest(
        request_id=bytes(range(16)),
        requester_did=SP.did,
        operation=op,
        function_id=function_id,
        function_params=encode(params or {}),
        selector=DataSelector(source, schema, 5, (T0 - 10_000, T0)),
        issued_at=T0,
    )
    return replace(req, requester_signature=SP.sign(req.signing_bytes()))


def _vault():
    v = PersonalDataStore(USER.did, seed=b"\xc3" * 32)
    v.add_source("posts", "post.v1", "token", ComputationPolicy(frozenset({"count-posts"}), 100, 10))
    v.ingest("posts", [{"title": f"Acme {i}", "body": "b", "liked": i % 2 == 0, "collected_at": T0 - i}
                       for i in range(3)], T0)
    v.add_source("titles", "labeled_title.v1", "token", ComputationPolicy(frozenset({"train"}), 100, 10))
    v.ingest("titles", [{"title": "great win", "engaged": True, "collected_at": T0 - 1}], T0)
    return v


def _enclave():
    e = EnclaveInstance(seed=b"\xd4" * 32)
    count = make_bundle("count-posts", "stat.v1", SP.did, kind="count")
    train = make_bundle("train", "train.logreg.v1", SP.did, feature_dim=4)
    e.load_bundle(count)
    e.load_bundle(train)
    return e, count, train


def build_vectors() -> dict[str, bytes]:
    v = _vault()
    e, count, train = _enclave()
    req = _request()
    result, att = e.execute(req, v.store.query(req.selector), v.source_key)
    policy = grant(AccessPolicy(USER.did, policies=dict(v.policy.policies)), SP.did, "posts",
                   OperationKind.COMPUTE, expires_at=T0 + 86_400_000, now=T0)
    channel = SecureChannel(SP, USER.document(e.public_key))
    log = AuditLog()
    log.append(T0, req.request_id, SP.did, "Permit", "", att.result_hash)
    entry = log.append(T0 + 1, b"\x01" * 16, SP.did, "Deny", "NoGrant")
    return {
        "selector": encode(req.selector),
        "request": encode(req),
        "request_signing_bytes": req.signing_bytes(),
        "did_document": USER.document(e.public_key).to_bytes(),
        "access_policy": encode(policy),
        "data_record": encode(v.store.records()[0]),
        "envelope": channel.pack(encode(req)).to_bytes(),
        "bundle": encode(count),
        "measurement": measure(count),
        "compute_result": encode(result),
        "attestation": encode(att),
        "deny_message": encode(DenyMessage(req.request_id, DenyReason.RATE_LIMITED)),
        "audit_entry": encode(entry),
        "hello_frame": hello_frame(SP.document()),
        "frame": Frame(FrameKind.SEALED, b"\x00\x01").to_bytes(),
        "model_params": encode(ModelParams(2, 0, [0.5, -1.25, 3.0]).to_wire()),
    }


def build_attestation_vectors() -> dict[str, bytes]:
    """One honest compute reply and one model update, with the verifier's inputs."""
    v = _vault()
    e, count, train = _enclave()
    req = _request()
    result, att = e.execute(req, v.store.query(req.selector), v.source_key)
    model = ModelParams(4, 0, [0.0, 0.25, -0.5, 1.0, 0.125])
    treq = _request("train", OperationKind.TRAIN,
                    {"round": 1, "model": model.to_wire(), "hyper": {"epochs": 1, "learning_rate": 0.5, "seed": 0}},
                    "titles", "labeled_title.v1")
    tres, tatt = e.execute(treq, v.store.query(treq.selector), v.source_key)
    return {
        "enclave_public_key": e.public_key,
        "compute_measurement": measure(count),
        "compute_request": encode(req),
        "compute_reply": encode(ComputeReply(result, att)),
        "train_measurement": measure(train),
        "train_request": encode(treq),
        "model_update": encode(ModelUpdate(1, USER.did, tres, tatt)),
    }


def write(directory: Path, vectors: dict[str, bytes]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, data in sorted(vectors.items()):
        (directory / f"{name}.hex").write_text(data.hex() + "\n", encoding="ascii")


if __name__ == "__main__":
    write(HERE, build_vectors())
    write(HERE / "attestations", build_attestation_vectors())
    print(f"wrote vectors under {HERE}", file=sys.stderr)
