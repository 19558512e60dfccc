import hashlib
import pickle
import random
from dataclasses import replace

import pytest

from oracles import mutate_attested
from pdeco.access import ComputationPolicy
from pdeco.analytics import EvaluationError, ModelParams, TrainHyper
from pdeco.core import ComputationRequest, DataSelector, OperationKind, encode
from pdeco.enclave import (
    ENCLAVE_VERSION,
    Attestation,
    DuplicateFunction,
    EnclaveInstance,
    FunctionBundle,
    FunctionNotLoaded,
    InputSignatureInvalid,
    UnknownFunctionFamily,
    make_bundle,
    measure,
    vrf,
)
from pdeco.identity import generate_identity
from pdeco.store import PersonalDataStore

NOW = 1_700_000_000_000
SP = generate_identity(b"\x31" * 32)


def make_request(function_id="count", op=OperationKind.COMPUTE, params=None, source="posts", schema="post.v1"):
    req = ComputationRequest(
        request_id=bytes(range(16)),
        requester_did=SP.did,
        operation=op,
        function_id=function_id,
        function_params=encode(params or {}),
        selector=DataSelector(source, schema, 100),
        issued_at=NOW,
    )
    return replace(req, requester_signature=SP.sign(req.signing_bytes()))


@pytest.fixture
def vault():
    v = PersonalDataStore("did:pds:bowner", seed=b"\x32" * 32)
    v.add_source("posts", "post.v1", "t", ComputationPolicy(frozenset({"count"}), 100, 10))
    v.ingest("posts", [{"title": f"Acme {i}", "body": "good", "liked": i % 2 == 0} for i in range(7)], NOW)
    v.add_source("titles", "labeled_title.v1", "t", ComputationPolicy(frozenset({"train"}), 100, 10))
    v.ingest("titles", [{"title": "great", "engaged": True}, {"title": "dull", "engaged": False}], NOW)
    return v


@pytest.fixture
def enclave():
    e = EnclaveInstance(seed=b"\x33" * 32)
    e.load_bundle(make_bundle("count", "stat.v1", SP.did, kind="count"))
    e.load_bundle(make_bundle("ner", "ner.v1", SP.did, entities=["acme"]))
    e.load_bundle(make_bundle("train", "train.logreg.v1", SP.did))
    return e


def run(enclave, vault, req):
    records = vault.store.query(req.selector)
    return enclave.execute(req, records, vault.source_key)


def test_measurement_is_hash_of_bundle_and_version():
    b = make_bundle("count", "stat.v1", SP.did, kind="count")
    expected = hashlib.sha256(encode(b) + encode(ENCLAVE_VERSION)).digest()
    assert measure(b) == expected
    assert measure(b, "other/2") != expected
    assert EnclaveInstance(seed=b"\x00" * 32).load_bundle(b) == expected


def test_execute_and_verify(enclave, vault):
    req = make_request()
    result, att = run(enclave, vault, req)
    assert result.output() == {"kind": "count", "value": 7}
    assert result.record_count == 7
    m = enclave.loaded()["count"]
    assert vrf(enclave.public_key, m, req, result, att)


def test_ner_inside_enclave(enclave, vault):
    result, _ = run(enclave, vault, make_request("ner"))
    assert result.output() == {"counts": {"acme": 7}}


def test_wrong_key_or_measurement_fails(enclave, vault):
    req = make_request()
    result, att = run(enclave, vault, req)
    other = EnclaveInstance(seed=b"\x34" * 32)
    assert not vrf(other.public_key, enclave.loaded()["count"], req, result, att)
    assert not vrf(enclave.public_key, enclave.loaded()["ner"], req, result, att)


def test_attestation_binds_request_result_and_measurement(enclave, vault):
    req = make_request()
    result, att = run(enclave, vault, req)
    m = enclave.loaded()["count"]
    rng = random.Random(11)
    seen = set()
    for _ in range(300):
        (r2, res2, att2), where = mutate_attested(rng, req, result, att)
        assert not vrf(enclave.public_key, m, r2, res2, att2), where
        seen.add(where)
    assert len(seen) >= 12


def test_vrf_is_total_on_junk(enclave, vault):
    req = make_request()
    result, att = run(enclave, vault, req)
    assert not vrf(enclave.public_key, b"", req, result, None)
    assert not vrf(b"", b"", req, result, att)
    assert not vrf(enclave.public_key, att.measurement, req, "result", att)


def test_resigning_with_a_foreign_key_fails(enclave, vault):
    req = make_request()
    result, att = run(enclave, vault, req)
    forged = replace(att, result_hash=b"\x00" * 32)
    forged = replace(forged, enclave_signature=SP.sign(forged.signing_bytes()))
    assert not vrf(enclave.public_key, att.measurement, req, result, forged)


def test_nonces_are_unique(enclave, vault):
    req = make_request()
    nonces = {run(enclave, vault, req)[1].nonce for _ in range(20)}
    assert len(nonces) == 20


def test_tampered_input_record_is_refused(enclave, vault):
    req = make_request()
    records = vault.store.query(req.selector)
    records[0] = replace(records[0], payload=encode({"title": "x", "body": "y", "liked": True}))
    with pytest.raises(InputSignatureInvalid):
        enclave.execute(req, records, vault.source_key)


def test_function_not_loaded(enclave, vault):
    with pytest.raises(FunctionNotLoaded):
        run(enclave, vault, make_request("missing"))


def test_duplicate_function_id(enclave):
    with pytest.raises(DuplicateFunction):
        enclave.load_bundle(make_bundle("count", "stat.v1", SP.did, kind="sum"))


def test_unknown_family():
    with pytest.raises(UnknownFunctionFamily):
        make_bundle("x", "shell.v1", SP.did)
    with pytest.raises(UnknownFunctionFamily):
        EnclaveInstance(seed=b"\x00" * 32).load_bundle(FunctionBundle("x", b"\xff", "o", SP.did))


def test_enclave_refuses_serialization(enclave):
    with pytest.raises(TypeError):
        pickle.dumps(enclave)


def test_operation_must_match_family(enclave, vault):
    with pytest.raises(EvaluationError) as err:
        run(enclave, vault, make_request("count", op=OperationKind.TRAIN))
    assert err.value.kind == "OperationMismatch"


def test_train_with_zero_epochs_returns_input_model(enclave, vault):
    model = ModelParams.init(16, 0, seed=4)
    params = {"round": 3, "model": model.to_wire(), "hyper": TrainHyper(epochs=0).to_wire()}
    req = make_request("train", OperationKind.TRAIN, params, "titles", "labeled_title.v1")
    result, att = run(enclave, vault, req)
    out = result.output()
    assert out["round"] == 3 and out["n_samples"] == 2
    assert ModelParams.from_wire(out["model"]).identical(model)
    assert vrf(enclave.public_key, enclave.loaded()["train"], req, result, att)


def test_train_rejects_bad_params(enclave, vault):
    req = make_request("train", OperationKind.TRAIN, {"model": 1}, "titles", "labeled_title.v1")
    with pytest.raises(EvaluationError) as err:
        run(enclave, vault, req)
    assert err.value.kind == "BadParams"


def test_seeded_enclave_keys_are_reproducible():
    assert EnclaveInstance(seed=b"\x01" * 32).public_key == EnclaveInstance(seed=b"\x01" * 32).public_key
    with pytest.raises(ValueError):
        EnclaveInstance(seed=b"\x01")


def test_attestation_signing_bytes_exclude_signature():
    a = Attestation(b"m" * 32, b"q" * 32, b"r" * 32, b"n" * 16)
    assert a.signing_bytes() == replace(a, enclave_signature=b"s").signing_bytes()
