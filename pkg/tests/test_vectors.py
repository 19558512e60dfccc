import hashlib
import random
import sys
from pathlib import Path

import pytest

from oracles import mutate_attested
from pdeco.agents import ComputeReply
from pdeco.core import ComputationRequest, decode, decode_as, encode
from pdeco.enclave import vrf
from pdeco.federated import ModelUpdate, aggregate

VECTORS = Path(__file__).resolve().parent / "vectors"
sys.path.insert(0, str(VECTORS))
import generate  # noqa: E402


def frozen(name: str, sub: str = "") -> bytes:
    return bytes.fromhex((VECTORS / sub / f"{name}.hex").read_text().strip())


BUILT = generate.build_vectors()
BUILT_ATT = generate.build_attestation_vectors()


def test_every_vector_file_is_covered():
    assert {p.stem for p in VECTORS.glob("*.hex")} == set(BUILT)
    assert {p.stem for p in (VECTORS / "attestations").glob("*.hex")} == set(BUILT_ATT)


@pytest.mark.parametrize("name", sorted(BUILT))
def test_encoding_matches_frozen_vector(name):
    assert BUILT[name] == frozen(name)


@pytest.mark.parametrize("name", sorted(BUILT_ATT))
def test_attestation_vector_matches(name):
    assert BUILT_ATT[name] == frozen(name, "attestations")


@pytest.mark.parametrize(
    "name", ["selector", "request", "access_policy", "data_record", "bundle", "compute_result",
             "attestation", "deny_message", "audit_entry", "hello_frame", "frame", "model_params"],
)
def test_frozen_vectors_decode_and_reencode(name):
    data = frozen(name)
    assert encode(decode(data)) == data


def test_hand_checked_vectors():
    # Record 0x0070 with two fields: enum 0x0004 value 1, then bytes 00 01.
    assert frozen("frame").hex() == "0b0070" "0002" "0a000401" "0500000002" "0001"
    # Record 0x0071: 16-byte request id 00..0f, then enum 0x0002 value 3.
    assert frozen("deny_message").hex() == "0b0071" "0002" "0500000010" + bytes(range(16)).hex() + "0a000203"
    bundle = frozen("bundle")
    assert frozen("measurement") == hashlib.sha256(bundle + encode("pdeco-sim-enclave/1")).digest()


def test_frozen_compute_reply_verifies():
    key = frozen("enclave_public_key", "attestations")
    m = frozen("compute_measurement", "attestations")
    req = decode_as(frozen("compute_request", "attestations"), ComputationRequest)
    reply = decode_as(frozen("compute_reply", "attestations"), ComputeReply)
    assert vrf(key, m, req, reply.result, reply.attestation)
    assert reply.result.output() == {"kind": "count", "value": 3}
    rng = random.Random(1)
    for _ in range(200):
        (r2, res2, att2), where = mutate_attested(rng, req, reply.result, reply.attestation)
        assert not vrf(key, m, r2, res2, att2), where


def test_frozen_model_update_aggregates():
    key = frozen("enclave_public_key", "attestations")
    m = frozen("train_measurement", "attestations")
    req = decode_as(frozen("train_request", "attestations"), ComputationRequest)
    upd = decode_as(frozen("model_update", "attestations"), ModelUpdate)
    out = aggregate([upd], m, {upd.agent_did: req}, {upd.agent_did: key}, 1)
    assert out.rejected_count == 0
    assert out.params.layout == (4, 0)
    assert decode(upd.result.payload)["n_samples"] == 1
