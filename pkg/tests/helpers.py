"""Shared fixtures-as-functions for the test suite."""

from dataclasses import replace

import numpy as np
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from pdeco.analytics import ModelParams
from pdeco.core import ComputeResult, encode, hash_value
from pdeco.enclave import Attestation
from pdeco.federated import ModelUpdate


class FakeAttester:
    """Signs attestations over arbitrary results, standing in for a trusted enclave.

    Lets aggregation be tested on chosen weights without running training.
    """

    def __init__(self, seed: bytes):
        self._key = Ed25519PrivateKey.from_private_bytes(seed)
        self.public_key = self._key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self._n = 0

    def update(self, agent_did, request, round_no, weights, n_samples, measurement, loss=0.5, layout=None):
        weights = np.asarray(weights, dtype=np.float64)
        d, h = layout if layout is not None else (weights.size - 1, 0)
        model = ModelParams(d, h, weights)
        payload = encode({"round": round_no, "model": model.to_wire(), "n_samples": n_samples, "loss": loss})
        result = ComputeResult(request.request_id, payload, n_samples)
        self._n += 1
        att = Attestation(measurement, hash_value(request), hash_value(result), self._n.to_bytes(16, "big"))
        att = replace(att, enclave_signature=self._key.sign(att.signing_bytes()))
        return ModelUpdate(round_no, agent_did, result, att)


NOW = 1_700_000_000_000


class Clock:
    def __init__(self, t: int = NOW):
        self.t = t

    def __call__(self) -> int:
        return self.t


class World:
    """One user agent with a post source and one provider, already handshaken."""

    def __init__(self, posts=None, functions=("count", "ner"), grant_ops=("Compute",), max_records=100,
                 per_day=100, seed=0, titles=None):
        from pdeco.access import ComputationPolicy, grant
        from pdeco.agents import DirectTransport, SpController, UserController, handshake
        from pdeco.core import OperationKind
        from pdeco.enclave import EnclaveInstance, make_bundle
        from pdeco.identity import generate_identity
        from pdeco.store import PersonalDataStore

        self.clock = Clock()
        base = seed * 16
        self.sp_id = generate_identity(bytes([base + 1]) * 32)
        self.user_id = generate_identity(bytes([base + 2]) * 32)
        self.bundles = [
            make_bundle("count", "stat.v1", self.sp_id.did, kind="count"),
            make_bundle("ner", "ner.v1", self.sp_id.did, entities=["acme", "globex"]),
            make_bundle("train", "train.logreg.v1", self.sp_id.did),
        ]
        self.vault = PersonalDataStore(self.user_id.did, seed=bytes([base + 3]) * 32)
        cp = ComputationPolicy(frozenset(functions), max_records, per_day)
        self.vault.add_source("posts", "post.v1", "token", cp)
        posts = posts if posts is not None else [
            {"title": f"Acme post {i}", "body": "text", "liked": i % 2 == 0} for i in range(7)
        ]
        self.vault.ingest("posts", posts, NOW - 1000)
        self.vault.add_source("titles", "labeled_title.v1", "token",
                              ComputationPolicy(frozenset({"train"}), max_records, per_day))
        titles = titles if titles is not None else [
            {"title": "great win", "engaged": True}, {"title": "dull loss", "engaged": False}
        ]
        self.vault.ingest("titles", titles, NOW - 1000)
        for op in grant_ops:
            source = "titles" if op == "Train" else "posts"
            self.vault.policy = grant(self.vault.policy, self.sp_id.did, source, OperationKind.parse(op),
                                      now=NOW - 5000)
        self.enclave = EnclaveInstance(seed=bytes([base + 4]) * 32)
        for b in self.bundles:
            self.enclave.load_bundle(b)
        self.uc = UserController(self.user_id, self.vault, self.enclave, clock=self.clock)
        self.sp = SpController(self.sp_id, self.bundles, seed=seed, clock=self.clock)
        handshake(self.sp, self.uc)
        self.transport = DirectTransport()
        self.transport.add(self.uc)
