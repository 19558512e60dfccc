"""Independent reference implementations used as test oracles.

These are written directly from the rule definitions using plain tuples and
dicts, without importing the evaluation code under test.
"""

import math
import random
from dataclasses import replace

from pdeco.access import AccessPolicy, ComputationPolicy, Grant
from pdeco.core import ComputationRequest, DataSelector, OperationKind, encode

DAY_MS = 86_400_000
SOURCES = ("posts", "titles", "mail")
FUNCTIONS = ("f1", "f2", "f3")
OPS = (OperationKind.COMPUTE, OperationKind.TRAIN, OperationKind.SHARE)


def brute_force_allow(grants, policies, history, req, now, signature_ok):
    """Reference decision as a label string.

    grants: list of (sp, source, op_label, granted_at, expires_at_or_None)
    policies: {source: (functions_set, max_records, max_per_day)}
    history: {(sp, source, day): count}
    req: dict with sp, source, op, function, max_records
    """
    if not signature_ok:
        return "Deny(BadSignature)"
    match = [g for g in grants if (g[0], g[1], g[2]) == (req["sp"], req["source"], req["op"])]
    if not match:
        return "Deny(NoGrant)"
    expires = match[0][4]
    if expires is not None and now >= expires:
        return "Deny(Expired)"
    if req["source"] not in policies:
        return "Deny(PolicyViolation)"
    functions, max_records, per_day = policies[req["source"]]
    if req["op"] == "Share":
        return "Deny(PolicyViolation)"
    if req["function"] not in functions:
        return "Deny(PolicyViolation)"
    if req["max_records"] is None or req["max_records"] > max_records:
        return "Deny(PolicyViolation)"
    if history.get((req["sp"], req["source"], now // DAY_MS), 0) >= per_day:
        return "Deny(RateLimited)"
    return "Permit"


class AcCase:
    """One randomly drawn access-control scenario in both representations."""

    def __init__(self, rng: random.Random, sps, owner_did: str, empty: bool = False):
        self.now = 1_700_000_000_000 + rng.randrange(0, 3 * DAY_MS)
        self.grants = []
        if not empty:
            for sp in sps:
                for source in SOURCES:
                    for op in OPS[:2]:
                        if rng.random() < 0.5:
                            granted = self.now - rng.randrange(1, DAY_MS)
                            expires = None
                            if rng.random() < 0.5:
                                expires = self.now + rng.randrange(-DAY_MS, DAY_MS)
                                if expires <= granted:
                                    expires = granted + 1
                            self.grants.append((sp.did, source, op.label, granted, expires))
        self.policies = {}
        if not empty:
            for source in SOURCES:
                if rng.random() < 0.8:
                    fns = {f for f in FUNCTIONS if rng.random() < 0.5} or {FUNCTIONS[0]}
                    self.policies[source] = (fns, rng.randint(1, 50), rng.randint(1, 5))
        self.history = {}
        for sp in sps:
            for source in SOURCES:
                if rng.random() < 0.5:
                    self.history[(sp.did, source, self.now // DAY_MS)] = rng.randint(0, 6)
        requester = rng.choice(sps)
        self.req = {
            "sp": requester.did,
            "source": rng.choice(SOURCES),
            "op": rng.choice(OPS).label,
            "function": rng.choice(FUNCTIONS),
            "max_records": rng.choice([None, rng.randint(1, 60)]),
        }
        request = ComputationRequest(
            request_id=rng.randbytes(16),
            requester_did=requester.did,
            operation=OperationKind.parse(self.req["op"]),
            function_id=self.req["function"],
            function_params=encode({}),
            selector=DataSelector(self.req["source"], "post.v1", self.req["max_records"]),
            issued_at=self.now,
        )
        signer = requester
        self.signature_ok = True
        if rng.random() < 0.1:
            signer = next(s for s in sps if s is not requester)
            self.signature_ok = False
        self.request = replace(request, requester_signature=signer.sign(request.signing_bytes()))
        self.requester_key = requester.signing_public_key
        self.policy = AccessPolicy(
            owner_did=owner_did,
            grants=tuple(
                Grant(sp, src, OperationKind.parse(op), granted_at=ga, expires_at=ex)
                for sp, src, op, ga, ex in self.grants
            ),
            policies={
                src: ComputationPolicy(frozenset(fns), mr, pd) for src, (fns, mr, pd) in self.policies.items()
            },
        )

    def expected(self) -> str:
        return brute_force_allow(self.grants, self.policies, self.history, self.req, self.now, self.signature_ok)


def fedavg_reference(updates):
    """Weighted mean over (weights_list, n) pairs with exact float summation per coordinate."""
    total = sum(n for _, n in updates)
    dim = len(updates[0][0])
    return [math.fsum(w[i] * n for w, n in updates) / total for i in range(dim)]


def _flip(rng: random.Random, value):
    if isinstance(value, bool):
        return not value
    if isinstance(value, int):
        return value ^ (1 << rng.randrange(0, 40))
    if isinstance(value, bytes):
        if not value:
            return b"\x00"
        i = rng.randrange(len(value))
        return value[:i] + bytes([value[i] ^ (1 << rng.randrange(8))]) + value[i + 1:]
    if isinstance(value, str):
        i = rng.randrange(len(value) + 1)
        return value[:i] + "x" + value[i:]
    raise TypeError(type(value))


MUTABLE_FIELDS = {
    "request": ("request_id", "requester_did", "function_id", "function_params", "issued_at", "requester_signature"),
    "result": ("request_id", "payload", "record_count"),
    "attestation": ("measurement", "request_hash", "result_hash", "nonce", "enclave_signature"),
}


def mutate_attested(rng: random.Random, request, result, attestation):
    """Flip one field of one of the three objects; returns (triple, description)."""
    target = rng.choice(sorted(MUTABLE_FIELDS))
    name = rng.choice(MUTABLE_FIELDS[target])
    objs = {"request": request, "result": result, "attestation": attestation}
    obj = objs[target]
    while True:
        new = _flip(rng, getattr(obj, name))
        try:
            objs[target] = replace(obj, **{name: new})
            break
        except ValueError:
            continue
    return (objs["request"], objs["result"], objs["attestation"]), f"{target}.{name}"
