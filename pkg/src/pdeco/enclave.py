"""Simulated attesting enclave and the service-provider side verifier.

A service provider ships a :class:`FunctionBundle`; the enclave measures it
(hash of the bundle's canonical encoding plus the enclave version tag) and
seals it. ``execute`` re-verifies every input record's source signature,
evaluates the function deterministically and signs an :class:`Attestation`
binding the measurement, the request hash and the result hash.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, replace
from typing import Any, Callable, Mapping, Optional, Sequence

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import analytics
from .analytics import EvaluationError, ModelParams, TrainHyper
from .core import (
    ComputationRequest,
    ComputeResult,
    DecodeError,
    OperationKind,
    PdecoError,
    canonical,
    content_hash,
    decode,
    encode,
    hash_value,
)
from .identity import verify_signature
from .store import DataRecord, SchemaError, TEXT_FIELDS, decode_payload, record_text

ENCLAVE_VERSION = "pdeco-sim-enclave/1"

FAMILIES = ("ner.v1", "sentiment.v1", "stat.v1", "linreg.v1", "train.logreg.v1")
TRAIN_FAMILIES = ("train.logreg.v1",)


class UnknownFunctionFamily(PdecoError):
    pass


class DuplicateFunction(PdecoError):
    pass


class FunctionNotLoaded(PdecoError):
    pass


class InputSignatureInvalid(PdecoError):
    pass


@canonical(0x0050)
@dataclass(frozen=True)
class FunctionBundle:
    function_id: str
    code_spec: bytes
    output_schema: str
    provided_by: str

    def spec(self) -> dict[str, Any]:
        try:
            doc = decode(self.code_spec)
        except DecodeError as exc:
            raise UnknownFunctionFamily(f"undecodable code_spec: {exc}") from None
        if not isinstance(doc, dict) or doc.get("family") not in FAMILIES:
            raise UnknownFunctionFamily(f"{self.function_id}: unknown family")
        return doc

    @property
    def family(self) -> str:
        return self.spec()["family"]


def make_bundle(function_id: str, family: str, provided_by: str, **params: Any) -> FunctionBundle:
    """Build a bundle whose ``code_spec`` is ``{"family": ..., **params}``."""
    if family not in FAMILIES:
        raise UnknownFunctionFamily(family)
    code = encode({"family": family, **params})
    return FunctionBundle(function_id, code, output_schema=f"{family}.out", provided_by=provided_by)


def measure(bundle: FunctionBundle, version: str = ENCLAVE_VERSION) -> bytes:
    """Measurement an SP expects for ``bundle`` on an enclave of ``version``."""
    return content_hash(encode(bundle) + encode(version))


ATTESTATION_DOMAIN = b"pdeco/attestation/v1\x00"


@canonical(0x0051)
@dataclass(frozen=True)
class Attestation:
    measurement: bytes
    request_hash: bytes
    result_hash: bytes
    nonce: bytes
    enclave_signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return ATTESTATION_DOMAIN + encode(replace(self, enclave_signature=b""))


@dataclass(frozen=True)
class OverheadModel:
    """Extra wall-clock cost of running inside an isolated environment."""

    setup_ms: float = 0.0
    per_record_us: float = 0.0

    def apply(self, n_records: int) -> None:
        delay = self.setup_ms / 1000.0 + self.per_record_us * n_records / 1e6
        if delay > 0:
            time.sleep(delay)


class EnclaveInstance:
    """An in-process stand-in for a TEE with its own attestation key.

    The private key never leaves the instance; loaded bundles are held by
    measurement and their ``code_spec`` is not exposed through any method.
    """

    def __init__(
        self,
        seed: Optional[bytes] = None,
        version: str = ENCLAVE_VERSION,
        overhead: Optional[OverheadModel] = None,
    ):
        seed = seed if seed is not None else os.urandom(32)
        if len(seed) != 32:
            raise ValueError("enclave seed must be 32 bytes")
        self._key = Ed25519PrivateKey.from_private_bytes(content_hash(b"pdeco/enclave-key\x00" + seed))
        self._nonce_seed = content_hash(b"pdeco/enclave-nonce\x00" + seed)
        self._nonce_counter = 0
        self._nonce_lock = threading.Lock()
        self.version = version
        self.overhead = overhead or OverheadModel()
        self.public_key = self._key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self._bundles: dict[str, tuple[FunctionBundle, bytes, dict[str, Any]]] = {}

    def __getstate__(self):
        raise TypeError("enclave instances cannot be serialized")

    def load_bundle(self, bundle: FunctionBundle) -> bytes:
        spec = bundle.spec()
        if bundle.function_id in self._bundles:
            raise DuplicateFunction(bundle.function_id)
        m = measure(bundle, self.version)
        self._bundles[bundle.function_id] = (bundle, m, spec)
        return m

    def loaded(self) -> dict[str, bytes]:
        """function_id -> measurement; the only view of loaded bundles."""
        return {fid: m for fid, (_, m, _) in self._bundles.items()}

    def family_of(self, function_id: str) -> Optional[str]:
        entry = self._bundles.get(function_id)
        return entry[2]["family"] if entry else None

    def _next_nonce(self) -> bytes:
        with self._nonce_lock:
            self._nonce_counter += 1
            n = self._nonce_counter
        return content_hash(self._nonce_seed + n.to_bytes(8, "big"))[:16]

    def execute(
        self,
        re: ComputationRequest,
        records: Sequence[DataRecord],
        source_keys: Callable[[str], Optional[bytes]],
    ) -> tuple[ComputeResult, Attestation]:
        entry = self._bundles.get(re.function_id)
        if entry is None:
            raise FunctionNotLoaded(re.function_id)
        _, measurement, spec = entry
        for rec in records:
            if not rec.verify(source_keys(rec.source_id)):
                raise InputSignatureInvalid(f"record {rec.record_id} from {rec.source_id}")
        self.overhead.apply(len(records))
        try:
            payloads = [decode_payload(r.schema_tag, r.payload) for r in records]
        except SchemaError as exc:
            raise EvaluationError("BadRecord", str(exc)) from None
        output = evaluate(spec, re, records, payloads)
        result = ComputeResult(re.request_id, encode(output), len(records))
        att = Attestation(measurement, hash_value(re), hash_value(result), self._next_nonce())
        return result, replace(att, enclave_signature=self._key.sign(att.signing_bytes()))


def evaluate(
    spec: Mapping[str, Any],
    re: ComputationRequest,
    records: Sequence[DataRecord],
    payloads: Sequence[Mapping[str, Any]],
) -> dict[str, Any]:
    """Dispatch a request to its function family; returns the output document."""
    family = spec["family"]
    is_train = family in TRAIN_FAMILIES
    if is_train != (re.operation is OperationKind.TRAIN):
        raise EvaluationError("OperationMismatch", f"{family} cannot serve {re.operation.label}")
    try:
        params = re.params()
    except DecodeError as exc:
        raise EvaluationError("BadParams", str(exc)) from None
    if not isinstance(params, dict):
        raise EvaluationError("BadParams", "function_params must decode to a map")

    def texts() -> list[str]:
        out = []
        for rec, p in zip(records, payloads):
            if rec.schema_tag not in TEXT_FIELDS:
                raise EvaluationError("BadRecord", f"{rec.schema_tag} has no text")
            out.append(record_text(rec.schema_tag, p))
        return out

    try:
        if family == "ner.v1":
            dictionary = analytics.EntityDictionary(spec["entities"])
            return {"counts": analytics.ner_count(texts(), dictionary)}
        if family == "sentiment.v1":
            lexicon = analytics.SentimentLexicon(spec["lexicon"])
            return analytics.sentiment_avg(texts(), lexicon)
        if family == "stat.v1":
            kind = spec.get("kind") or params.get("kind")
            field = spec.get("field") or params.get("field")
            return {"kind": kind, "value": analytics.stat(payloads, kind, field)}
        if family == "linreg.v1":
            return analytics.linreg_fit(payloads, spec["x_field"], spec["y_field"])
        if family == "train.logreg.v1":
            model_in = ModelParams.from_wire(params["model"])
            hyper = TrainHyper.from_wire(params["hyper"])
            if records and any(r.schema_tag != "labeled_title.v1" for r in records):
                raise EvaluationError("BadRecord", "training needs labeled_title.v1 records")
            out = analytics.local_train(payloads, model_in, hyper, spec.get("feature_dim"))
            return {
                "round": int(params.get("round", 0)),
                "model": out["model_out"].to_wire(),
                "n_samples": out["n_samples"],
                "loss": out["loss_final"],
            }
    except EvaluationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise EvaluationError("BadParams", f"{family}: {exc}") from None
    raise UnknownFunctionFamily(family)


def vrf(
    verifier_key: bytes,
    measurement_expected: bytes,
    re: ComputationRequest,
    result: ComputeResult,
    att: Attestation,
) -> bool:
    """Accept ``(result, att)`` only if it is the enclave's answer to ``re``."""
    try:
        if not isinstance(att, Attestation) or not isinstance(result, ComputeResult):
            return False
        if not verify_signature(verifier_key, att.enclave_signature, att.signing_bytes()):
            return False
        return (
            att.measurement == measurement_expected
            and att.request_hash == hash_value(re)
            and att.result_hash == hash_value(result)
            and result.request_id == re.request_id
        )
    except (TypeError, ValueError):
        return False
