"""Model aggregator: distributes training rounds and FedAvg-aggregates attested updates.

An update only counts if its attestation verifies against the expected
bundle measurement and binds the exact request the aggregator sent for that
round and agent. Survivors are combined with a sample-count weighted mean.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .access import now_ms
from .analytics import ModelParams, TrainHyper
from .core import (
    ComputationRequest,
    ComputeResult,
    DataSelector,
    DecodeError,
    OperationKind,
    PdecoError,
    canonical,
    decode,
    encode,
    hash_value,
)
from .enclave import Attestation, vrf
from .identity import AgentIdentity

logger = logging.getLogger(__name__)

UPDATE_FIELDS = frozenset({"round", "model", "n_samples", "loss"})


class NoValidUpdates(PdecoError):
    pass


class InsufficientParticipants(NoValidUpdates):
    pass


@canonical(0x0060)
@dataclass(frozen=True)
class ModelUpdate:
    round: int
    agent_did: str
    result: ComputeResult
    attestation: Attestation


@dataclass(frozen=True)
class RoundConfig:
    eligible_agents: tuple[str, ...]
    function_id: str
    expected_measurement: bytes
    source_id: str
    rounds_total: int = 1
    min_participants: int = 1
    hyper: TrainHyper = field(default_factory=TrainHyper)
    schema_tag: str = "labeled_title.v1"
    max_records: int = 10_000
    timeout_ms: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "eligible_agents", tuple(self.eligible_agents))
        if self.min_participants < 1:
            raise ValueError("min_participants must be >= 1")
        if self.min_participants > len(self.eligible_agents):
            raise ValueError("min_participants exceeds the number of eligible agents")
        if self.rounds_total < 0:
            raise ValueError("rounds_total must be >= 0")


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    participants: int
    rejected: int
    mean_loss: float
    rejections: dict[str, int] = field(default_factory=dict)

    def to_record(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class GlobalModel:
    params: ModelParams
    round: int = 0
    history: tuple[RoundMetrics, ...] = ()


@dataclass
class AggregationResult:
    params: ModelParams
    accepted: list[ModelUpdate]
    rejected: list[tuple[ModelUpdate, str]]
    mean_loss: float

    @property
    def rejected_count(self) -> int:
        return len(self.rejected)


def decode_update_payload(result: ComputeResult) -> dict[str, Any]:
    doc = decode(result.payload)
    if not isinstance(doc, dict) or set(doc) != UPDATE_FIELDS:
        raise ValueError("update payload must carry exactly round, model, n_samples, loss")
    return doc


def check_update(
    update: Any,
    expected_measurement: bytes,
    requests: Mapping[bytes, tuple[str, ComputationRequest]],
    attestation_keys: Mapping[str, bytes],
    round_no: int,
    layout: Optional[tuple[int, int]] = None,
) -> tuple[Optional[str], Optional[dict[str, Any]]]:
    """Return ``(reason, None)`` for a bad update or ``(None, payload)`` for a good one."""
    if not isinstance(update, ModelUpdate):
        return "malformed", None
    if update.round != round_no:
        return "round_mismatch", None
    target = requests.get(update.result.request_id)
    if target is None:
        return "unknown_request", None
    agent_did, request = target
    if update.agent_did != agent_did:
        return "wrong_agent", None
    key = attestation_keys.get(agent_did)
    if key is None:
        return "unknown_agent", None
    if not vrf(key, expected_measurement, request, update.result, update.attestation):
        return "attestation_invalid", None
    try:
        doc = decode_update_payload(update.result)
        model = ModelParams.from_wire(doc["model"])
        n = doc["n_samples"]
    except (DecodeError, ValueError, TypeError) as exc:
        logger.debug("malformed update payload: %s", exc)
        return "malformed_payload", None
    if doc["round"] != round_no:
        return "round_mismatch", None
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        return "no_samples", None
    if layout is not None and model.layout != tuple(layout):
        return "layout_mismatch", None
    return None, {"model": model, "n_samples": n, "loss": float(doc["loss"])}


def weighted_mean(weights: Sequence[np.ndarray], counts: Sequence[int]) -> np.ndarray:
    """FedAvg: sum_i n_i * w_i / sum_i n_i, clamped to the per-coordinate input range.

    The clamp only removes floating-point rounding; the exact weighted mean
    always lies inside ``[min_i w_i, max_i w_i]``.
    """
    W = np.stack([np.asarray(w, dtype=np.float64) for w in weights])
    n = np.asarray(counts, dtype=np.float64)
    mean = (n[:, None] * W).sum(axis=0) / n.sum()
    return np.clip(mean, W.min(axis=0), W.max(axis=0))


def aggregate(
    updates: Iterable[ModelUpdate],
    expected_measurement: bytes,
    requests: Mapping[str, ComputationRequest],
    attestation_keys: Mapping[str, bytes],
    round_no: int,
    min_participants: int = 1,
    layout: Optional[tuple[int, int]] = None,
) -> AggregationResult:
    """Verify every update and FedAvg the survivors.

    ``requests`` maps agent DID to the request sent to it this round. Updates
    are processed in a canonical order, so the result does not depend on
    arrival order; at most one update per request is accepted.
    """
    by_id = {req.request_id: (did, req) for did, req in requests.items()}
    ordered = sorted(updates, key=_update_sort_key)
    accepted: list[ModelUpdate] = []
    rejected: list[tuple[ModelUpdate, str]] = []
    payloads: list[dict[str, Any]] = []
    used: set[bytes] = set()
    for upd in ordered:
        reason, payload = check_update(upd, expected_measurement, by_id, attestation_keys, round_no, layout)
        if reason is None and upd.result.request_id in used:
            reason = "duplicate"
        if reason is not None:
            rejected.append((upd, reason))
            continue
        used.add(upd.result.request_id)
        accepted.append(upd)
        payloads.append(payload)
    if len(accepted) < max(1, min_participants):
        raise NoValidUpdates(
            f"round {round_no}: {len(accepted)} valid updates, need {min_participants}"
        )
    first = payloads[0]["model"]
    if any(p["model"].layout != first.layout for p in payloads):
        raise NoValidUpdates("accepted updates disagree on model layout")
    counts = [p["n_samples"] for p in payloads]
    mean = weighted_mean([p["model"].weights for p in payloads], counts)
    mean_loss = float(np.dot(counts, [p["loss"] for p in payloads]) / sum(counts))
    return AggregationResult(
        ModelParams(first.feature_dim, first.hidden_dim, mean), accepted, rejected, mean_loss
    )


def _update_sort_key(upd: Any) -> tuple:
    try:
        return (0, upd.agent_did, hash_value(upd))
    except (AttributeError, TypeError, ValueError):
        return (1, "", b"")


class Transport(Protocol):
    def collect(
        self, requests: Mapping[str, ComputationRequest], timeout_ms: int
    ) -> list[ModelUpdate]:
        """Deliver each request to its agent and return the updates received in time."""


class ModelAggregator:
    """The service provider's model aggregator.

    ``attestation_keys`` is read at aggregation time, so it can be a live
    mapping filled in as agents' DID documents arrive.
    """

    def __init__(
        self,
        identity: AgentIdentity,
        attestation_keys: Mapping[str, bytes],
        seed: Optional[int] = None,
        clock: Optional[Callable[[], int]] = None,
    ):
        self.identity = identity
        self.attestation_keys = attestation_keys
        self._rng = random.Random(seed)
        self._clock = clock or now_ms

    def new_request_id(self) -> bytes:
        return self._rng.randbytes(16)

    def distribute(self, config: RoundConfig, current: GlobalModel) -> dict[str, ComputationRequest]:
        params = encode({
            "round": current.round + 1,
            "model": current.params.to_wire(),
            "hyper": config.hyper.to_wire(),
        })
        selector = DataSelector(config.source_id, config.schema_tag, config.max_records)
        issued_at = self._clock()
        out = {}
        for did in config.eligible_agents:
            req = ComputationRequest(
                request_id=self.new_request_id(),
                requester_did=self.identity.did,
                operation=OperationKind.TRAIN,
                function_id=config.function_id,
                function_params=params,
                selector=selector,
                issued_at=issued_at,
            )
            out[did] = replace(req, requester_signature=self.identity.sign(req.signing_bytes()))
        return out

    def aggregate(
        self,
        updates: Iterable[ModelUpdate],
        config: RoundConfig,
        requests: Mapping[str, ComputationRequest],
        round_no: int,
        layout: Optional[tuple[int, int]] = None,
    ) -> AggregationResult:
        return aggregate(
            updates, config.expected_measurement, requests, self.attestation_keys,
            round_no, config.min_participants, layout,
        )


def run_rounds(
    aggregator: ModelAggregator,
    config: RoundConfig,
    transport: Transport,
    initial: GlobalModel,
    emit: Optional[Callable[[RoundMetrics, AggregationResult], None]] = None,
) -> GlobalModel:
    """distribute -> collect -> aggregate, ``config.rounds_total`` times.

    ``emit`` sees each round's metrics and the full aggregation result.
    """
    current = initial
    for _ in range(config.rounds_total):
        round_no = current.round + 1
        requests = aggregator.distribute(config, current)
        updates = transport.collect(requests, config.timeout_ms)
        try:
            agg = aggregator.aggregate(updates, config, requests, round_no, current.params.layout)
        except NoValidUpdates as exc:
            raise InsufficientParticipants(str(exc)) from exc
        reasons: dict[str, int] = {}
        for _, why in agg.rejected:
            reasons[why] = reasons.get(why, 0) + 1
        metrics = RoundMetrics(round_no, len(agg.accepted), agg.rejected_count, agg.mean_loss, reasons)
        logger.info("round %d: %d accepted, %d rejected", round_no, len(agg.accepted), agg.rejected_count)
        current = GlobalModel(agg.params, round_no, current.history + (metrics,))
        if emit is not None:
            emit(metrics, agg)
    return current
