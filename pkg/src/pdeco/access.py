"""User-defined access control: grants, computation policies and ``allow``.

A request is permitted only when the requester's signature checks out, an
unexpired grant exists for ``(service provider, data source, operation)``
and the source's computation policy accepts it. Everything else is denied,
and a denial is returned as a value carrying a machine-readable reason.

Policies are immutable; ``grant`` and ``revoke`` return a new revision.
"""

from __future__ import annotations

import enum
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Union

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import ComputationRequest, OperationKind, PdecoError, canonical, canonical_enum
from .identity import derive_did, verify_signature

DAY_MS = 86_400_000


class NoSuchGrant(PdecoError):
    pass


class PolicyFileError(PdecoError):
    pass


@canonical_enum(0x0002)
class DenyReason(enum.Enum):
    NO_GRANT = 0
    POLICY_VIOLATION = 1
    BAD_SIGNATURE = 2
    RATE_LIMITED = 3
    EXPIRED = 4
    REPLAY = 5
    STALE = 6
    EXECUTION_FAILED = 7

    @property
    def label(self) -> str:
        return "".join(part.capitalize() for part in self.name.split("_"))


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@canonical(0x0030)
@dataclass(frozen=True)
class Grant:
    sp_did: str
    source_id: str
    operation: OperationKind
    granted_at: int
    expires_at: Optional[int] = None

    def __post_init__(self):
        if self.operation is OperationKind.SHARE:
            raise ValueError("Share is not a grantable operation")
        if self.expires_at is not None and self.expires_at <= self.granted_at:
            raise ValueError("expires_at must be after granted_at")

    @property
    def key(self) -> tuple[str, str, OperationKind]:
        return (self.sp_did, self.source_id, self.operation)

    def active(self, now: int) -> bool:
        return self.expires_at is None or now < self.expires_at


@canonical(0x0031)
@dataclass(frozen=True)
class ComputationPolicy:
    allowed_function_ids: frozenset[str]
    max_records: int
    max_requests_per_day: int
    require_enclave: bool = True

    def __post_init__(self):
        object.__setattr__(self, "allowed_function_ids", frozenset(self.allowed_function_ids))
        if not self.allowed_function_ids:
            raise ValueError("a computation policy must allow at least one function")
        if self.max_records < 1 or self.max_requests_per_day < 1:
            raise ValueError("numeric limits must be >= 1")
        if self.require_enclave is not True:
            raise ValueError("require_enclave must be true")


@canonical(0x0032)
@dataclass(frozen=True)
class AccessPolicy:
    owner_did: str
    grants: tuple[Grant, ...] = ()
    policies: Mapping[str, ComputationPolicy] = field(default_factory=dict)
    revision: int = 0

    def __post_init__(self):
        grants = tuple(sorted(self.grants, key=_grant_sort_key))
        keys = [g.key for g in grants]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (sp, source, operation) grant")
        object.__setattr__(self, "grants", grants)
        object.__setattr__(self, "policies", dict(self.policies))

    def find(self, sp_did: str, source_id: str, op: OperationKind) -> Optional[Grant]:
        for g in self.grants:
            if g.key == (sp_did, source_id, op):
                return g
        return None

    def with_policy(self, source_id: str, cp: ComputationPolicy) -> "AccessPolicy":
        policies = dict(self.policies)
        policies[source_id] = cp
        return replace(self, policies=policies, revision=self.revision + 1)


def _grant_sort_key(g: Grant):
    return (g.sp_did, g.source_id, g.operation.value)


def grant(
    policy: AccessPolicy,
    sp_did: str,
    source_id: str,
    op: OperationKind,
    expires_at: Optional[int] = None,
    now: Optional[int] = None,
) -> AccessPolicy:
    """Grant ``op`` on ``source_id`` to ``sp_did``; re-granting replaces the expiry."""
    now = now_ms() if now is None else now
    new = Grant(sp_did, source_id, op, granted_at=now, expires_at=expires_at)
    others = tuple(g for g in policy.grants if g.key != new.key)
    return replace(policy, grants=others + (new,), revision=policy.revision + 1)


def revoke(policy: AccessPolicy, sp_did: str, source_id: str, op: OperationKind) -> AccessPolicy:
    if policy.find(sp_did, source_id, op) is None:
        raise NoSuchGrant(f"no grant for ({sp_did}, {source_id}, {op.label})")
    others = tuple(g for g in policy.grants if g.key != (sp_did, source_id, op))
    return replace(policy, grants=others, revision=policy.revision + 1)


def perm(policy: AccessPolicy, source_id: str, sp_did: str, op: OperationKind, now: int) -> bool:
    g = policy.find(sp_did, source_id, op)
    return g is not None and g.active(now)


class RequestHistory:
    """Per-(service provider, source) request counts bucketed by UTC day."""

    def __init__(self, counts: Optional[Mapping[tuple[str, str, int], int]] = None):
        self._counts: Counter = Counter(counts or {})

    def count(self, sp_did: str, source_id: str, now: int) -> int:
        return self._counts[(sp_did, source_id, now // DAY_MS)]

    def record(self, sp_did: str, source_id: str, now: int) -> None:
        self._counts[(sp_did, source_id, now // DAY_MS)] += 1

    def snapshot(self) -> dict[tuple[str, str, int], int]:
        return dict(self._counts)


HistoryLike = Union[RequestHistory, Mapping[tuple[str, str, int], int], None]


def _history_count(history: HistoryLike, sp_did: str, source_id: str, now: int) -> int:
    if history is None:
        return 0
    if isinstance(history, RequestHistory):
        return history.count(sp_did, source_id, now)
    return history.get((sp_did, source_id, now // DAY_MS), 0)


def _policy_reason(
    re: ComputationRequest, cp: ComputationPolicy, history: HistoryLike, now: int
) -> Optional[DenyReason]:
    if re.operation is OperationKind.SHARE:
        return DenyReason.POLICY_VIOLATION
    if re.function_id not in cp.allowed_function_ids:
        return DenyReason.POLICY_VIOLATION
    wanted = re.selector.max_records
    if wanted is None or wanted > cp.max_records:
        return DenyReason.POLICY_VIOLATION
    if _history_count(history, re.requester_did, re.selector.source_id, now) >= cp.max_requests_per_day:
        return DenyReason.RATE_LIMITED
    return None


def valid_request(
    re: ComputationRequest, cp: ComputationPolicy, history: HistoryLike, now: int
) -> bool:
    """Whether ``re`` satisfies computation policy ``cp``.

    An unbounded selector never satisfies a policy, since every policy caps
    the number of records.
    """
    return _policy_reason(re, cp, history, now) is None


def authenticate(re: ComputationRequest, requester_key: Optional[bytes]) -> bool:
    """Auth component: the signature verifies under a key owning ``requester_did``."""
    if not requester_key or derive_did(requester_key) != re.requester_did:
        return False
    return verify_signature(requester_key, re.requester_signature, re.signing_bytes())


@dataclass(frozen=True)
class Decision:
    permitted: bool
    reason: Optional[DenyReason] = None

    @classmethod
    def permit(cls) -> "Decision":
        return cls(True)

    @classmethod
    def deny(cls, reason: DenyReason) -> "Decision":
        return cls(False, reason)

    @property
    def label(self) -> str:
        return "Permit" if self.permitted else f"Deny({self.reason.label})"


def allow(
    policy: AccessPolicy,
    re: ComputationRequest,
    now: int,
    history: HistoryLike = None,
    requester_key: Optional[bytes] = None,
) -> Decision:
    """Evaluate a request against the owner's access-control settings.

    Checks run in a fixed order so the deny reason is deterministic:
    signature, grant, grant expiry, computation policy, rate limit.
    """
    if not authenticate(re, requester_key):
        return Decision.deny(DenyReason.BAD_SIGNATURE)
    g = policy.find(re.requester_did, re.selector.source_id, re.operation)
    if g is None:
        return Decision.deny(DenyReason.NO_GRANT)
    if not g.active(now):
        return Decision.deny(DenyReason.EXPIRED)
    cp = policy.policies.get(re.selector.source_id)
    if cp is None:
        return Decision.deny(DenyReason.POLICY_VIOLATION)
    reason = _policy_reason(re, cp, history, now)
    if reason is not None:
        return Decision.deny(reason)
    return Decision.permit()


# -- policy file -----------------------------------------------------------


def policy_to_dict(policy: AccessPolicy) -> dict:
    doc: dict = {"owner_did": policy.owner_did, "revision": policy.revision, "grants": []}
    for g in policy.grants:
        entry = {"sp": g.sp_did, "source": g.source_id, "op": g.operation.label, "granted_at": g.granted_at}
        if g.expires_at is not None:
            entry["expires_at"] = g.expires_at
        doc["grants"].append(entry)
    doc["policies"] = {
        source: {
            "functions": sorted(cp.allowed_function_ids),
            "max_records": cp.max_records,
            "max_requests_per_day": cp.max_requests_per_day,
            "require_enclave": cp.require_enclave,
        }
        for source, cp in sorted(policy.policies.items())
    }
    return doc


def policy_from_dict(doc: Mapping) -> AccessPolicy:
    try:
        grants = tuple(
            Grant(
                sp_did=entry["sp"],
                source_id=entry["source"],
                operation=OperationKind.parse(entry["op"]),
                granted_at=int(entry["granted_at"]),
                expires_at=entry.get("expires_at"),
            )
            for entry in doc.get("grants", [])
        )
        policies = {
            source: ComputationPolicy(
                allowed_function_ids=frozenset(cp["functions"]),
                max_records=int(cp["max_records"]),
                max_requests_per_day=int(cp["max_requests_per_day"]),
                require_enclave=cp.get("require_enclave", True),
            )
            for source, cp in doc.get("policies", {}).items()
        }
        return AccessPolicy(
            owner_did=doc["owner_did"],
            grants=grants,
            policies=policies,
            revision=int(doc.get("revision", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PolicyFileError(f"invalid policy document: {exc}") from exc


def load_policy(path: Union[str, Path]) -> AccessPolicy:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise PolicyFileError(f"{path}: {exc}") from exc
    return policy_from_dict(doc)


def save_policy(policy: AccessPolicy, path: Union[str, Path]) -> None:
    Path(path).write_text(tomli_w.dumps(policy_to_dict(policy)), encoding="utf-8")
