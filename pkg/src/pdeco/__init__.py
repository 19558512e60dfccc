"""pdeco: a desk-scale decentralized personal-data ecosystem.

User agents hold source-signed records, enforce declarative access control
over service-provider requests, compute inside a simulated attesting
enclave, and take part in attestation-gated federated learning.
"""

from .core import (
    ComputationRequest,
    ComputeResult,
    DataSelector,
    DecodeError,
    OperationKind,
    PdecoError,
    content_hash,
    decode,
    encode,
)

__version__ = "0.1.0"

__all__ = [
    "ComputationRequest",
    "ComputeResult",
    "DataSelector",
    "DecodeError",
    "OperationKind",
    "PdecoError",
    "content_hash",
    "decode",
    "encode",
]
