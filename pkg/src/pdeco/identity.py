"""Decentralized identities and authenticated, encrypted agent messaging.

Each party owns an :class:`AgentIdentity`: an Ed25519 signing key, an X25519
agreement key and a DID derived from the signing key, so no resolver is
needed. Peers exchange self-signed :class:`DidDocument` objects and derive a
shared session key; :class:`SecureChannel` then seals messages into
:class:`MessageEnvelope` objects that are encrypted (ChaCha20-Poly1305),
signed by the sender and numbered with a per-direction counter.
"""

from __future__ import annotations

import base64
import os
import struct
import threading
from dataclasses import dataclass, replace
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .core import DecodeError, PdecoError, canonical, content_hash, decode_as, encode

DID_PREFIX = "did:pds:"
DID_HASH_BYTES = 20
TAG_BYTES = 16

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw


class InvalidDidDocument(PdecoError):
    """A peer's DID document is not self-consistent."""


class TransportError(PdecoError):
    """An inbound envelope was refused."""


class TamperDetected(TransportError):
    pass


class Replay(TransportError):
    pass


class WrongRecipient(TransportError):
    pass


def _hkdf(secret: bytes, salt: bytes, info: bytes, length: int = 32) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(secret)


def derive_did(signing_public_key: bytes) -> str:
    """``did:pds:`` + multibase base32 of the truncated key hash."""
    digest = content_hash(signing_public_key)[:DID_HASH_BYTES]
    body = base64.b32encode(digest).decode("ascii").rstrip("=").lower()
    return DID_PREFIX + "b" + body


def verify_signature(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


@dataclass(frozen=True, repr=False)
class AgentIdentity:
    did: str
    signing_key: Ed25519PrivateKey
    agreement_key: X25519PrivateKey

    @property
    def signing_public_key(self) -> bytes:
        return self.signing_key.public_key().public_bytes(_RAW, _RAW_PUB)

    @property
    def agreement_public_key(self) -> bytes:
        return self.agreement_key.public_key().public_bytes(_RAW, _RAW_PUB)

    def sign(self, data: bytes) -> bytes:
        return self.signing_key.sign(data)

    def document(self, attestation_public_key: bytes = b"") -> "DidDocument":
        """Self-signed DID document; optionally publishes an enclave key."""
        doc = DidDocument(
            did=self.did,
            signing_public_key=self.signing_public_key,
            agreement_public_key=self.agreement_public_key,
            attestation_public_key=attestation_public_key,
        )
        return replace(doc, self_signature=self.sign(doc.signing_bytes()))

    def __repr__(self) -> str:
        return f"AgentIdentity(did={self.did!r})"


def generate_identity(seed: Optional[bytes] = None) -> AgentIdentity:
    """Create an identity; a 32-byte ``seed`` makes it reproducible."""
    if seed is None:
        seed = os.urandom(32)
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != 32:
        raise ValueError("identity seed must be exactly 32 bytes")
    seed = bytes(seed)
    signing = Ed25519PrivateKey.from_private_bytes(_hkdf(seed, b"", b"pdeco/signing"))
    agreement = X25519PrivateKey.from_private_bytes(_hkdf(seed, b"", b"pdeco/agreement"))
    pub = signing.public_key().public_bytes(_RAW, _RAW_PUB)
    return AgentIdentity(did=derive_did(pub), signing_key=signing, agreement_key=agreement)


DOC_DOMAIN = b"pdeco/diddoc/v1\x00"


@canonical(0x0020)
@dataclass(frozen=True)
class DidDocument:
    did: str
    signing_public_key: bytes
    agreement_public_key: bytes
    attestation_public_key: bytes = b""
    self_signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return DOC_DOMAIN + encode(replace(self, self_signature=b""))

    def verify(self) -> bool:
        if not all(isinstance(k, bytes) for k in (
            self.signing_public_key, self.agreement_public_key,
            self.attestation_public_key, self.self_signature,
        )):
            return False
        if len(self.signing_public_key) != 32 or len(self.agreement_public_key) != 32:
            return False
        if self.attestation_public_key and len(self.attestation_public_key) != 32:
            return False
        if derive_did(self.signing_public_key) != self.did:
            return False
        return verify_signature(self.signing_public_key, self.self_signature, self.signing_bytes())

    def validate(self) -> None:
        if not self.verify():
            raise InvalidDidDocument(f"DID document for {self.did!r} failed verification")

    def to_bytes(self) -> bytes:
        return encode(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DidDocument":
        return decode_as(data, cls)


ENVELOPE_DOMAIN = b"pdeco/envelope/v1\x00"


@canonical(0x0021)
@dataclass(frozen=True)
class MessageEnvelope:
    sender_did: str
    recipient_did: str
    counter: int
    ciphertext: bytes
    aead_tag: bytes
    sender_signature: bytes = b""

    def header(self) -> bytes:
        """Associated data bound into the AEAD."""
        return encode((self.sender_did, self.recipient_did, self.counter))

    def signing_bytes(self) -> bytes:
        return ENVELOPE_DOMAIN + encode(
            (self.sender_did, self.recipient_did, self.counter, self.ciphertext, self.aead_tag)
        )

    def to_bytes(self) -> bytes:
        return encode(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MessageEnvelope":
        return decode_as(data, cls)


class SecureChannel:
    """A long-lived session between ``local`` and one peer.

    Each direction has its own key and counter. ``pack`` and ``unpack`` hold a
    lock so counters stay strictly monotone when a channel is shared between
    threads.
    """

    def __init__(self, local: AgentIdentity, peer: DidDocument):
        peer.validate()
        self._local = local
        self.peer = peer
        self.local_did = local.did
        self.peer_did = peer.did
        try:
            shared = local.agreement_key.exchange(X25519PublicKey.from_public_bytes(peer.agreement_public_key))
        except ValueError as exc:
            raise InvalidDidDocument(f"unusable agreement key: {exc}") from None
        salt = content_hash(encode(tuple(sorted((local.did, peer.did)))))
        self.session_key = _hkdf(shared, salt, b"pdeco/channel/v1")
        self._send_aead = ChaCha20Poly1305(self._direction_key(local.did, peer.did))
        self._recv_aead = ChaCha20Poly1305(self._direction_key(peer.did, local.did))
        self.send_counter = 0
        self.recv_counter = 0
        self._lock = threading.Lock()

    def _direction_key(self, sender: str, recipient: str) -> bytes:
        return _hkdf(self.session_key, b"", b"pdeco/direction\x00" + encode((sender, recipient)))

    @staticmethod
    def _nonce(counter: int) -> bytes:
        return b"\x00\x00\x00\x00" + struct.pack(">Q", counter)

    def pack(self, plaintext: bytes) -> MessageEnvelope:
        with self._lock:
            self.send_counter += 1
            counter = self.send_counter
        env = MessageEnvelope(self.local_did, self.peer_did, counter, b"", b"")
        sealed = self._send_aead.encrypt(self._nonce(counter), plaintext, env.header())
        env = replace(env, ciphertext=sealed[:-TAG_BYTES], aead_tag=sealed[-TAG_BYTES:])
        return replace(env, sender_signature=self._local.sign(env.signing_bytes()))

    def unpack(self, env: MessageEnvelope) -> bytes:
        if not isinstance(env, MessageEnvelope):
            raise TamperDetected("not an envelope")
        if env.recipient_did != self.local_did:
            raise WrongRecipient(f"envelope addressed to {env.recipient_did}")
        if env.sender_did != self.peer_did:
            raise TamperDetected("sender does not own this channel")
        if not (isinstance(env.counter, int) and isinstance(env.ciphertext, bytes)
                and isinstance(env.aead_tag, bytes) and isinstance(env.sender_signature, bytes)):
            raise TamperDetected("malformed envelope fields")
        if not 0 < env.counter < 2**64 or len(env.aead_tag) != TAG_BYTES:
            raise TamperDetected("malformed envelope header")
        if not verify_signature(self.peer.signing_public_key, env.sender_signature, env.signing_bytes()):
            raise TamperDetected("bad sender signature")
        try:
            plaintext = self._recv_aead.decrypt(
                self._nonce(env.counter), env.ciphertext + env.aead_tag, env.header()
            )
        except InvalidTag:
            raise TamperDetected("AEAD authentication failed") from None
        with self._lock:
            if env.counter <= self.recv_counter:
                raise Replay(f"counter {env.counter} <= last seen {self.recv_counter}")
            self.recv_counter = env.counter
        return plaintext

    def unpack_bytes(self, data: bytes) -> bytes:
        """``unpack`` for raw wire bytes; undecodable input counts as tampering."""
        try:
            env = MessageEnvelope.from_bytes(data)
        except DecodeError as exc:
            raise TamperDetected(f"undecodable envelope: {exc}") from None
        return self.unpack(env)

    def __repr__(self) -> str:
        return f"SecureChannel({self.local_did} -> {self.peer_did}, send={self.send_counter}, recv={self.recv_counter})"


def establish_channel(local: AgentIdentity, peer: DidDocument) -> SecureChannel:
    return SecureChannel(local, peer)

