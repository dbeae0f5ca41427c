"""One-time X25519 key agreement and segment MACs for bound profile packages."""

from __future__ import annotations

import dataclasses
import hashlib
import hmac
from dataclasses import dataclass

from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from rsplab.messages import BppCommandId, SealedSegment

MAC_SIZE = 16


@dataclass(frozen=True)
class OneTimeKey:
    public_key: bytes
    private_key: bytes

    def __repr__(self):
        return f"OneTimeKey(public_key={self.public_key.hex()[:16]}...)"


def one_time_key(secret: bytes) -> OneTimeKey:
    sk = X25519PrivateKey.from_private_bytes(secret)
    pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return OneTimeKey(pk, bytes(secret))


def session_key(own: OneTimeKey, peer_public: bytes, transaction_id: bytes) -> bytes:
    """SHA-256(X25519 shared secret || transactionId)."""
    shared = X25519PrivateKey.from_private_bytes(own.private_key).exchange(
        X25519PublicKey.from_public_bytes(peer_public)
    )
    return hashlib.sha256(shared + transaction_id).digest()


def mac(key: bytes, segment: SealedSegment) -> bytes:
    return hmac.new(key, segment.mac_input(), hashlib.sha256).digest()[:MAC_SIZE]


def seal(key: bytes, command_id: BppCommandId, payload: bytes, index: int = 0, total: int = 1) -> SealedSegment:
    seg = SealedSegment(command_id=command_id, index=index, total=total, payload=payload, mac=bytes(MAC_SIZE))
    return dataclasses.replace(seg, mac=mac(key, seg))


def mac_ok(key: bytes, segment: SealedSegment) -> bool:
    return hmac.compare_digest(mac(key, segment), segment.mac)
