"""Miniature PKI: Ed25519 keys, TLV certificates, CRLs and chain validation."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from rsplab import tlv


class RoleViolation(ValueError):
    pass


class Role(enum.IntEnum):
    ci = 0
    eum = 1
    euicc = 2
    dpauth = 3
    dppb = 4
    dsauth = 5
    eim = 6


# issuer role -> roles it may certify
ISSUABLE = {
    Role.ci: frozenset({Role.ci, Role.eum, Role.dpauth, Role.dppb, Role.dsauth, Role.eim}),
    Role.eum: frozenset({Role.euicc}),
}


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes

    def __repr__(self):
        return f"KeyPair(public_key={self.public_key.hex()[:16]}...)"


def generate_keypair(seed: bytes) -> KeyPair:
    """Deterministic Ed25519 key pair; the 32-byte seed is the private key."""
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(public_key=pk, private_key=bytes(seed))


def sign(private_key: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(private_key).sign(message)


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def key_id(public_key: bytes) -> bytes:
    """20-byte public key identifier: leading bytes of SHA-256 over the raw key."""
    return hashlib.sha256(public_key).digest()[:20]


@tlv.message(0x21)
class Certificate:
    serial: int
    subject_name: str
    role: Role
    subject_public_key: bytes = tlv.field(size=32)
    subject_key_id: bytes = tlv.field(size=20)
    authority_key_id: bytes = tlv.field(size=20)
    not_before: int
    not_after: int
    oid: str | None = None
    has_crl_distribution_point: bool = False
    signature: bytes = tlv.field(size=64)

    @property
    def self_signed(self) -> bool:
        return self.subject_key_id == self.authority_key_id

    def tbs(self) -> bytes:
        return tlv.encode_signed_part(self, "signature")


@tlv.message(0x22)
class Crl:
    issuer_key_id: bytes = tlv.field(size=20)
    this_update: int
    next_update: int
    revoked_serials: tuple[int, ...] = ()
    signature: bytes = tlv.field(size=64)

    def tbs(self) -> bytes:
        return tlv.encode_signed_part(self, "signature")


@tlv.message(0x23)
class NamedKeyPair:
    name: str
    public_key: bytes = tlv.field(size=32)
    private_key: bytes = tlv.field(size=32)


@tlv.message(0x24)
class PkiFixture:
    """Everything a scenario's PKI consists of, as one TLV document."""

    keypairs: tuple[NamedKeyPair, ...] = ()
    certificates: tuple[Certificate, ...] = ()
    crls: tuple[Crl, ...] = ()


def issue_certificate(
    issuer_keys: KeyPair,
    issuer_cert: Certificate | None,
    *,
    serial: int,
    subject_name: str,
    role: Role,
    subject_public_key: bytes,
    not_before: int,
    not_after: int,
    oid: str | None = None,
    has_crl_distribution_point: bool = False,
) -> Certificate:
    if not not_before < not_after:
        raise ValueError("not_before must precede not_after")
    if issuer_cert is None:
        if role != Role.ci or subject_public_key != issuer_keys.public_key:
            raise RoleViolation("only a CI root may be self-signed")
        authority = key_id(subject_public_key)
    else:
        if role not in ISSUABLE.get(issuer_cert.role, ()):
            raise RoleViolation(f"{issuer_cert.role.name} may not issue {role.name}")
        if issuer_cert.subject_public_key != issuer_keys.public_key:
            raise ValueError("issuer keys do not match issuer certificate")
        authority = issuer_cert.subject_key_id
    unsigned = Certificate(
        serial=serial,
        subject_name=subject_name,
        role=role,
        subject_public_key=subject_public_key,
        subject_key_id=key_id(subject_public_key),
        authority_key_id=authority,
        not_before=not_before,
        not_after=not_after,
        oid=oid,
        has_crl_distribution_point=has_crl_distribution_point,
        signature=bytes(64),
    )
    return dataclasses.replace(unsigned, signature=sign(issuer_keys.private_key, unsigned.tbs()))


def issue_crl(issuer_keys: KeyPair, *, this_update: int, next_update: int, revoked=()) -> Crl:
    if not this_update < next_update:
        raise ValueError("this_update must precede next_update")
    unsigned = Crl(
        issuer_key_id=key_id(issuer_keys.public_key),
        this_update=this_update,
        next_update=next_update,
        revoked_serials=tuple(sorted(set(revoked))),
        signature=bytes(64),
    )
    return dataclasses.replace(unsigned, signature=sign(issuer_keys.private_key, unsigned.tbs()))


def crl_signature_ok(crl: Crl, issuer_public_key: bytes) -> bool:
    return key_id(issuer_public_key) == crl.issuer_key_id and verify(
        issuer_public_key, crl.tbs(), crl.signature
    )


@dataclass
class Clock:
    """Logical time in unix seconds; moves only when told to."""

    now: int

    def advance(self, seconds: int) -> int:
        self.now += seconds
        return self.now


class TrustStore:
    """Roots, intermediate certificates and CRLs, evaluated against an injected clock."""

    def __init__(self, clock: Clock, roots=(), certs=(), crls=()):
        self.clock = clock
        self.roots: dict[bytes, Certificate] = {}
        self.certs: dict[bytes, Certificate] = {}
        self.crls: dict[bytes, Crl] = {}
        for c in roots:
            self.add_root(c)
        for c in certs:
            self.add_cert(c)
        for c in crls:
            self.add_crl(c)

    @property
    def now(self) -> int:
        return self.clock.now

    @property
    def root_ids(self) -> list[bytes]:
        return list(self.roots)

    def add_root(self, cert: Certificate):
        if not cert.self_signed:
            raise ValueError("trust anchors must be self-signed")
        self.roots[cert.subject_key_id] = cert

    def add_cert(self, cert: Certificate):
        aki = cert.authority_key_id
        if aki not in self.roots and aki not in self.certs:
            raise ValueError(f"issuer of {cert.subject_name!r} unknown to the store")
        self.certs[cert.subject_key_id] = cert

    def add_crl(self, crl: Crl):
        """Keep the latest CRL per issuer (highest this_update)."""
        current = self.crls.get(crl.issuer_key_id)
        if current is None or crl.this_update >= current.this_update:
            self.crls[crl.issuer_key_id] = crl

    def issuer_public_key(self, key_id_: bytes) -> bytes | None:
        cert = self.roots.get(key_id_) or self.certs.get(key_id_)
        return cert.subject_public_key if cert else None


class ChainStatus(enum.Enum):
    valid = "valid"
    bad_signature = "badSignature"
    untrusted_root = "untrustedRoot"
    revoked = "revoked"
    expired = "expired"


@dataclass(frozen=True)
class ChainResult:
    status: ChainStatus
    failed: Certificate | None = None
    path: tuple[Certificate, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status is ChainStatus.valid

    def __bool__(self):
        return self.ok

    @property
    def root(self) -> Certificate | None:
        return self.path[-1] if self.path and self.path[-1].self_signed else None


def build_path(leaf: Certificate, chain, store: TrustStore) -> tuple[list[Certificate], bool]:
    """Walk authority key ids from ``leaf`` upward. Returns (path, reached_self_signed)."""
    pool = {c.subject_key_id: c for c in chain}
    path = [leaf]
    seen = {leaf.subject_key_id}
    cur = leaf
    while not cur.self_signed:
        aki = cur.authority_key_id
        # store roots win over anything presented in the chain
        issuer = store.roots.get(aki) or pool.get(aki) or store.certs.get(aki)
        if issuer is None or issuer.subject_key_id in seen:
            return path, False
        seen.add(issuer.subject_key_id)
        path.append(issuer)
        cur = issuer
    return path, True


def validate_chain(leaf: Certificate, chain, store: TrustStore) -> ChainResult:
    """Check signature, trust anchor, revocation and validity window for every link.

    The first failing condition in that order is reported, together with the
    link closest to the leaf that fails it.
    """
    path, complete = build_path(leaf, chain, store)
    top = path[-1]

    for i, cert in enumerate(path):
        issuer = path[i + 1] if i + 1 < len(path) else (cert if cert.self_signed else None)
        if issuer is None:
            continue
        if not verify(issuer.subject_public_key, cert.tbs(), cert.signature):
            return ChainResult(ChainStatus.bad_signature, cert, tuple(path))

    anchored = store.roots.get(top.subject_key_id)
    if not complete or anchored is None or anchored.subject_public_key != top.subject_public_key:
        return ChainResult(ChainStatus.untrusted_root, top, tuple(path))

    for i, cert in enumerate(path[:-1]):
        crl = store.crls.get(cert.authority_key_id)
        if crl is None or cert.serial not in crl.revoked_serials:
            continue
        if crl_signature_ok(crl, path[i + 1].subject_public_key):
            return ChainResult(ChainStatus.revoked, cert, tuple(path))

    for cert in path:
        if not cert.not_before <= store.now <= cert.not_after:
            return ChainResult(ChainStatus.expired, cert, tuple(path))

    return ChainResult(ChainStatus.valid, None, tuple(path))
