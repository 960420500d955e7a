"""Agent identities: Ed25519 keys, self-certifying DIDs, ledger registry."""

from __future__ import annotations

import enum
import os
import re
import secrets
import time
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from ._fsutil import atomic_write
from .canonical import CanonicalError, canonical_encode, loads
from .errors import (
    AlreadyRegistered,
    AlreadyRevoked,
    IoFailure,
    KeyMismatch,
    MalformedDid,
    MalformedInput,
    MalformedKey,
    MalformedSeed,
    NotFound,
    RevokedIdentity,
)
from .ledger import Ledger

DID_PREFIX = "did:ttk:"
_DID_RE = re.compile(r"did:ttk:([0-9a-f]{64})")


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes = field(repr=False)

    @cached_property
    def _signer(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.private_key)

    @property
    def did(self) -> str:
        return did_for(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return self._signer.sign(message)


def generate_keypair(seed: bytes | None = None) -> KeyPair:
    """Derive a keypair from a 32-byte seed, or from the OS CSPRNG when omitted."""
    if seed is None:
        seed = secrets.token_bytes(32)
    elif not isinstance(seed, (bytes, bytearray)) or len(seed) != 32:
        raise MalformedSeed(f"seed must be exactly 32 bytes, got {len(seed)}")
    sk = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    pk = sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return KeyPair(public_key=pk, private_key=bytes(seed))


def did_for(public_key: bytes) -> str:
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != 32:
        raise MalformedKey("public key must be 32 bytes")
    return DID_PREFIX + bytes(public_key).hex()


def public_key_of(did: str) -> bytes:
    """Recover the key embedded in a did:ttk identifier."""
    m = _DID_RE.fullmatch(did) if isinstance(did, str) else None
    if m is None:
        raise MalformedDid(f"not a did:ttk identifier: {did!r}")
    return bytes.fromhex(m.group(1))


def is_did(text: object) -> bool:
    return isinstance(text, str) and _DID_RE.fullmatch(text) is not None


@lru_cache(maxsize=4096)
def _verifier(public_key: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public_key)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    if len(public_key) != 32 or len(signature) != 64:
        raise MalformedInput("public key must be 32 bytes and signature 64 bytes")
    try:
        _verifier(bytes(public_key)).verify(bytes(signature), message)
    except (InvalidSignature, ValueError):
        return False
    return True


def sign_value(keypair: KeyPair, value: dict) -> bytes:
    return keypair.sign(canonical_encode(value))


def verify_value(did: str, value: dict, signature: bytes) -> bool:
    """Check ``signature`` over ``value`` against the key embedded in ``did``."""
    try:
        return verify_signature(public_key_of(did), canonical_encode(value), signature)
    except (MalformedDid, MalformedInput, CanonicalError):
        return False


def _check_keypair(did: str, keypair: KeyPair) -> None:
    if public_key_of(did) != keypair.public_key:
        raise KeyMismatch(f"keypair does not control {did}")


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class AgentIdentity:
    did: str
    public_key: bytes
    metadata: dict = field(default_factory=dict)
    registered_at: int | None = None

    @classmethod
    def for_keypair(cls, keypair: KeyPair, metadata: dict | None = None) -> "AgentIdentity":
        return cls(keypair.did, keypair.public_key, dict(metadata or {}))


@dataclass(frozen=True)
class RevocationRecord:
    did: str
    revoked_at_ms: int
    reason: str
    signature: bytes

    def unsigned_value(self) -> dict:
        return {"did": self.did, "revoked_at_ms": self.revoked_at_ms, "reason": self.reason}

    def to_value(self) -> dict:
        return {**self.unsigned_value(), "signature": self.signature.hex()}

    def verifies(self) -> bool:
        return verify_value(self.did, self.unsigned_value(), self.signature)


class IdentityStatus(str, enum.Enum):
    REGISTERED = "Registered"
    NOT_FOUND = "NotFound"
    REVOKED = "Revoked"


@dataclass(frozen=True)
class Resolution:
    status: IdentityStatus
    identity: AgentIdentity | None = None
    revocation: RevocationRecord | None = None
    revocation_index: int | None = None

    @property
    def revoked_at_ms(self) -> int | None:
        return self.revocation.revoked_at_ms if self.revocation else None


def _identity_from_body(body: dict, idx: int) -> AgentIdentity | None:
    try:
        did = body["did"]
        pk = bytes.fromhex(body["public_key"])
        sig = bytes.fromhex(body["sig"])
        metadata = body["metadata"]
    except (KeyError, TypeError, ValueError):
        return None
    unsigned = {k: v for k, v in body.items() if k != "sig"}
    if not is_did(did) or public_key_of(did) != pk or not isinstance(metadata, dict):
        return None
    if len(sig) != 64 or not verify_value(did, unsigned, sig):
        return None
    return AgentIdentity(did, pk, metadata, registered_at=idx)


def _revocation_from_body(body: dict) -> RevocationRecord | None:
    try:
        rec = RevocationRecord(
            body["did"], body["revoked_at_ms"], body["reason"], bytes.fromhex(body["signature"])
        )
    except (KeyError, TypeError, ValueError):
        return None
    if type(rec.revoked_at_ms) is not int or len(rec.signature) != 64 or not rec.verifies():
        return None
    return rec


class IdentityRegistry:
    """Identity state folded from ledger records.

    Records whose signatures do not verify are ignored, so a third party
    cannot register or revoke someone else's DID.
    """

    def __init__(self) -> None:
        self._identities: dict[str, AgentIdentity] = {}
        self._revocations: dict[str, tuple[RevocationRecord, int]] = {}

    @classmethod
    def from_ledger(cls, ledger: Ledger, upto: int | None = None) -> "IdentityRegistry":
        reg = cls()
        records = ledger.records()
        for rec in records[:upto] if upto is not None else records:
            reg.observe(rec.kind, rec.body, rec.idx)
        return reg

    def observe(self, kind: str, body: dict, idx: int) -> None:
        if kind == "identity":
            ident = _identity_from_body(body, idx)
            if ident and ident.did not in self._identities and ident.did not in self._revocations:
                self._identities[ident.did] = ident
        elif kind == "revocation":
            rev = _revocation_from_body(body)
            if rev and rev.did in self._identities and rev.did not in self._revocations:
                self._revocations[rev.did] = (rev, idx)

    def resolve(self, did: str) -> Resolution:
        public_key_of(did)
        ident = self._identities.get(did)
        if ident is None:
            return Resolution(IdentityStatus.NOT_FOUND)
        if did in self._revocations:
            rev, idx = self._revocations[did]
            return Resolution(IdentityStatus.REVOKED, ident, rev, idx)
        return Resolution(IdentityStatus.REGISTERED, ident)

    def dids(self) -> list[str]:
        return sorted(self._identities)


def resolve(did: str, ledger: Ledger) -> Resolution:
    return IdentityRegistry.from_ledger(ledger).resolve(did)


def register_identity(
    identity: AgentIdentity, keypair: KeyPair, ledger: Ledger, now: int | None = None
) -> int:
    """Append a self-signed identity record; returns its ledger index."""
    _check_keypair(identity.did, keypair)
    if identity.public_key != keypair.public_key:
        raise KeyMismatch("identity public key differs from keypair")
    current = resolve(identity.did, ledger)
    if current.status is IdentityStatus.REVOKED:
        raise RevokedIdentity(f"{identity.did} has been revoked")
    if current.status is IdentityStatus.REGISTERED:
        raise AlreadyRegistered(f"{identity.did} is already registered")
    body = {"did": identity.did, "public_key": identity.public_key.hex(), "metadata": identity.metadata}
    body["sig"] = sign_value(keypair, body).hex()
    return ledger.append("identity", body, now_ms() if now is None else now).idx


def revoke_identity(did: str, keypair: KeyPair, reason: str, now: int, ledger: Ledger) -> int:
    current = resolve(did, ledger)
    if current.status is IdentityStatus.NOT_FOUND:
        raise NotFound(f"{did} is not registered")
    if current.status is IdentityStatus.REVOKED:
        raise AlreadyRevoked(f"{did} was revoked at {current.revoked_at_ms}")
    _check_keypair(did, keypair)
    unsigned = {"did": did, "revoked_at_ms": now, "reason": reason}
    rec = RevocationRecord(did, now, reason, sign_value(keypair, unsigned))
    return ledger.append("revocation", rec.to_value(), now).idx


# key files


def keypair_to_value(keypair: KeyPair) -> dict:
    return {
        "did": keypair.did,
        "public_key_hex": keypair.public_key.hex(),
        "private_key_hex": keypair.private_key.hex(),
    }


def keypair_from_value(v: object) -> KeyPair:
    if not isinstance(v, dict) or set(v) != {"did", "public_key_hex", "private_key_hex"}:
        raise MalformedKey("key file must hold did, public_key_hex, private_key_hex")
    try:
        kp = generate_keypair(bytes.fromhex(v["private_key_hex"]))
    except (TypeError, ValueError, MalformedSeed):
        raise MalformedKey("private_key_hex is not 32 hex-encoded bytes") from None
    if kp.public_key.hex() != v["public_key_hex"] or kp.did != v["did"]:
        raise MalformedKey("key file public key or DID does not match its private key")
    return kp


def save_keyfile(keypair: KeyPair, path: str | os.PathLike) -> None:
    """Write a key file readable only by its owner (mode 0600)."""
    atomic_write(Path(path), canonical_encode(keypair_to_value(keypair)) + b"\n", mode=0o600)


def load_keyfile(path: str | os.PathLike) -> KeyPair:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from None
    try:
        return keypair_from_value(loads(data))
    except CanonicalError as exc:
        raise MalformedKey(f"{path}: {exc}") from None


__all__ = [
    "AgentIdentity",
    "IdentityRegistry",
    "IdentityStatus",
    "KeyPair",
    "Resolution",
    "RevocationRecord",
    "did_for",
    "generate_keypair",
    "load_keyfile",
    "public_key_of",
    "register_identity",
    "resolve",
    "revoke_identity",
    "save_keyfile",
    "verify_signature",
]
