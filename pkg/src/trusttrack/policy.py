"""Policy documents, commitments, the policy store, and conformance checks."""

from __future__ import annotations

import bisect
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence, Union

from ._fsutil import atomic_write
from .canonical import CanonicalError, Digest, canonical_decode, canonical_encode, digest, loads
from .errors import (
    DigestMismatch,
    InvalidPolicy,
    IoFailure,
    KeyMismatch,
    NotFound,
    PolicyHashMismatch,
    RevokedIdentity,
    UnknownAgent,
    UnorderedInput,
)
from .identity import IdentityStatus, KeyPair, is_did, public_key_of, resolve, sign_value, verify_value
from .ledger import Ledger


@dataclass(frozen=True)
class IntRange:
    min: int
    max: int

    def to_value(self) -> dict:
        return {"kind": "int_range", "min": self.min, "max": self.max}

    def violation(self, value: Any) -> str | None:
        if type(value) is not int:
            return f"expected integer in [{self.min}, {self.max}], got {type(value).__name__}"
        if not self.min <= value <= self.max:
            return f"{value} outside [{self.min}, {self.max}]"
        return None


@dataclass(frozen=True)
class OneOf:
    values: frozenset

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", frozenset(self.values))

    def to_value(self) -> dict:
        return {"kind": "one_of", "values": sorted(self.values)}

    def violation(self, value: Any) -> str | None:
        if not isinstance(value, str) or value not in self.values:
            return f"{value!r} not one of {sorted(self.values)}"
        return None


@dataclass(frozen=True)
class MaxLength:
    limit: int

    def to_value(self) -> dict:
        return {"kind": "max_length", "limit": self.limit}

    def violation(self, value: Any) -> str | None:
        if not isinstance(value, str):
            return f"expected text of at most {self.limit} characters"
        # len() of a str counts code points
        if len(value) > self.limit:
            return f"length {len(value)} exceeds {self.limit}"
        return None


@dataclass(frozen=True)
class Required:
    def to_value(self) -> dict:
        return {"kind": "required"}

    def violation(self, value: Any) -> str | None:
        return None


ParameterConstraint = Union[IntRange, OneOf, MaxLength, Required]


def constraint_from_value(v: Any) -> ParameterConstraint:
    if not isinstance(v, dict) or "kind" not in v:
        raise InvalidPolicy(f"constraint must be a map with a kind: {v!r}")
    kind = v["kind"]
    expected = {
        "int_range": {"kind", "min", "max"},
        "one_of": {"kind", "values"},
        "max_length": {"kind", "limit"},
        "required": {"kind"},
    }.get(kind)
    if expected is None or set(v) != expected:
        raise InvalidPolicy(f"malformed constraint {v!r}")
    if kind == "int_range":
        if type(v["min"]) is not int or type(v["max"]) is not int:
            raise InvalidPolicy("int_range bounds must be integers")
        return IntRange(v["min"], v["max"])
    if kind == "one_of":
        vals = v["values"]
        if not isinstance(vals, list) or not all(isinstance(x, str) for x in vals):
            raise InvalidPolicy("one_of values must be a list of strings")
        return OneOf(frozenset(vals))
    if kind == "max_length":
        if type(v["limit"]) is not int:
            raise InvalidPolicy("max_length limit must be an integer")
        return MaxLength(v["limit"])
    return Required()


@dataclass(frozen=True)
class RateLimit:
    window_ms: int
    max_actions: int
    action_filter: str | None = None

    def to_value(self) -> dict:
        return {
            "window_ms": self.window_ms,
            "max_actions": self.max_actions,
            "action_filter": self.action_filter,
        }

    def matches(self, action: str) -> bool:
        return self.action_filter is None or self.action_filter == action


POLICY_FIELDS = (
    "policy_id",
    "agent_did",
    "version",
    "allowed_actions",
    "parameter_constraints",
    "rate_limits",
    "jurisdictions",
    "data_boundaries",
    "not_before_ms",
    "not_after_ms",
    "delegated_by",
)
_REQUIRED_FIELDS = {"policy_id", "agent_did", "version", "allowed_actions", "not_before_ms", "not_after_ms"}


@dataclass(frozen=True)
class PolicyDocument:
    policy_id: str
    agent_did: str
    version: int
    allowed_actions: frozenset
    not_before_ms: int
    not_after_ms: int
    parameter_constraints: dict = field(default_factory=dict)
    rate_limits: tuple = ()
    jurisdictions: frozenset = frozenset()
    data_boundaries: frozenset = frozenset()
    delegated_by: str | None = None

    def __post_init__(self) -> None:
        for name in ("allowed_actions", "jurisdictions", "data_boundaries"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        object.__setattr__(self, "rate_limits", tuple(self.rate_limits))

    def to_value(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "agent_did": self.agent_did,
            "version": self.version,
            "allowed_actions": sorted(self.allowed_actions),
            "parameter_constraints": {
                action: {name: c.to_value() for name, c in params.items()}
                for action, params in self.parameter_constraints.items()
            },
            "rate_limits": [r.to_value() for r in self.rate_limits],
            "jurisdictions": sorted(self.jurisdictions),
            "data_boundaries": sorted(self.data_boundaries),
            "not_before_ms": self.not_before_ms,
            "not_after_ms": self.not_after_ms,
            "delegated_by": self.delegated_by,
        }

    def canonical_bytes(self) -> bytes:
        return canonical_encode(self.to_value())

    @cached_property
    def policy_hash(self) -> Digest:
        return digest(self.canonical_bytes())

    @classmethod
    def from_value(cls, v: Any) -> "PolicyDocument":
        if not isinstance(v, dict):
            raise InvalidPolicy("policy document must be a map")
        unknown = set(v) - set(POLICY_FIELDS)
        missing = _REQUIRED_FIELDS - set(v)
        if unknown or missing:
            raise InvalidPolicy(f"unknown fields {sorted(unknown)}, missing fields {sorted(missing)}")

        def strings(name: str) -> frozenset:
            items = v.get(name, [])
            if not isinstance(items, list) or not all(isinstance(x, str) for x in items):
                raise InvalidPolicy(f"{name} must be a list of strings")
            return frozenset(items)

        for name in ("version", "not_before_ms", "not_after_ms"):
            if type(v[name]) is not int:
                raise InvalidPolicy(f"{name} must be an integer")
        for name in ("policy_id", "agent_did"):
            if not isinstance(v[name], str):
                raise InvalidPolicy(f"{name} must be a string")
        delegated_by = v.get("delegated_by")
        if delegated_by is not None and not isinstance(delegated_by, str):
            raise InvalidPolicy("delegated_by must be a DID or null")

        pc = v.get("parameter_constraints", {})
        if not isinstance(pc, dict) or not all(isinstance(p, dict) for p in pc.values()):
            raise InvalidPolicy("parameter_constraints must map action -> param -> constraint")
        constraints = {
            action: {name: constraint_from_value(c) for name, c in params.items()}
            for action, params in pc.items()
        }

        raw_limits = v.get("rate_limits", [])
        if not isinstance(raw_limits, list):
            raise InvalidPolicy("rate_limits must be a list")
        limits = []
        for r in raw_limits:
            if not isinstance(r, dict) or not {"window_ms", "max_actions"} <= set(r) <= {
                "window_ms",
                "max_actions",
                "action_filter",
            }:
                raise InvalidPolicy(f"malformed rate limit {r!r}")
            af = r.get("action_filter")
            if type(r["window_ms"]) is not int or type(r["max_actions"]) is not int:
                raise InvalidPolicy("rate limit window_ms/max_actions must be integers")
            if af is not None and not isinstance(af, str):
                raise InvalidPolicy("rate limit action_filter must be a string or null")
            limits.append(RateLimit(r["window_ms"], r["max_actions"], af))

        return cls(
            policy_id=v["policy_id"],
            agent_did=v["agent_did"],
            version=v["version"],
            allowed_actions=strings("allowed_actions"),
            not_before_ms=v["not_before_ms"],
            not_after_ms=v["not_after_ms"],
            parameter_constraints=constraints,
            rate_limits=tuple(limits),
            jurisdictions=strings("jurisdictions"),
            data_boundaries=strings("data_boundaries"),
            delegated_by=delegated_by,
        )


def load_policy(path: str | os.PathLike) -> PolicyDocument:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from None
    try:
        return PolicyDocument.from_value(loads(data))
    except CanonicalError as exc:
        raise InvalidPolicy(f"{path}: {exc}") from None


@dataclass(frozen=True)
class PolicyIssue:
    code: str
    detail: str


def validate_policy(doc: PolicyDocument) -> list[PolicyIssue]:
    """Every violated structural invariant; an empty list means the document is valid."""
    issues: list[PolicyIssue] = []

    def add(code: str, detail: str) -> None:
        issues.append(PolicyIssue(code, detail))

    if not is_did(doc.agent_did):
        add("MalformedDid", f"agent_did {doc.agent_did!r} is not a did:ttk identifier")
    if doc.delegated_by is not None and not is_did(doc.delegated_by):
        add("MalformedDid", f"delegated_by {doc.delegated_by!r} is not a did:ttk identifier")
    if type(doc.version) is not int or doc.version < 1:
        add("InvalidVersion", f"version must be >= 1, got {doc.version!r}")
    if not doc.allowed_actions:
        add("EmptyActions", "allowed_actions is empty")
    if not doc.not_before_ms < doc.not_after_ms:
        add("EmptyValidity", f"window [{doc.not_before_ms}, {doc.not_after_ms}) is empty")
    for action in sorted(doc.parameter_constraints):
        if action not in doc.allowed_actions:
            add("UnknownConstraintAction", f"constraints given for disallowed action {action!r}")
        for name, c in sorted(doc.parameter_constraints[action].items()):
            where = f"{action}.{name}"
            if isinstance(c, IntRange) and c.min > c.max:
                add("InvertedRange", f"{where}: min {c.min} > max {c.max}")
            elif isinstance(c, OneOf) and not c.values:
                add("EmptyOneOf", f"{where}: one_of has no values")
            elif isinstance(c, MaxLength) and c.limit < 0:
                add("NegativeLimit", f"{where}: max_length {c.limit} < 0")
    for i, r in enumerate(doc.rate_limits):
        if r.window_ms <= 0 or r.max_actions < 1:
            add("InvalidRateLimit", f"rate_limits[{i}]: window_ms must be > 0 and max_actions >= 1")
    try:
        doc.canonical_bytes()
    except CanonicalError as exc:
        add("NotEncodable", str(exc))
    return issues


# store


class PolicyStore:
    """Content-addressed policy documents, re-hashed on every read.

    With a directory, documents live in ``<dir>/<hash>.json``; without one the
    store is in-memory.
    """

    def __init__(self, directory: str | os.PathLike | None = None) -> None:
        self.directory = Path(directory) if directory is not None else None
        self._blobs: dict[str, bytes] = {}

    def _path(self, hex_hash: str) -> Path:
        assert self.directory is not None
        return self.directory / f"{hex_hash}.json"

    def put(self, doc: PolicyDocument) -> Digest:
        data = doc.canonical_bytes() + b"\n"
        h = doc.policy_hash
        if self.directory is None:
            self._blobs[str(h)] = data
        else:
            atomic_write(self._path(str(h)), data)
        return h

    def _raw(self, hex_hash: str) -> bytes | None:
        if self.directory is None:
            return self._blobs.get(hex_hash)
        try:
            return self._path(hex_hash).read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise IoFailure(f"{self._path(hex_hash)}: {exc}") from None

    def lookup(self, policy_hash: Digest) -> PolicyDocument:
        key = str(policy_hash)
        raw = self._raw(key)
        if raw is None:
            raise NotFound(f"no policy with hash {key}")
        body = raw[:-1] if raw.endswith(b"\n") else None
        try:
            if body is None or digest(body) != policy_hash:
                raise DigestMismatch(f"stored policy {key} does not hash to its name")
            return PolicyDocument.from_value(canonical_decode(body))
        except (CanonicalError, InvalidPolicy) as exc:
            raise DigestMismatch(f"stored policy {key} is corrupt: {exc}") from None

    def __contains__(self, policy_hash: object) -> bool:
        return self._raw(str(policy_hash)) is not None

    def hashes(self) -> list[str]:
        if self.directory is None:
            return sorted(self._blobs)
        if not self.directory.is_dir():
            return []
        return sorted(p.stem for p in self.directory.glob("*.json"))


def lookup_policy(policy_hash: Digest, store: PolicyStore) -> PolicyDocument:
    return store.lookup(policy_hash)


# commitments


@dataclass(frozen=True)
class PolicyCommitment:
    policy_hash: Digest
    agent_did: str
    committed_at_ms: int
    signature: bytes
    ledger_index: int | None = None

    def unsigned_value(self) -> dict:
        return {
            "policy_hash": str(self.policy_hash),
            "agent_did": self.agent_did,
            "committed_at_ms": self.committed_at_ms,
        }

    def body(self) -> dict:
        return {**self.unsigned_value(), "signature": self.signature.hex()}

    @classmethod
    def from_record(cls, body: dict, ledger_index: int) -> "PolicyCommitment":
        if set(body) != {"policy_hash", "agent_did", "committed_at_ms", "signature"}:
            raise InvalidPolicy("malformed policy record fields")
        try:
            c = cls(
                Digest.from_hex(body["policy_hash"]),
                body["agent_did"],
                body["committed_at_ms"],
                bytes.fromhex(body["signature"]),
                ledger_index,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidPolicy(f"malformed policy record: {exc}") from None
        return c

    def verifies(self) -> bool:
        return len(self.signature) == 64 and verify_value(
            self.agent_did, self.unsigned_value(), self.signature
        )


def commit_policy(
    doc: PolicyDocument,
    keypair: KeyPair,
    now: int,
    ledger: Ledger,
    store: PolicyStore | None = None,
) -> PolicyCommitment:
    """Hash, sign and anchor ``doc``; also files it in ``store`` when given."""
    issues = validate_policy(doc)
    if issues:
        raise InvalidPolicy("; ".join(f"{i.code}: {i.detail}" for i in issues), issues)
    if public_key_of(doc.agent_did) != keypair.public_key:
        raise KeyMismatch(f"keypair does not control {doc.agent_did}")
    status = resolve(doc.agent_did, ledger).status
    if status is IdentityStatus.NOT_FOUND:
        raise UnknownAgent(f"{doc.agent_did} is not registered")
    if status is IdentityStatus.REVOKED:
        raise RevokedIdentity(f"{doc.agent_did} has been revoked")
    draft = PolicyCommitment(doc.policy_hash, doc.agent_did, now, b"")
    signature = sign_value(keypair, draft.unsigned_value())
    committed = PolicyCommitment(doc.policy_hash, doc.agent_did, now, signature)
    if store is not None:
        store.put(doc)
    rec = ledger.append("policy", committed.body(), now)
    return PolicyCommitment(doc.policy_hash, doc.agent_did, now, signature, rec.idx)


# conformance

VIOLATION_ORDER = ("ActionNotAllowed", "ParamViolation", "OutsideValidity", "DataBoundary", "JurisdictionMismatch")


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    param: str | None = None
    constraint: str | None = None


def check_action(doc: PolicyDocument, entry: Any) -> list[Violation]:
    """Violations of ``doc`` by one log entry; empty means conformant."""
    if entry.policy != doc.policy_hash:
        raise PolicyHashMismatch(f"entry cites {entry.policy}, document hashes to {doc.policy_hash}")
    out: list[Violation] = []
    if entry.action not in doc.allowed_actions:
        out.append(Violation("ActionNotAllowed", f"action {entry.action!r} not in allowed_actions"))
    for name, c in sorted(doc.parameter_constraints.get(entry.action, {}).items()):
        kind = c.to_value()["kind"]
        if name not in entry.params:
            if isinstance(c, Required):
                out.append(Violation("ParamViolation", f"{name}: required parameter missing", name, kind))
            continue
        problem = c.violation(entry.params[name])
        if problem:
            out.append(Violation("ParamViolation", f"{name}: {problem}", name, kind))
    if not doc.not_before_ms <= entry.ts_ms < doc.not_after_ms:
        out.append(
            Violation(
                "OutsideValidity",
                f"ts_ms {entry.ts_ms} outside [{doc.not_before_ms}, {doc.not_after_ms})",
            )
        )
    labels = entry.ctx.get("data_labels")
    if labels is not None:
        if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
            out.append(Violation("DataBoundary", "ctx.data_labels is not a list of strings"))
        else:
            outside = sorted(set(labels) - doc.data_boundaries)
            if outside:
                out.append(Violation("DataBoundary", f"labels {outside} outside data_boundaries"))
    if "jurisdiction" in entry.ctx and entry.ctx["jurisdiction"] not in doc.jurisdictions:
        out.append(
            Violation(
                "JurisdictionMismatch",
                f"jurisdiction {entry.ctx['jurisdiction']!r} not in {sorted(doc.jurisdictions)}",
            )
        )
    return out


@dataclass(frozen=True)
class RateViolation:
    limit_index: int
    window_ms: int
    max_actions: int
    count: int

    @property
    def detail(self) -> str:
        return (
            f"rate_limits[{self.limit_index}]: {self.count} actions in {self.window_ms} ms "
            f"window exceeds {self.max_actions}"
        )


def check_rate(doc: PolicyDocument, entries: Sequence[Any]) -> list[tuple[int, RateViolation]]:
    """Rate-limit breaches as ``(seq, violation)`` pairs, ordered by seq then limit.

    For an entry ``e`` a limit counts matching entries with ``ts_ms`` in
    ``(e.ts_ms - window_ms, e.ts_ms]``; timestamps need not be sorted.
    """
    for a, b in zip(entries, entries[1:]):
        if b.seq <= a.seq or b.agent != a.agent:
            raise UnorderedInput("entries must belong to one agent with strictly increasing seq")
    found: list[tuple[int, RateViolation]] = []
    for li, limit in enumerate(doc.rate_limits):
        matching = [e for e in entries if limit.matches(e.action)]
        times = sorted(e.ts_ms for e in matching)
        for e in matching:
            count = bisect.bisect_right(times, e.ts_ms) - bisect.bisect_right(times, e.ts_ms - limit.window_ms)
            if count > limit.max_actions:
                found.append((e.seq, RateViolation(li, limit.window_ms, limit.max_actions, count)))
    found.sort(key=lambda p: (p[0], p[1].limit_index))
    return found


def policies_from_ledger(ledger: Ledger, upto: int | None = None) -> dict[tuple[str, str], PolicyCommitment]:
    """Verified commitments keyed by (agent_did, policy hash hex); first commitment wins."""
    out: dict[tuple[str, str], PolicyCommitment] = {}
    records = ledger.records()
    for rec in records[:upto] if upto is not None else records:
        if rec.kind != "policy":
            continue
        try:
            c = PolicyCommitment.from_record(rec.body, rec.idx)
        except (InvalidPolicy, CanonicalError):
            continue
        if c.verifies():
            out.setdefault((c.agent_did, str(c.policy_hash)), c)
    return out
