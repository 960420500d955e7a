"""Signed, hash-chained behavioral logs and their newline-delimited file form."""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence, Union

from ._fsutil import atomic_write
from .canonical import ZERO_DIGEST, CanonicalError, Digest, canonical_decode, canonical_encode, digest
from .errors import (
    BadSignature,
    ChainBreak,
    HashMismatch,
    IoFailure,
    KeyMismatch,
    NonMonotonicTimestamp,
    ParseError,
    SeqGap,
    TraceError,
)
from .identity import KeyPair, is_did, public_key_of, verify_signature

SCHEMA_VERSION = 1
ANCHOR_CLASSES = ("critical", "routine")
ENTRY_FIELDS = (
    "v",
    "agent",
    "seq",
    "prev",
    "policy",
    "action",
    "params",
    "ts_ms",
    "ctx",
    "inputs",
    "outputs",
    "refs",
    "anchor_class",
    "sig",
    "hash",
)
_SIG_HEX = re.compile(r"[0-9a-f]{128}")

Source = Union[str, os.PathLike, bytes, BinaryIO]


@dataclass(frozen=True)
class EntryRef:
    """Upstream reference: (agent, seq) plus the hash the referencing agent saw."""

    agent: str
    seq: int
    hash: Digest

    def to_value(self) -> dict:
        return {"agent": self.agent, "seq": self.seq, "hash": str(self.hash)}

    @classmethod
    def from_value(cls, v: object) -> "EntryRef":
        if not isinstance(v, dict) or set(v) != {"agent", "seq", "hash"}:
            raise ParseError("ref must be a map of agent, seq, hash")
        if not is_did(v["agent"]) or type(v["seq"]) is not int or v["seq"] < 1:
            raise ParseError(f"malformed ref {v!r}")
        try:
            return cls(v["agent"], v["seq"], Digest.from_hex(v["hash"]))
        except CanonicalError as exc:
            raise ParseError(str(exc)) from None

    @classmethod
    def to(cls, entry: "LogEntry") -> "EntryRef":
        assert entry.hash is not None, "can only reference sealed entries"
        return cls(entry.agent, entry.seq, entry.hash)


@dataclass(frozen=True, kw_only=True)
class LogEntry:
    v: int = SCHEMA_VERSION
    agent: str
    seq: int
    prev: Digest
    policy: Digest
    action: str
    params: dict
    ts_ms: int
    ctx: dict = field(default_factory=dict)
    inputs: tuple = ()
    outputs: tuple = ()
    refs: tuple = ()
    anchor_class: str = "routine"
    sig: bytes | None = None
    hash: Digest | None = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.agent, self.seq)

    def signing_value(self) -> dict:
        return {
            "v": self.v,
            "agent": self.agent,
            "seq": self.seq,
            "prev": str(self.prev),
            "policy": str(self.policy),
            "action": self.action,
            "params": self.params,
            "ts_ms": self.ts_ms,
            "ctx": self.ctx,
            "inputs": [str(d) for d in self.inputs],
            "outputs": [str(d) for d in self.outputs],
            "refs": [r.to_value() for r in self.refs],
            "anchor_class": self.anchor_class,
        }

    def sealed_value(self) -> dict:
        if self.sig is None:
            raise ValueError("entry is not sealed")
        return {**self.signing_value(), "sig": self.sig.hex()}

    def to_value(self) -> dict:
        if self.hash is None:
            raise ValueError("entry is not sealed")
        return {**self.sealed_value(), "hash": str(self.hash)}

    # Encodings are memoized on the instance.  Entries are immutable once
    # built, and dataclasses.replace() starts a fresh cache, so a cached value
    # always matches the fields it was computed from.
    def signing_bytes(self) -> bytes:
        cached = self.__dict__.get("_signing_bytes")
        if cached is None:
            cached = canonical_encode(self.signing_value())
            object.__setattr__(self, "_signing_bytes", cached)
        return cached

    def sealed_bytes(self) -> bytes:
        cached = self.__dict__.get("_sealed_bytes")
        if cached is None:
            cached = canonical_encode(self.sealed_value())
            object.__setattr__(self, "_sealed_bytes", cached)
        return cached

    def compute_hash(self) -> Digest:
        return digest(self.sealed_bytes())

    def signature_valid(self) -> bool:
        if self.sig is None or len(self.sig) != 64:
            return False
        try:
            pk = public_key_of(self.agent)
        except ValueError:
            return False
        return verify_signature(pk, self.signing_bytes(), self.sig)

    @classmethod
    def from_value(cls, v: object) -> "LogEntry":
        if not isinstance(v, dict):
            raise ParseError("entry must be a map")
        if set(v) != set(ENTRY_FIELDS):
            raise ParseError(f"entry fields differ from schema: {sorted(set(v) ^ set(ENTRY_FIELDS))}")
        if v["v"] != SCHEMA_VERSION or type(v["v"]) is not int:
            raise ParseError(f"unsupported schema version {v['v']!r}")
        if not is_did(v["agent"]):
            raise ParseError(f"agent is not a did:ttk identifier: {v['agent']!r}")
        for name in ("seq", "ts_ms"):
            if type(v[name]) is not int:
                raise ParseError(f"{name} must be an integer")
        if v["seq"] < 1:
            raise ParseError("seq must be >= 1")
        if not isinstance(v["action"], str) or v["anchor_class"] not in ANCHOR_CLASSES:
            raise ParseError("bad action or anchor_class")
        if not isinstance(v["params"], dict) or not isinstance(v["ctx"], dict):
            raise ParseError("params and ctx must be maps")
        for name in ("inputs", "outputs", "refs"):
            if not isinstance(v[name], list):
                raise ParseError(f"{name} must be a list")
        if not isinstance(v["sig"], str) or not _SIG_HEX.fullmatch(v["sig"]):
            raise ParseError("sig must be 128 lowercase hex characters")
        try:
            return cls(
                v=v["v"],
                agent=v["agent"],
                seq=v["seq"],
                prev=Digest.from_hex(v["prev"]),
                policy=Digest.from_hex(v["policy"]),
                action=v["action"],
                params=v["params"],
                ts_ms=v["ts_ms"],
                ctx=v["ctx"],
                inputs=tuple(Digest.from_hex(d) for d in v["inputs"]),
                outputs=tuple(Digest.from_hex(d) for d in v["outputs"]),
                refs=tuple(EntryRef.from_value(r) for r in v["refs"]),
                anchor_class=v["anchor_class"],
                sig=bytes.fromhex(v["sig"]),
                hash=Digest.from_hex(v["hash"]),
            )
        except CanonicalError as exc:
            raise ParseError(str(exc)) from None

    def to_line(self) -> bytes:
        return canonical_encode(self.to_value()) + b"\n"


class TraceLog:
    """Append-only per-agent log; ``entries[i].seq == i + 1``."""

    def __init__(self, agent: str | None, entries: Sequence[LogEntry] = ()) -> None:
        self.agent = agent
        self._entries: list[LogEntry] = []
        for e in entries:
            self.append(e)

    @classmethod
    def unchecked(cls, agent: str | None, entries: Sequence[LogEntry]) -> "TraceLog":
        """Wrap entries without chain validation, leaving integrity to the auditor."""
        log = cls(agent)
        log._entries = list(entries)
        return log

    @property
    def entries(self) -> tuple[LogEntry, ...]:
        return tuple(self._entries)

    @property
    def last(self) -> LogEntry | None:
        return self._entries[-1] if self._entries else None

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[LogEntry]:
        return iter(self._entries)

    def __getitem__(self, i: int) -> LogEntry:
        return self._entries[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TraceLog):
            return NotImplemented
        return self.agent == other.agent and self._entries == other._entries

    def __repr__(self) -> str:
        return f"TraceLog({self.agent!r}, {len(self)} entries)"

    def append(self, entry: LogEntry) -> None:
        if self.agent is None:
            self.agent = entry.agent
        if entry.agent != self.agent:
            raise ChainBreak(f"entry agent {entry.agent} differs from log agent {self.agent}")
        if entry.sig is None or entry.hash is None:
            raise BadSignature("entry is not sealed")
        if entry.compute_hash() != entry.hash:
            raise HashMismatch(f"seq {entry.seq}: stored hash does not match content")
        last = self.last
        expected_seq = last.seq + 1 if last else 1
        if entry.seq != expected_seq:
            raise SeqGap(f"expected seq {expected_seq}, got {entry.seq}")
        expected_prev = last.hash if last else ZERO_DIGEST
        if entry.prev != expected_prev:
            raise ChainBreak(f"seq {entry.seq}: prev does not match predecessor hash")
        if last and entry.ts_ms < last.ts_ms:
            raise NonMonotonicTimestamp(f"seq {entry.seq}: ts_ms {entry.ts_ms} < {last.ts_ms}")
        if not entry.signature_valid():
            raise BadSignature(f"seq {entry.seq}: signature does not verify")
        self._entries.append(entry)


def build_entry(
    log: TraceLog,
    policy: Digest,
    action: str,
    params: dict,
    ts_ms: int,
    *,
    ctx: dict | None = None,
    inputs: Sequence[Digest] = (),
    outputs: Sequence[Digest] = (),
    refs: Sequence[EntryRef] = (),
    anchor_class: str = "routine",
    agent: str | None = None,
) -> LogEntry:
    """Next unsigned entry for ``log``: seq and prev follow the current tail."""
    agent = agent or log.agent
    if agent is None or (log.agent is not None and agent != log.agent):
        raise ValueError("entry agent must match the log's agent")
    if anchor_class not in ANCHOR_CLASSES:
        raise ValueError(f"anchor_class must be one of {ANCHOR_CLASSES}")
    last = log.last
    if last is not None and ts_ms < last.ts_ms:
        raise NonMonotonicTimestamp(f"ts_ms {ts_ms} precedes predecessor {last.ts_ms}")
    entry = LogEntry(
        agent=agent,
        seq=last.seq + 1 if last else 1,
        prev=last.hash if last else ZERO_DIGEST,
        policy=Digest(policy),
        action=action,
        params=dict(params),
        ts_ms=ts_ms,
        ctx=dict(ctx or {}),
        inputs=tuple(Digest(d) for d in inputs),
        outputs=tuple(Digest(d) for d in outputs),
        refs=tuple(refs),
        anchor_class=anchor_class,
    )
    entry.signing_bytes()  # raises CanonicalError outside the Value domain
    return entry


def seal_entry(entry: LogEntry, keypair: KeyPair) -> LogEntry:
    if keypair.did != entry.agent:
        raise KeyMismatch(f"keypair does not control {entry.agent}")
    signing = entry.signing_bytes()
    signed = dataclasses.replace(entry, sig=keypair.sign(signing), hash=None)
    object.__setattr__(signed, "_signing_bytes", signing)
    sealed = dataclasses.replace(signed, hash=signed.compute_hash())
    # the hash field is covered by neither encoding, so both carry over
    object.__setattr__(sealed, "_signing_bytes", signing)
    object.__setattr__(sealed, "_sealed_bytes", signed.sealed_bytes())
    return sealed


def log_action(log: TraceLog, keypair: KeyPair, policy: Digest, action: str, params: dict, ts_ms: int, **kw) -> LogEntry:
    """Build, seal and append in one step; returns the sealed entry."""
    entry = seal_entry(build_entry(log, policy, action, params, ts_ms, agent=keypair.did, **kw), keypair)
    log.append(entry)
    return entry


# file form


def export_bytes(log: TraceLog) -> bytes:
    return b"".join(e.to_line() for e in log)


def export_trace(log: TraceLog, destination: str | os.PathLike | BinaryIO) -> int:
    """Write one canonical document per line; returns bytes written."""
    data = export_bytes(log)
    if isinstance(destination, (str, os.PathLike)):
        return atomic_write(Path(destination), data)
    try:
        destination.write(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from None
    return len(data)


def _read_source(source: Source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        try:
            return Path(source).read_bytes()
        except OSError as exc:
            raise IoFailure(f"{source}: {exc}") from None
    return source.read()


def parse_lines(data: bytes) -> list[tuple[int, LogEntry | TraceError]]:
    """Parse each line independently, recomputing its hash.

    Returns ``(line_number, entry_or_error)`` pairs so a caller can keep
    auditing the intact lines of a damaged file.
    """
    if not data:
        return []
    lines = data.split(b"\n")
    truncated = lines[-1] != b""
    if not truncated:
        lines.pop()
    out: list[tuple[int, LogEntry | TraceError]] = []
    for n, raw in enumerate(lines, start=1):
        if truncated and n == len(lines):
            out.append((n, ParseError("last line is truncated (no newline)", line=n)))
            break
        try:
            entry = LogEntry.from_value(canonical_decode(raw))
        except CanonicalError as exc:
            out.append((n, ParseError(str(exc), line=n)))
            continue
        except ParseError as exc:
            out.append((n, ParseError(str(exc), line=n)))
            continue
        if entry.compute_hash() != entry.hash:
            out.append((n, HashMismatch("stored hash does not match content", line=n)))
            continue
        out.append((n, entry))
    return out


def import_trace(source: Source, *, verify_chain: bool = True) -> TraceLog:
    """Parse a trace file, recomputing every hash.

    With ``verify_chain`` (the default) seq continuity, prev links, timestamp
    order and signatures are revalidated too.  Errors carry the 1-based line.
    """
    parsed = parse_lines(_read_source(source))
    log = TraceLog(None)
    entries = []
    for n, item in parsed:
        if isinstance(item, TraceError):
            raise item
        if verify_chain:
            try:
                log.append(item)
            except TraceError as exc:
                raise type(exc)(str(exc), line=n) from None
        else:
            entries.append(item)
    if not verify_chain:
        return TraceLog.unchecked(entries[0].agent if entries else None, entries)
    return log
