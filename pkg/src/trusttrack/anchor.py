"""Merkle batching of entry hashes and anchoring of batch roots on the ledger.

Tree rules: leaf node = H(0x00 || entry_hash), interior = H(0x01 || left ||
right), and a level with an odd node count duplicates its last node.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

from .canonical import LEAF_TAG, NODE_TAG, CanonicalError, Digest
from .errors import EmptyBatch, IndexOutOfRange, IoFailure, LedgerAppendFailure
from .identity import KeyPair, is_did, sign_value, verify_value
from .ledger import Ledger
from .trace import LogEntry

MAX_BATCH = 1 << 20

LEFT = "left"
RIGHT = "right"


# Inner hashing stays on plain bytes; results are wrapped as Digest on the way out.
_LEAF_PREFIX = bytes([LEAF_TAG])
_NODE_PREFIX = bytes([NODE_TAG])


def _leaf(h: bytes) -> bytes:
    return hashlib.sha256(_LEAF_PREFIX + h).digest()


def _node(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(_NODE_PREFIX + left + right).digest()


def _levels(leaves: Sequence[bytes]) -> list[list[bytes]]:
    if not leaves:
        raise EmptyBatch("a Merkle tree needs at least one leaf")
    level = [_leaf(h) for h in leaves]
    levels = [level]
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
            levels[-1] = level
        level = [_node(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(level)
    return levels


def merkle_root(leaves: Sequence[bytes]) -> Digest:
    return Digest(_levels(leaves)[-1][0])


@dataclass(frozen=True)
class ProofStep:
    hash: Digest
    side: str  # which side the sibling sits on

    def to_value(self) -> dict:
        return {"hash": str(self.hash), "side": self.side}


@dataclass(frozen=True)
class MerkleProof:
    leaf_hash: Digest
    leaf_index: int
    path: tuple[ProofStep, ...]
    root: Digest

    def to_value(self) -> dict:
        return {
            "leaf_hash": str(self.leaf_hash),
            "leaf_index": self.leaf_index,
            "path": [s.to_value() for s in self.path],
            "root": str(self.root),
        }

    @classmethod
    def from_value(cls, v: dict) -> "MerkleProof":
        steps = []
        for s in v["path"]:
            if s["side"] not in (LEFT, RIGHT):
                raise CanonicalError(f"bad proof side {s['side']!r}")
            steps.append(ProofStep(Digest.from_hex(s["hash"]), s["side"]))
        return cls(Digest.from_hex(v["leaf_hash"]), v["leaf_index"], tuple(steps), Digest.from_hex(v["root"]))


def merkle_prove(leaves: Sequence[bytes], index: int) -> MerkleProof:
    if not 0 <= index < len(leaves):
        raise IndexOutOfRange(f"leaf index {index} outside 0..{len(leaves) - 1}")
    return _prove(_levels(leaves), leaves, index)


def merkle_prove_all(leaves: Sequence[bytes]) -> list[MerkleProof]:
    """Proofs for every leaf, building the tree once."""
    levels = _levels(leaves)
    return [_prove(levels, leaves, i) for i in range(len(leaves))]


def _prove(levels: list[list[bytes]], leaves: Sequence[bytes], index: int) -> MerkleProof:
    path = []
    i = index
    for level in levels[:-1]:
        if i % 2:
            path.append(ProofStep(Digest(level[i - 1]), LEFT))
        else:
            path.append(ProofStep(Digest(level[i + 1]), RIGHT))
        i //= 2
    return MerkleProof(Digest(leaves[index]), index, tuple(path), Digest(levels[-1][0]))


def merkle_verify(proof: MerkleProof) -> bool:
    """Recompute the root from the leaf and path.

    Each step's side must agree with the bits of ``leaf_index``.  Without
    that, flipping the side of a step whose sibling is the padded copy of
    the node itself would still reproduce the root.
    """
    index, path = proof.leaf_index, proof.path
    if type(index) is not int or not 0 <= index < 1 << len(path):
        return False
    sha256 = hashlib.sha256
    acc = sha256(_LEAF_PREFIX + proof.leaf_hash).digest()
    for step in path:
        if index & 1:
            if step.side != LEFT:
                return False
            acc = sha256(_NODE_PREFIX + step.hash + acc).digest()
        else:
            if step.side != RIGHT:
                return False
            acc = sha256(_NODE_PREFIX + acc + step.hash).digest()
        index >>= 1
    return acc == proof.root


# anchoring strategies


@dataclass(frozen=True)
class EveryN:
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("EveryN.n must be >= 1")


@dataclass(frozen=True)
class CriticalImmediate:
    fallback_n: int

    def __post_init__(self) -> None:
        if self.fallback_n < 1:
            raise ValueError("CriticalImmediate.fallback_n must be >= 1")


@dataclass(frozen=True)
class Manual:
    pass


AnchorPolicy = Union[EveryN, CriticalImmediate, Manual]


def parse_strategy(text: str) -> AnchorPolicy:
    """``every-n:N``, ``critical`` / ``critical:N`` (routine fallback), or ``manual``."""
    name, _, arg = text.partition(":")
    try:
        if name == "every-n" and arg:
            return EveryN(int(arg))
        if name == "critical":
            return CriticalImmediate(int(arg) if arg else 16)
        if name == "manual" and not arg:
            return Manual()
    except ValueError:
        pass
    raise ValueError(f"unknown anchoring strategy {text!r}")


@dataclass(frozen=True)
class Coverage:
    agent: str
    first_seq: int
    last_seq: int

    def to_value(self) -> dict:
        return {"agent": self.agent, "first_seq": self.first_seq, "last_seq": self.last_seq}

    def keys(self) -> list[tuple[str, int]]:
        return [(self.agent, s) for s in range(self.first_seq, self.last_seq + 1)]


def coverage_of(entries: Sequence[LogEntry]) -> tuple[Coverage, ...]:
    """Contiguous per-agent seq runs, in leaf order."""
    runs: list[Coverage] = []
    for e in entries:
        last = runs[-1] if runs else None
        if last and last.agent == e.agent and last.last_seq + 1 == e.seq:
            runs[-1] = Coverage(e.agent, last.first_seq, e.seq)
        else:
            runs.append(Coverage(e.agent, e.seq, e.seq))
    return tuple(runs)


@dataclass(frozen=True)
class BatchAnchor:
    batch_id: str
    submitter: str
    merkle_root: Digest
    leaf_count: int
    coverage: tuple[Coverage, ...]
    ts_ms: int
    sig: bytes
    ledger_index: int | None = None

    def unsigned_value(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "submitter": self.submitter,
            "merkle_root": str(self.merkle_root),
            "leaf_count": self.leaf_count,
            "coverage": [c.to_value() for c in self.coverage],
            "ts_ms": self.ts_ms,
        }

    def body(self) -> dict:
        return {**self.unsigned_value(), "sig": self.sig.hex()}

    def keys(self) -> list[tuple[str, int]]:
        return [k for c in self.coverage for k in c.keys()]

    def verifies(self) -> bool:
        return (
            len(self.sig) == 64
            and self.leaf_count == len(self.keys())
            and verify_value(self.submitter, self.unsigned_value(), self.sig)
        )

    @classmethod
    def from_record(cls, body: dict, ledger_index: int) -> "BatchAnchor":
        fields = {"batch_id", "submitter", "merkle_root", "leaf_count", "coverage", "ts_ms", "sig"}
        if not isinstance(body, dict) or set(body) != fields:
            raise CanonicalError("anchor body fields differ from schema")
        try:
            coverage = tuple(
                Coverage(c["agent"], c["first_seq"], c["last_seq"]) for c in body["coverage"]
            )
            ints = [body["leaf_count"], body["ts_ms"]] + [x for c in coverage for x in (c.first_seq, c.last_seq)]
            if not all(type(x) is int for x in ints) or not all(is_did(c.agent) for c in coverage):
                raise CanonicalError("malformed anchor body")
            if any(c.first_seq < 1 or c.last_seq < c.first_seq for c in coverage):
                raise CanonicalError("anchor coverage has an empty or invalid range")
            span = sum(c.last_seq - c.first_seq + 1 for c in coverage)
            if span != body["leaf_count"] or span > MAX_BATCH:
                raise CanonicalError("anchor coverage does not match leaf_count")
            return cls(
                body["batch_id"],
                body["submitter"],
                Digest.from_hex(body["merkle_root"]),
                body["leaf_count"],
                coverage,
                body["ts_ms"],
                bytes.fromhex(body["sig"]),
                ledger_index,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CanonicalError(f"malformed anchor body: {exc}") from None


def plan_batches(pending: Iterable[LogEntry], policy: AnchorPolicy) -> list[list[LogEntry]]:
    """Group pending entries into batches; entries left out stay pending."""
    ordered = sorted(pending, key=lambda e: (e.agent, e.seq))
    if isinstance(policy, Manual):
        return [ordered] if ordered else []
    if isinstance(policy, EveryN):
        full = len(ordered) - len(ordered) % policy.n
        return [ordered[i : i + policy.n] for i in range(0, full, policy.n)]
    if isinstance(policy, CriticalImmediate):
        batches, routine = [], []
        for e in ordered:
            if e.anchor_class == "critical":
                batches.append([e])
            else:
                routine.append(e)
                if len(routine) == policy.fallback_n:
                    batches.append(routine)
                    routine = []
        return batches
    raise TypeError(f"unknown anchor policy {policy!r}")


def submit_batch(entries: Sequence[LogEntry], submitter: KeyPair, now_ms: int, ledger: Ledger) -> BatchAnchor:
    """Commit the Merkle root of ``entries`` (in the given order) as an anchor record."""
    if any(e.hash is None for e in entries):
        raise ValueError("only sealed entries can be anchored")
    root = merkle_root([e.hash for e in entries])
    draft = BatchAnchor(root.hex()[:16], submitter.did, root, len(entries), coverage_of(entries), now_ms, b"")
    anchor = dataclasses.replace(draft, sig=sign_value(submitter, draft.unsigned_value()))
    try:
        rec = ledger.append("anchor", anchor.body(), now_ms)
    except IoFailure as exc:
        raise LedgerAppendFailure(str(exc)) from None
    return dataclasses.replace(anchor, ledger_index=rec.idx)


def flush_batches(
    pending: list[LogEntry], policy: AnchorPolicy, submitter: KeyPair, now_ms: int, ledger: Ledger
) -> list[BatchAnchor]:
    """Anchor whatever ``policy`` says is ready, removing those entries from ``pending``."""
    anchors = []
    for batch in plan_batches(pending, policy):
        anchors.append(submit_batch(batch, submitter, now_ms, ledger))
        done = {id(e) for e in batch}
        pending[:] = [e for e in pending if id(e) not in done]
    return anchors


def anchors_from_ledger(ledger: Ledger, upto: int | None = None) -> list[BatchAnchor]:
    """Well-formed, correctly signed anchor records in ledger order."""
    out = []
    records = ledger.records()
    for rec in records[:upto] if upto is not None else records:
        if rec.kind != "anchor":
            continue
        try:
            anchor = BatchAnchor.from_record(rec.body, rec.idx)
        except CanonicalError:
            continue
        if anchor.verifies():
            out.append(anchor)
    return out


# audit-side lookup

ANCHORED = "Anchored"
UNANCHORED = "Unanchored"
INCOMPLETE = "BatchIncomplete"
ROOT_MISMATCH = "RootMismatch"


@dataclass(frozen=True)
class AnchorStatus:
    state: str
    ledger_index: int | None = None
    proof: MerkleProof | None = None


class AnchorIndex:
    """Maps entries to the anchor that covers them, with a fresh inclusion proof.

    A batch whose covered entries are not all available cannot be rebuilt,
    so its members are reported as ``BatchIncomplete``; a rebuilt root that
    differs from the anchored one is ``RootMismatch``.
    """

    def __init__(self, anchors: Iterable[BatchAnchor], entries: Mapping[tuple[str, int], LogEntry]) -> None:
        self._status: dict[tuple[str, int], AnchorStatus] = {}
        for anchor in anchors:
            keys = anchor.keys()
            members = [entries.get(k) for k in keys]
            if any(m is None for m in members):
                self._mark(keys, AnchorStatus(INCOMPLETE, anchor.ledger_index))
                continue
            proofs = merkle_prove_all([m.hash for m in members])
            if proofs[0].root != anchor.merkle_root:
                self._mark(keys, AnchorStatus(ROOT_MISMATCH, anchor.ledger_index))
                continue
            for k, proof in zip(keys, proofs):
                self._mark([k], AnchorStatus(ANCHORED, anchor.ledger_index, proof))

    def _mark(self, keys: Iterable[tuple[str, int]], status: AnchorStatus) -> None:
        for k in keys:
            if self._status.get(k, AnchorStatus(UNANCHORED)).state != ANCHORED:
                self._status[k] = status

    def status(self, entry: LogEntry) -> AnchorStatus:
        st = self._status.get(entry.key)
        if st is None:
            return AnchorStatus(UNANCHORED)
        if st.state == ANCHORED and st.proof.leaf_hash != entry.hash:
            return AnchorStatus(ROOT_MISMATCH, st.ledger_index)
        return st

    def covered_keys(self) -> set[tuple[str, int]]:
        return set(self._status)
