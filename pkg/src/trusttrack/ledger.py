"""Hash-chained append-only ledger with in-memory and file backends.

Each record carries the ``rhash`` of its predecessor, so editing any byte of
a stored record breaks the chain at or before that record.  Truncation of the
tail is not detectable from the file alone; publish :meth:`Ledger.checkpoint`
output somewhere the ledger owner cannot rewrite.
"""

from __future__ import annotations

import contextlib
import fcntl
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .canonical import (
    ZERO_DIGEST,
    Digest,
    canonical_decode,
    canonical_encode,
    digest,
)
from .errors import CanonicalError, CorruptLedger, IndexOutOfRange, IoFailure, LedgerAppendFailure

RECORD_KINDS = ("identity", "revocation", "policy", "anchor")
_FIELDS = frozenset({"idx", "prev", "ts_ms", "kind", "body", "rhash"})


@dataclass(frozen=True)
class LedgerRecord:
    idx: int
    prev: Digest
    ts_ms: int
    kind: str
    body: dict
    rhash: Digest

    def content_value(self) -> dict:
        return {
            "idx": self.idx,
            "prev": str(self.prev),
            "ts_ms": self.ts_ms,
            "kind": self.kind,
            "body": self.body,
        }

    def compute_rhash(self) -> Digest:
        return digest(canonical_encode(self.content_value()))

    def to_value(self) -> dict:
        return {**self.content_value(), "rhash": str(self.rhash)}

    def to_line(self) -> bytes:
        return canonical_encode(self.to_value()) + b"\n"

    @classmethod
    def from_value(cls, v: object) -> "LedgerRecord":
        if not isinstance(v, dict) or set(v) != _FIELDS:
            raise CorruptLedger("record does not have the ledger record fields")
        if type(v["idx"]) is not int or v["idx"] < 0 or type(v["ts_ms"]) is not int:
            raise CorruptLedger("idx/ts_ms must be non-negative integers")
        if v["kind"] not in RECORD_KINDS or not isinstance(v["body"], dict):
            raise CorruptLedger(f"bad record kind or body: {v['kind']!r}")
        try:
            prev = Digest.from_hex(v["prev"])
            rhash = Digest.from_hex(v["rhash"])
        except CanonicalError as exc:
            raise CorruptLedger(str(exc)) from None
        return cls(v["idx"], prev, v["ts_ms"], v["kind"], v["body"], rhash)


def _first_fault(records: list[LedgerRecord]) -> tuple[int, str] | None:
    prev = ZERO_DIGEST
    for i, rec in enumerate(records):
        if rec.idx != i:
            return i, "IndexMismatch"
        if rec.prev != prev:
            return i, "PrevMismatch"
        if rec.compute_rhash() != rec.rhash:
            return i, "RecordHashMismatch"
        prev = rec.rhash
    return None


class Ledger:
    """Single writer, many readers.  Subclasses persist records."""

    def __init__(self) -> None:
        self._records: list[LedgerRecord] = []
        self._mutex = threading.Lock()

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[LedgerRecord]:
        return iter(list(self._records))

    def records(self) -> list[LedgerRecord]:
        """All records as stored, without integrity checks."""
        return list(self._records)

    def append(self, kind: str, body: dict, ts_ms: int) -> LedgerRecord:
        if kind not in RECORD_KINDS:
            raise LedgerAppendFailure(f"unknown record kind {kind!r}")
        with self._mutex, self._write_guard():
            idx = len(self._records)
            prev = self._records[-1].rhash if self._records else ZERO_DIGEST
            draft = LedgerRecord(idx, prev, ts_ms, kind, body, ZERO_DIGEST)
            try:
                rhash = draft.compute_rhash()
            except CanonicalError as exc:
                raise LedgerAppendFailure(f"record body is not encodable: {exc}") from None
            rec = LedgerRecord(idx, prev, ts_ms, kind, body, rhash)
            self._persist(rec)
            self._records.append(rec)
            return rec

    def get(self, idx: int) -> LedgerRecord:
        if not 0 <= idx < len(self._records):
            raise IndexOutOfRange(f"ledger index {idx} outside 0..{len(self._records) - 1}")
        rec = self._records[idx]
        if rec.idx != idx or rec.compute_rhash() != rec.rhash:
            raise CorruptLedger(f"record {idx} fails its hash check")
        return rec

    def first_fault(self) -> tuple[int, str] | None:
        """(index, reason) of the first record breaking the chain, or None."""
        return _first_fault(self._records)

    def verify_chain(self) -> int | None:
        fault = self.first_fault()
        return None if fault is None else fault[0]

    def checkpoint(self) -> str:
        if not self._records:
            return f"idx:-1 rhash:{ZERO_DIGEST}"
        last = self._records[-1]
        return f"idx:{last.idx} rhash:{last.rhash}"

    def _write_guard(self) -> contextlib.AbstractContextManager:
        return contextlib.nullcontext()

    def _persist(self, rec: LedgerRecord) -> None:
        pass


class MemoryLedger(Ledger):
    pass


class FileLedger(Ledger):
    """Newline-delimited canonical records; appends never rewrite earlier bytes.

    Concurrent processes serialize appends through an advisory ``<path>.lock``.
    """

    def __init__(self, path: str | os.PathLike) -> None:
        super().__init__()
        self.path = Path(path)
        self._offset = 0
        if self.path.exists():
            self._sync()

    def _sync(self) -> None:
        try:
            with open(self.path, "rb") as fh:
                fh.seek(self._offset)
                tail = fh.read()
        except OSError as exc:
            raise IoFailure(f"{self.path}: {exc}") from None
        if not tail:
            return
        if not tail.endswith(b"\n"):
            raise CorruptLedger(f"{self.path}: last record is truncated")
        lineno = len(self._records)
        for raw in tail[:-1].split(b"\n"):
            lineno += 1
            try:
                rec = LedgerRecord.from_value(canonical_decode(raw))
            except (CanonicalError, CorruptLedger) as exc:
                raise CorruptLedger(f"{self.path}: line {lineno}: {exc}") from None
            self._records.append(rec)
        self._offset += len(tail)

    @contextlib.contextmanager
    def _write_guard(self) -> Iterator[None]:
        lock_path = self.path.with_name(self.path.name + ".lock")
        try:
            lock_fh = open(lock_path, "a")
        except OSError as exc:
            raise IoFailure(f"{lock_path}: {exc}") from None
        with lock_fh:
            fcntl.flock(lock_fh, fcntl.LOCK_EX)
            try:
                if self.path.exists():
                    self._sync()  # pick up appends by other writers
                yield
            finally:
                fcntl.flock(lock_fh, fcntl.LOCK_UN)

    def _persist(self, rec: LedgerRecord) -> None:
        line = rec.to_line()
        try:
            fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                os.write(fd, line)
                os.fsync(fd)
            finally:
                os.close(fd)
        except OSError as exc:
            raise IoFailure(f"{self.path}: {exc}") from None
        self._offset += len(line)


def verify_chain(ledger: Ledger) -> int | None:
    """First index whose rhash or prev link fails, or None when intact."""
    return ledger.verify_chain()
