"""Exception hierarchy.

Class names double as machine-readable reason codes in audit findings and
CLI diagnostics, so they are kept short and stable.
"""

from __future__ import annotations


class TrustTrackError(Exception):
    """Base class for every error raised by this package."""

    @property
    def code(self) -> str:
        return type(self).__name__


# canonical
class CanonicalError(TrustTrackError, ValueError):
    """Value outside the canonical domain, or bytes that are not canonical."""


# identity
class MalformedSeed(TrustTrackError, ValueError):
    pass


class MalformedKey(TrustTrackError, ValueError):
    pass


class MalformedDid(TrustTrackError, ValueError):
    pass


class MalformedInput(TrustTrackError, ValueError):
    pass


class KeyMismatch(TrustTrackError):
    pass


class AlreadyRegistered(TrustTrackError):
    pass


class AlreadyRevoked(TrustTrackError):
    pass


class RevokedIdentity(TrustTrackError):
    pass


class NotFound(TrustTrackError, LookupError):
    pass


class UnknownAgent(TrustTrackError):
    pass


# policy
class InvalidPolicy(TrustTrackError, ValueError):
    def __init__(self, message: str, errors: list | None = None) -> None:
        super().__init__(message)
        self.errors = list(errors or [])


class DigestMismatch(TrustTrackError):
    pass


class PolicyHashMismatch(TrustTrackError):
    pass


class UnorderedInput(TrustTrackError, ValueError):
    pass


# trace
class TraceError(TrustTrackError):
    """Trace integrity failure; ``line`` is set when raised while importing."""

    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ParseError(TraceError):
    pass


class HashMismatch(TraceError):
    pass


class ChainBreak(TraceError):
    pass


class SeqGap(TraceError):
    pass


class NonMonotonicTimestamp(TraceError):
    pass


class BadSignature(TraceError):
    pass


class IoFailure(TrustTrackError, OSError):
    pass


# anchor / ledger
class EmptyBatch(TrustTrackError, ValueError):
    pass


class IndexOutOfRange(TrustTrackError, IndexError):
    pass


class LedgerAppendFailure(TrustTrackError):
    pass


class CorruptLedger(TrustTrackError):
    pass


# scenarios
class InvalidSpec(TrustTrackError, ValueError):
    pass
