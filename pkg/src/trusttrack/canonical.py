"""Canonical byte encoding and digests.

Every signature and hash in the package is computed over the output of
:func:`canonical_encode`.  The encoding is JSON restricted to integers,
strings, booleans, null, lists and string-keyed maps, with keys sorted by
UTF-8 bytes, no whitespace, and a minimal escape set.  Floats are rejected.
"""

from __future__ import annotations

import hashlib
import json
import re
from typing import Any, Iterable, Union

from .errors import CanonicalError

Value = Union[None, bool, int, str, list, dict]

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1

LEAF_TAG = 0x00
NODE_TAG = 0x01

_HEX64 = re.compile(r"[0-9a-f]{64}")
_NEEDS_ESCAPE = re.compile(r'[\x00-\x1f"\\]')
_SHORT_ESCAPES = {'"': '\\"', "\\": "\\\\", "\n": "\\n", "\r": "\\r", "\t": "\\t"}


class Digest(bytes):
    """A 32-byte SHA-256 digest; ``str()`` renders 64 lowercase hex chars."""

    __slots__ = ()

    def __new__(cls, raw: bytes = bytes(32)) -> "Digest":
        if len(raw) != 32:
            raise CanonicalError(f"digest must be 32 bytes, got {len(raw)}")
        return super().__new__(cls, raw)

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        if not isinstance(text, str) or not _HEX64.fullmatch(text):
            raise CanonicalError(f"not a 64-char lowercase hex digest: {text!r}")
        return cls(bytes.fromhex(text))

    def __str__(self) -> str:
        return self.hex()

    def __repr__(self) -> str:
        return f"Digest({self.hex()[:16]}…)"


ZERO_DIGEST = Digest(bytes(32))


def _escape(s: str) -> str:
    def sub(m: re.Match) -> str:
        ch = m.group(0)
        return _SHORT_ESCAPES.get(ch) or f"\\u{ord(ch):04x}"

    return _NEEDS_ESCAPE.sub(sub, s)


def _emit(v: Any, out: list) -> None:
    # bool before int: bool is an int subclass
    if v is None:
        out.append("null")
    elif v is True:
        out.append("true")
    elif v is False:
        out.append("false")
    elif type(v) is int:
        if not INT_MIN <= v <= INT_MAX:
            raise CanonicalError(f"integer out of 64-bit range: {v}")
        out.append(str(v))
    elif type(v) is str:
        out.append('"')
        out.append(_escape(v) if _NEEDS_ESCAPE.search(v) else v)
        out.append('"')
    elif isinstance(v, (list, tuple)):
        out.append("[")
        for i, item in enumerate(v):
            if i:
                out.append(",")
            _emit(item, out)
        out.append("]")
    elif isinstance(v, dict):
        for k in v:
            if type(k) is not str:
                raise CanonicalError(f"map key must be a string: {k!r}")
        out.append("{")
        # code-point order equals UTF-8 byte order for scalar values
        for i, k in enumerate(sorted(v)):
            if i:
                out.append(",")
            out.append('"')
            out.append(_escape(k) if _NEEDS_ESCAPE.search(k) else k)
            out.append('":')
            _emit(v[k], out)
        out.append("}")
    elif isinstance(v, float):
        raise CanonicalError("floating-point values are not allowed")
    else:
        raise CanonicalError(f"unsupported value type: {type(v).__name__}")


def canonical_encode(v: Value) -> bytes:
    """Encode ``v`` deterministically.

    >>> canonical_encode({"b": 2, "a": 1})
    b'{"a":1,"b":2}'
    """
    out: list[str] = []
    _emit(v, out)
    try:
        return "".join(out).encode("utf-8")
    except UnicodeEncodeError as exc:  # lone surrogates
        raise CanonicalError(f"text is not valid Unicode: {exc}") from None


def _reject_float(text: str) -> Any:
    raise CanonicalError(f"floating-point literal not allowed: {text}")


def _reject_constant(text: str) -> Any:
    raise CanonicalError(f"non-finite literal not allowed: {text}")


def _unique_pairs(pairs: list) -> dict:
    d = dict(pairs)
    if len(d) != len(pairs):
        raise CanonicalError("duplicate map key")
    return d


def loads(data: bytes | str) -> Value:
    """Parse interchange JSON into a Value (any key order or spacing)."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CanonicalError(f"invalid UTF-8: {exc}") from None
    try:
        return json.loads(
            data,
            parse_float=_reject_float,
            parse_constant=_reject_constant,
            object_pairs_hook=_unique_pairs,
        )
    except json.JSONDecodeError as exc:
        raise CanonicalError(f"malformed document: {exc}") from None
    except RecursionError:
        raise CanonicalError("document nested too deeply") from None


def canonical_decode(data: bytes) -> Value:
    """Parse canonical bytes, rejecting anything that is not byte-exact canonical."""
    value = loads(data)
    if canonical_encode(value) != data:
        raise CanonicalError("document is not in canonical form")
    return value


def digest(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def domain_digest(tag: int, parts: Iterable[bytes]) -> Digest:
    h = hashlib.sha256(bytes([tag]))
    for p in parts:
        h.update(p)
    return Digest(h.digest())


def value_digest(v: Value) -> Digest:
    return digest(canonical_encode(v))


def is_hex_digest(text: Any) -> bool:
    return isinstance(text, str) and _HEX64.fullmatch(text) is not None
