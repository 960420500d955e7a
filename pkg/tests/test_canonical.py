from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strategies import values
from trusttrack.canonical import (
    INT_MAX,
    INT_MIN,
    CanonicalError,
    Digest,
    canonical_decode,
    canonical_encode,
    digest,
    domain_digest,
    loads,
)


def test_golden_encoding():
    v = {"b": [1, True, None, -7], "a": "é\n\u0001\"\\", "": {}}
    assert canonical_encode(v) == '{"":{},"a":"é\\n\\u0001\\"\\\\","b":[1,true,null,-7]}'.encode()


def test_keys_sort_by_code_point():
    # U+FFFF sorts before U+10000 in code-point order even though UTF-16 would disagree
    v = {"\U00010000": 1, "￿": 2, "a": 3, "B": 4}
    assert canonical_encode(v) == '{"B":4,"a":3,"￿":2,"\U00010000":1}'.encode()


def test_control_characters_use_lowercase_unicode_escapes():
    assert canonical_encode("\x08\x0c\x1f\t\r") == b'"\\u0008\\u000c\\u001f\\t\\r"'


@pytest.mark.parametrize("bad", [1.5, float("nan"), INT_MAX + 1, INT_MIN - 1, {1: "x"}, "\ud800", b"raw", object()])
def test_rejects_values_outside_domain(bad):
    with pytest.raises(CanonicalError):
        canonical_encode(bad)


def test_int_bounds_accepted():
    assert canonical_decode(canonical_encode([INT_MIN, INT_MAX])) == [INT_MIN, INT_MAX]


@pytest.mark.parametrize(
    "text",
    [
        b'{"b":1,"a":2}',
        b'{"a": 1}',
        b'{"a":1} ',
        b'"\\u001F"',
        b'"\\/"',
        b"-0",
        b"01",
        b"1.0",
        b"1e3",
        b'"\\u0041"',
        b'{"a":1,"a":1}',
        b"NaN",
        b"\xff",
    ],
)
def test_strict_decode_rejects_noncanonical(text):
    with pytest.raises(CanonicalError):
        canonical_decode(text)


def test_loads_is_lenient_about_layout_only():
    assert loads(b'{ "b": 1,\n "a": [true] }') == {"a": [True], "b": 1}
    with pytest.raises(CanonicalError):
        loads(b'{"x": 0.5}')
    with pytest.raises(CanonicalError):
        loads(b'{"x": 1, "x": 2}')


def test_digest_hex_roundtrip():
    d = digest(b"abc")
    assert str(d) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert Digest.from_hex(str(d)) == d
    for bad in ("AB" * 32, "ab" * 31, "zz" * 32):
        with pytest.raises(ValueError):
            Digest.from_hex(bad)


def test_domain_separation():
    assert domain_digest(0, [b"x"]) != domain_digest(1, [b"x"])
    assert domain_digest(0, [b"x"]) == digest(b"\x00x")


@settings(max_examples=300)
@given(values)
def test_roundtrip_and_determinism(v):
    enc = canonical_encode(v)
    assert canonical_decode(enc) == v
    assert canonical_encode(canonical_decode(enc)) == enc


@settings(max_examples=200)
@given(st.dictionaries(st.text(max_size=4), st.integers(-5, 5), max_size=8), st.randoms())
def test_insertion_order_irrelevant(d, rnd):
    items = list(d.items())
    rnd.shuffle(items)
    assert canonical_encode(dict(items)) == canonical_encode(d)


@settings(max_examples=200)
@given(values.filter(lambda v: "\x08" not in json.dumps(v) and "\x0c" not in json.dumps(v)))
def test_agrees_with_stdlib_compact_sorted_json(v):
    # independent encoder; only \b and \f escapes differ by design
    ref = json.dumps(v, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    if "\\b" in ref or "\\f" in ref:
        return
    assert canonical_encode(v) == ref.encode("utf-8")


def test_single_byte_mutations_never_decode_to_the_same_value():
    rnd = random.Random(5)
    v = {"agent": "did:ttk:" + "ab" * 32, "n": [1, -2, 3], "s": "tab\there", "t": True}
    enc = canonical_encode(v)
    for pos in range(len(enc)):
        mutated = bytearray(enc)
        mutated[pos] ^= rnd.randrange(1, 256)
        try:
            assert canonical_decode(bytes(mutated)) != v
        except CanonicalError:
            pass
