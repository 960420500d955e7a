from __future__ import annotations

import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import GOOD_CTX, GOOD_PARAMS, T0, keypair, policy_for, registered
from trusttrack.canonical import canonical_encode, digest, loads
from trusttrack.errors import (
    DigestMismatch,
    InvalidPolicy,
    KeyMismatch,
    NotFound,
    PolicyHashMismatch,
    RevokedIdentity,
    UnknownAgent,
    UnorderedInput,
)
from trusttrack.identity import revoke_identity, sign_value
from trusttrack.ledger import MemoryLedger
from trusttrack.policy import (
    IntRange,
    OneOf,
    PolicyDocument,
    PolicyStore,
    RateLimit,
    check_action,
    check_rate,
    commit_policy,
    load_policy,
    lookup_policy,
    policies_from_ledger,
    validate_policy,
)


@dataclasses.dataclass
class E:
    """Minimal stand-in for a log entry."""

    policy: bytes
    action: str = "summarize"
    params: dict = dataclasses.field(default_factory=lambda: dict(GOOD_PARAMS))
    ts_ms: int = T0
    ctx: dict = dataclasses.field(default_factory=lambda: dict(GOOD_CTX))
    seq: int = 1
    agent: str = "a"


DID = keypair(1).did


def test_roundtrip_and_hash_stability():
    doc = policy_for(DID)
    v = doc.to_value()
    assert PolicyDocument.from_value(v) == doc
    assert PolicyDocument.from_value(loads(doc.canonical_bytes())).policy_hash == doc.policy_hash
    assert doc.policy_hash == digest(canonical_encode(v))
    # set-valued fields are order-insensitive
    shuffled = dict(v, allowed_actions=list(reversed(v["allowed_actions"])))
    assert PolicyDocument.from_value(shuffled).policy_hash == doc.policy_hash
    assert policy_for(DID, version=2).policy_hash != doc.policy_hash


def test_optional_fields_default():
    v = {k: policy_for(DID).to_value()[k] for k in
         ("policy_id", "agent_did", "version", "allowed_actions", "not_before_ms", "not_after_ms")}
    doc = PolicyDocument.from_value(v)
    assert doc.rate_limits == () and doc.delegated_by is None and doc.parameter_constraints == {}


@pytest.mark.parametrize(
    "mutate",
    [
        lambda v: v.pop("agent_did"),
        lambda v: v.update(extra=1),
        lambda v: v.update(version="1"),
        lambda v: v.update(allowed_actions="summarize"),
        lambda v: v.update(parameter_constraints={"summarize": {"w": {"kind": "regex"}}}),
        lambda v: v.update(rate_limits=[{"window_ms": 1}]),
        lambda v: v.update(delegated_by=5),
    ],
)
def test_from_value_rejects_malformed(mutate):
    v = policy_for(DID).to_value()
    mutate(v)
    with pytest.raises(InvalidPolicy):
        PolicyDocument.from_value(v)


@pytest.mark.parametrize(
    "overrides,code",
    [
        ({"agent_did": "did:web:x"}, "MalformedDid"),
        ({"delegated_by": "nobody"}, "MalformedDid"),
        ({"version": 0}, "InvalidVersion"),
        ({"allowed_actions": frozenset()}, "EmptyActions"),
        ({"not_before_ms": 5, "not_after_ms": 5}, "EmptyValidity"),
        ({"parameter_constraints": {"fly": {"x": IntRange(0, 1)}}}, "UnknownConstraintAction"),
        ({"parameter_constraints": {"summarize": {"x": IntRange(5, 1)}}}, "InvertedRange"),
        ({"parameter_constraints": {"summarize": {"x": OneOf(())}}}, "EmptyOneOf"),
        ({"rate_limits": (RateLimit(0, 1),)}, "InvalidRateLimit"),
    ],
)
def test_validate_policy_issue_codes(overrides, code):
    issues = validate_policy(policy_for(DID, **overrides))
    assert code in {i.code for i in issues}


def test_valid_policy_has_no_issues():
    assert validate_policy(policy_for(DID)) == []


def test_store_roundtrip_and_corruption(tmp_path):
    store = PolicyStore(tmp_path / "store")
    doc = policy_for(DID)
    h = store.put(doc)
    assert h == doc.policy_hash and h in store
    assert lookup_policy(h, store) == doc
    assert PolicyStore(tmp_path / "store").lookup(h) == doc
    path = tmp_path / "store" / f"{h}.json"
    assert path.read_bytes() == doc.canonical_bytes() + b"\n"
    assert load_policy(path) == doc
    path.write_bytes(path.read_bytes().replace(b'"EU"', b'"US"'))
    with pytest.raises(DigestMismatch):
        store.lookup(h)
    with pytest.raises(NotFound):
        store.lookup(digest(b"nothing"))


def test_memory_store():
    store = PolicyStore()
    doc = policy_for(DID)
    store.put(doc)
    assert store.lookup(doc.policy_hash) == doc
    assert store.hashes() == [str(doc.policy_hash)]


def test_commit_policy_flow():
    led = MemoryLedger()
    kp = registered(led, 1)
    store = PolicyStore()
    doc = policy_for(kp.did)
    c = commit_policy(doc, kp, 5, led, store)
    assert c.ledger_index == 1 and c.verifies()
    assert doc.policy_hash in store
    assert policies_from_ledger(led)[(kp.did, str(doc.policy_hash))] == c


def test_commit_policy_errors():
    led = MemoryLedger()
    kp = registered(led, 1)
    with pytest.raises(InvalidPolicy) as exc:
        commit_policy(policy_for(kp.did, version=0), kp, 5, led)
    assert exc.value.errors and exc.value.errors[0].code == "InvalidVersion"
    with pytest.raises(KeyMismatch):
        commit_policy(policy_for(kp.did), keypair(2), 5, led)
    stranger = keypair(3)
    with pytest.raises(UnknownAgent):
        commit_policy(policy_for(stranger.did), stranger, 5, led)
    revoke_identity(kp.did, kp, "retired", 6, led)
    with pytest.raises(RevokedIdentity):
        commit_policy(policy_for(kp.did), kp, 7, led)


def test_forged_commitment_ignored():
    led = MemoryLedger()
    victim = registered(led, 1)
    doc = policy_for(victim.did)
    body = {"policy_hash": str(doc.policy_hash), "agent_did": victim.did, "committed_at_ms": 1}
    led.append("policy", {**body, "signature": sign_value(keypair(9), body).hex()}, 1)
    assert policies_from_ledger(led) == {}


# conformance: one fixture per violation kind


DOC = policy_for(DID)


def kinds(**kw):
    return [(v.kind, v.constraint) for v in check_action(DOC, E(DOC.policy_hash, **kw))]


def test_conformant_entry():
    assert kinds() == []


@pytest.mark.parametrize(
    "kw,expected",
    [
        ({"action": "delete"}, [("ActionNotAllowed", None)]),
        ({"params": dict(GOOD_PARAMS, words=501)}, [("ParamViolation", "int_range")]),
        ({"params": dict(GOOD_PARAMS, words="many")}, [("ParamViolation", "int_range")]),
        ({"params": dict(GOOD_PARAMS, words=True)}, [("ParamViolation", "int_range")]),
        ({"params": dict(GOOD_PARAMS, style="epic")}, [("ParamViolation", "one_of")]),
        ({"params": dict(GOOD_PARAMS, title="much too long")}, [("ParamViolation", "max_length")]),
        ({"params": {k: v for k, v in GOOD_PARAMS.items() if k != "source"}}, [("ParamViolation", "required")]),
        ({"ts_ms": T0 * 10}, [("OutsideValidity", None)]),
        ({"ts_ms": -1}, [("OutsideValidity", None)]),
        ({"ctx": {"jurisdiction": "EU", "data_labels": ["medical"]}}, [("DataBoundary", None)]),
        ({"ctx": {"jurisdiction": "US-CA"}}, [("JurisdictionMismatch", None)]),
    ],
)
def test_each_violation_kind(kw, expected):
    assert kinds(**kw) == expected


def test_validity_window_is_half_open():
    assert kinds(ts_ms=0) == []
    assert kinds(ts_ms=T0 * 10 - 1) == []


def test_optional_params_only_checked_when_present():
    params = {"source": "x"}
    assert kinds(params=params) == []


def test_policy_hash_mismatch():
    with pytest.raises(PolicyHashMismatch):
        check_action(DOC, E(digest(b"other")))


def test_rate_limit_basic():
    doc = policy_for(DID, rate_limits=(RateLimit(1_000, 2),))
    entries = [E(doc.policy_hash, seq=i + 1, ts_ms=t) for i, t in enumerate([0, 100, 200, 1_100, 1_150, 1_190])]
    hits = check_rate(doc, entries)
    # window is (ts - 1000, ts], so seq 4 at 1100 no longer counts ts 100
    assert [(s, v.count) for s, v in hits] == [(3, 3), (5, 3), (6, 4)]
    assert "exceeds 2" in hits[0][1].detail


def test_rate_requires_order():
    doc = DOC
    with pytest.raises(UnorderedInput):
        check_rate(doc, [E(doc.policy_hash, seq=2), E(doc.policy_hash, seq=1)])


@settings(max_examples=200)
@given(
    st.lists(st.tuples(st.sampled_from(["summarize", "redact"]), st.integers(0, 5_000)), max_size=50),
    st.lists(
        st.tuples(st.integers(1, 3_000), st.integers(0, 6), st.sampled_from([None, "summarize", "redact"])),
        min_size=1,
        max_size=3,
    ),
)
def test_rate_matches_quadratic_oracle(raw, limits):
    doc = policy_for(DID, rate_limits=tuple(RateLimit(w, m, f) for w, m, f in limits))
    entries = [E(doc.policy_hash, action=a, seq=i + 1, ts_ms=t) for i, (a, t) in enumerate(raw)]
    got = {(s, v.limit_index, v.count) for s, v in check_rate(doc, entries)}
    assert got == oracles.rate_violations([(e.seq, e.action, e.ts_ms) for e in entries], limits)
