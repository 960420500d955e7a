from __future__ import annotations

import dataclasses
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import keypair
from trusttrack.anchor import (
    ANCHORED,
    INCOMPLETE,
    LEFT,
    RIGHT,
    ROOT_MISMATCH,
    UNANCHORED,
    AnchorIndex,
    BatchAnchor,
    CriticalImmediate,
    EveryN,
    Manual,
    MerkleProof,
    ProofStep,
    anchors_from_ledger,
    coverage_of,
    flush_batches,
    merkle_prove,
    merkle_prove_all,
    merkle_root,
    merkle_verify,
    parse_strategy,
    plan_batches,
    submit_batch,
)
from trusttrack.canonical import CanonicalError, Digest, digest, domain_digest
from trusttrack.errors import EmptyBatch, IndexOutOfRange
from trusttrack.ledger import MemoryLedger
from trusttrack.trace import TraceLog, log_action

# Frozen from tests/oracles.py (pure-Python SHA-256, by-definition tree) with
# leaves sha256(bytes([i])) for i in range(n).
GOLDEN_ROOTS = {
    1: "d9de27625445003d8a9739a851e3ff8d41c0683630b4d63a88327a6aaa37c409",
    2: "604d540f09268b91672ab011394d5266ccd7d4484d0d109411a55848126a1b2c",
    3: "bd1176fdb3a24eed1bfd6a843e3607292fd2cc7407416428e0e46b0d5c721798",
    4: "0dcc2b645c00dfa2338e1c7ac2c4b570beda5a476d58836e55e28bde55e6bee1",
    5: "5052e51773345c9d319e4b27b57d30d0c4f9745eea41fa08540bc6fdf527d196",
    7: "d14d5e1860d658dbd7e6f4c0c99be65529762d2056c236f3423eff03f29ec7bf",
    8: "80e139b44c90f91edebec705cc7586c3d90f4bdadd49628d25c20d4b03419287",
}


@pytest.mark.parametrize("n", sorted(GOLDEN_ROOTS))
def test_golden_roots(n):
    leaves = [digest(bytes([i])) for i in range(n)]
    assert merkle_root(leaves).hex() == GOLDEN_ROOTS[n]


def test_single_zero_leaf_root():
    assert merkle_root([bytes(32)]).hex() == "7f9c9e31ac8256ca2f258583df262dbc7d6f68f2a03043d5c99a4ae5a7396ce9"


def test_empty_batch_and_bad_index():
    with pytest.raises(EmptyBatch):
        merkle_root([])
    with pytest.raises(IndexOutOfRange):
        merkle_prove([bytes(32)], 1)


@settings(max_examples=150)
@given(st.lists(st.binary(min_size=32, max_size=32), min_size=1, max_size=40))
def test_matches_oracle_and_proofs_verify(leaves):
    root = merkle_root(leaves)
    assert root == oracles.merkle_root(leaves)
    for i, proof in enumerate(merkle_prove_all(leaves)):
        assert proof == merkle_prove(leaves, i)
        assert proof.root == root and merkle_verify(proof)


def _mutations(proof: MerkleProof):
    flip = lambda d: Digest(bytes([d[0] ^ 1]) + d[1:])  # noqa: E731
    yield dataclasses.replace(proof, leaf_hash=flip(proof.leaf_hash))
    yield dataclasses.replace(proof, root=flip(proof.root))
    yield dataclasses.replace(proof, leaf_index=proof.leaf_index + 1)
    for k, step in enumerate(proof.path):
        path = list(proof.path)
        path[k] = ProofStep(flip(step.hash), step.side)
        yield dataclasses.replace(proof, path=tuple(path))
        path[k] = ProofStep(step.hash, LEFT if step.side == RIGHT else RIGHT)
        yield dataclasses.replace(proof, path=tuple(path))
    if proof.path:
        yield dataclasses.replace(proof, path=proof.path[:-1])


@pytest.mark.parametrize("n", range(1, 17))
def test_every_single_mutation_fails(n):
    rnd = random.Random(n)
    leaves = [rnd.randbytes(32) for _ in range(n)]
    for proof in merkle_prove_all(leaves):
        for bad in _mutations(proof):
            assert not merkle_verify(bad)


def test_padded_sibling_side_flip_rejected():
    leaves = [digest(bytes([i])) for i in range(3)]
    proof = merkle_prove(leaves, 2)
    # the third leaf is paired with a copy of itself
    assert proof.path[0].side == RIGHT and proof.path[0].hash == domain_digest(0, [leaves[2]])
    flipped = dataclasses.replace(proof, path=(ProofStep(proof.path[0].hash, LEFT),) + proof.path[1:])
    assert not merkle_verify(flipped)


def test_proof_value_roundtrip():
    proof = merkle_prove([digest(bytes([i])) for i in range(6)], 4)
    assert MerkleProof.from_value(proof.to_value()) == proof
    bad = proof.to_value()
    bad["path"][0]["side"] = "up"
    with pytest.raises(CanonicalError):
        MerkleProof.from_value(bad)


def test_parse_strategy():
    assert parse_strategy("every-n:8") == EveryN(8)
    assert parse_strategy("critical") == CriticalImmediate(16)
    assert parse_strategy("critical:3") == CriticalImmediate(3)
    assert parse_strategy("manual") == Manual()
    for bad in ("every-n", "every-n:0", "sometimes", "manual:2"):
        with pytest.raises(ValueError):
            parse_strategy(bad)


# batching over real entries

POLICY = digest(b"p")
A, B, SUB = keypair(1), keypair(2), keypair(3)


def entries(kp, classes):
    log = TraceLog(kp.did)
    for i, c in enumerate(classes):
        log_action(log, kp, POLICY, "act", {"i": i}, 10 + i, anchor_class=c)
    return list(log)


def test_plan_every_n_leaves_remainder():
    es = entries(A, ["routine"] * 7)
    batches = plan_batches(es, EveryN(3))
    assert [len(b) for b in batches] == [3, 3]


def test_plan_critical_immediate():
    es = entries(A, ["routine", "critical", "routine", "routine", "critical"])
    batches = plan_batches(es, CriticalImmediate(2))
    assert [[e.seq for e in b] for b in batches] == [[2], [1, 3], [5]]


def test_plan_manual_takes_all_sorted():
    es = entries(B, ["routine"] * 2) + entries(A, ["routine"] * 2)
    (batch,) = plan_batches(list(reversed(es)), Manual())
    assert [e.key for e in batch] == sorted(e.key for e in es)


def test_coverage_runs():
    es = entries(A, ["routine"] * 3)
    assert [c.to_value() for c in coverage_of([es[0], es[1], es[2]])] == [
        {"agent": A.did, "first_seq": 1, "last_seq": 3}
    ]
    assert len(coverage_of([es[0], es[2]])) == 2


def test_submit_and_index_states():
    led = MemoryLedger()
    a, b = entries(A, ["routine"] * 4), entries(B, ["routine"] * 2)
    pending = a + b
    anchors = flush_batches(pending, EveryN(4), SUB, 99, led)
    assert len(anchors) == 1 and len(pending) == 2
    anchor = anchors[0]
    assert anchor.verifies() and anchor.batch_id == str(anchor.merkle_root)[:16]
    assert anchors_from_ledger(led) == [anchor]
    assert BatchAnchor.from_record(led.get(0).body, 0) == anchor

    by_key = {e.key: e for e in a + b}
    covered = [by_key[k] for k in anchor.keys()]
    assert sorted(anchor.keys()) == sorted(e.key for e in plan_batches(a + b, Manual())[0][:4])
    left = pending[0]
    idx = AnchorIndex(anchors_from_ledger(led), by_key)
    for e in covered:
        st_ = idx.status(e)
        assert st_.state == ANCHORED and merkle_verify(st_.proof) and st_.proof.root == anchor.merkle_root
    assert idx.status(left).state == UNANCHORED

    partial = {k: v for k, v in by_key.items() if k != covered[1].key}
    assert AnchorIndex(anchors_from_ledger(led), partial).status(covered[0]).state == INCOMPLETE

    forged = dataclasses.replace(covered[2], hash=digest(b"other"))
    swapped = by_key | {forged.key: forged}
    assert AnchorIndex(anchors_from_ledger(led), swapped).status(covered[0]).state == ROOT_MISMATCH
    assert idx.status(forged).state == ROOT_MISMATCH


def test_anchor_signed_by_other_is_ignored():
    led = MemoryLedger()
    anchor = submit_batch(entries(A, ["routine"]), SUB, 1, led)
    body = dict(anchor.body(), submitter=B.did)
    led.append("anchor", body, 2)
    assert [x.ledger_index for x in anchors_from_ledger(led)] == [0]


@pytest.mark.parametrize(
    "edit",
    [
        lambda b: b.update(leaf_count=b["leaf_count"] + 1),
        lambda b: b["coverage"][0].update(first_seq=0),
        lambda b: b["coverage"][0].update(agent="mallory"),
        lambda b: b.pop("sig"),
    ],
)
def test_malformed_anchor_bodies(edit):
    led = MemoryLedger()
    body = submit_batch(entries(A, ["routine"] * 2), SUB, 1, led).body()
    edit(body)
    with pytest.raises(CanonicalError):
        BatchAnchor.from_record(body, 0)
