from __future__ import annotations

import dataclasses

import pytest

from trusttrack.audit import Verdict, audit_paths
from trusttrack.errors import InvalidSpec
from trusttrack.scenarios import (
    BUILTINS,
    FAULT_KINDS,
    CycleRef,
    DropAnchor,
    PolicyBreach,
    RateBurst,
    StepSpec,
    TamperByte,
    default_fault,
    run_scenario,
    scenario_key,
)


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _audit(art):
    report, diags = audit_paths(art.trace_paths, art.ledger_file, art.store_dir)
    got = {(f.agent, f.seq, f.check.value, f.verdict.value, f.reason) for f in report.problems()}
    return report, got, diags


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_builtin_shape(name):
    spec = BUILTINS[name]()
    spec.validate()
    assert len(spec.agents) >= 3 and len(spec.steps) >= 10
    assert spec.faults == ()


def test_legal_jurisdictions_disjoint():
    spec = BUILTINS["legal"]()
    sets = [a.policy.jurisdictions for a in spec.agents if a.policy]
    assert len(sets) == 2 and not sets[0] & sets[1]


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_clean_run_is_valid_and_regenerates(tmp_path, name):
    spec = BUILTINS[name]()
    a = run_scenario(spec, 7, tmp_path / "a")
    b = run_scenario(spec, 7, tmp_path / "b")
    assert _tree(a.root) == _tree(b.root)
    report, got, diags = _audit(a)
    assert got == set() and diags == []
    assert report.overall.value == "VALID" == a.manifest["expected_overall"]
    # rerunning into the same directory replaces the artifacts
    again = run_scenario(spec, 7, tmp_path / "a")
    assert _tree(again.root) == _tree(b.root)


def test_seed_changes_keys(tmp_path):
    spec = BUILTINS["pharma"]()
    assert scenario_key("pharma", 1, "qa-reviewer").did != scenario_key("pharma", 2, "qa-reviewer").did
    a, b = run_scenario(spec, 1, tmp_path / "a"), run_scenario(spec, 2, tmp_path / "b")
    assert a.ledger_file.read_bytes() != b.ledger_file.read_bytes()


@pytest.mark.parametrize("name", sorted(BUILTINS))
@pytest.mark.parametrize("kind", FAULT_KINDS)
def test_fault_manifest_matches_audit(tmp_path, name, kind):
    spec = BUILTINS[name]()
    fault = default_fault(spec, kind)
    art = run_scenario(spec.with_faults(fault), 3, tmp_path)
    report, got, _ = _audit(art)
    assert got == art.expected()
    assert got, "every fault must surface at least one finding"
    assert report.overall.value == art.manifest["expected_overall"] != "VALID"
    assert art.manifest["faults"] == [fault.to_value()]


def test_combined_faults(tmp_path):
    spec = BUILTINS["pharma"]()
    faults = [default_fault(spec, k) for k in ("forge-signature", "dangling-ref", "rate-burst", "drop-anchor")]
    art = run_scenario(spec.with_faults(*faults), 11, tmp_path)
    report, got, _ = _audit(art)
    assert got == art.expected()
    assert report.overall.value == "VIOLATIONS_FOUND"


def test_role_level_lineage_chain(tmp_path):
    spec = BUILTINS["pharma"]()
    art = run_scenario(spec, 0, tmp_path)
    report, _, _ = _audit(art)
    role_of = {scenario_key("pharma", 0, a.role).did: a.role for a in spec.agents}
    edges = {(role_of[u[0]], role_of[d[0]]) for u, d in report.lineage.edges if u[0] != d[0]}
    assert edges == {("data-synthesizer", "document-drafter"), ("document-drafter", "qa-reviewer")}


def test_breach_findings_are_policy_violations(tmp_path):
    spec = BUILTINS["legal"]()
    art = run_scenario(spec.with_faults(default_fault(spec, "wrong-jurisdiction")), 0, tmp_path)
    got = art.expected()
    assert {(c, v, r) for _, _, c, v, r in got} == {("PolicyCheck", Verdict.VIOLATION.value, "JurisdictionMismatch")}


@pytest.mark.parametrize(
    "mutate",
    [
        lambda s: s.with_faults(CycleRef(0, 0)),
        lambda s: s.with_faults(CycleRef(0, 99)),
        lambda s: s.with_faults(PolicyBreach(0, "teleport")),
        lambda s: s.with_faults(TamperByte("policy")),
        lambda s: s.with_faults(DropAnchor(-1)),
        lambda s: s.with_faults(RateBurst("qa-reviewer", 0)),
        lambda s: dataclasses.replace(s, submitter="nobody"),
        lambda s: dataclasses.replace(s, agents=s.agents + s.agents[:1]),
        lambda s: dataclasses.replace(s, steps=s.steps + (StepSpec(s.steps[0].role, "x", {}, refs=(len(s.steps),)),)),
    ],
)
def test_invalid_specs(tmp_path, mutate):
    spec = mutate(BUILTINS["pharma"]())
    with pytest.raises(InvalidSpec):
        spec.validate()
    with pytest.raises(InvalidSpec):
        run_scenario(spec, 0, tmp_path)


def test_unknown_fault_kind():
    with pytest.raises(InvalidSpec):
        default_fault(BUILTINS["legal"](), "earthquake")
