"""Deterministic multi-agent workflows with fault injection.

Each run writes a self-contained directory (keys, traces, policy store,
ledger) plus ``expected_findings.json``: the exact set of non-VALID audit
findings the injected faults must produce.

Keys are derived from the scenario name, seed and role.  They are
INSECURE by construction and exist only to make fixtures reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import random
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from ._fsutil import atomic_write
from .anchor import AnchorPolicy, CriticalImmediate, EveryN, Manual, plan_batches, submit_batch
from .audit import Check, Overall, Verdict
from .canonical import Digest, canonical_encode, digest
from .errors import InvalidSpec, IoFailure
from .identity import AgentIdentity, KeyPair, generate_keypair, register_identity, save_keyfile
from .ledger import FileLedger
from .policy import IntRange, MaxLength, OneOf, PolicyDocument, PolicyStore, RateLimit, Required, commit_policy
from .trace import EntryRef, LogEntry, TraceLog, build_entry, export_trace, seal_entry

BASE_EPOCH_MS = 1_750_000_000_000
STEP_MS = 60_000
BURST_OFFSET_MS = 3_600_000
DANGLING_SEQ = 999_999
VALIDITY_BEFORE_MS = 3_600_000
VALIDITY_AFTER_MS = 86_400_000

MANIFEST_NAME = "expected_findings.json"
LEDGER_NAME = "ledger.ttkl"


# scenario description types


@dataclass(frozen=True)
class PolicyTemplate:
    """Policy fields minus identity and validity, which are filled in per run."""

    policy_id: str
    allowed_actions: frozenset
    parameter_constraints: dict = field(default_factory=dict)
    rate_limits: tuple = ()
    jurisdictions: frozenset = frozenset()
    data_boundaries: frozenset = frozenset()
    delegated_by: str | None = None  # a role, resolved to its DID
    version: int = 1

    def instantiate(self, agent_did: str, delegator_did: str | None) -> PolicyDocument:
        return PolicyDocument(
            policy_id=self.policy_id,
            agent_did=agent_did,
            version=self.version,
            allowed_actions=frozenset(self.allowed_actions),
            not_before_ms=BASE_EPOCH_MS - VALIDITY_BEFORE_MS,
            not_after_ms=BASE_EPOCH_MS + VALIDITY_AFTER_MS,
            parameter_constraints=self.parameter_constraints,
            rate_limits=tuple(self.rate_limits),
            jurisdictions=frozenset(self.jurisdictions),
            data_boundaries=frozenset(self.data_boundaries),
            delegated_by=delegator_did,
        )


@dataclass(frozen=True)
class AgentSpec:
    role: str
    metadata: dict
    policy: PolicyTemplate | None = None  # None: the agent only submits anchors


@dataclass(frozen=True)
class StepSpec:
    role: str
    action: str
    params: dict
    refs: tuple[int, ...] = ()
    anchor_class: str = "routine"
    ctx: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TamperByte:
    """Flip one byte of a written file.

    ``trace``: a letter of the ``action`` string on the last line of the
    role's trace (default: the last role with steps).  ``ledger``: the last
    digit of the final record's envelope ``ts_ms``.
    """

    file_kind: str
    role: str | None = None

    def to_value(self) -> dict:
        return {"fault": "TamperByte", "file_kind": self.file_kind, "role": self.role}


@dataclass(frozen=True)
class ForgeSignature:
    step: int

    def to_value(self) -> dict:
        return {"fault": "ForgeSignature", "step": self.step}


BREACH_KINDS = ("disallowed-action", "param-out-of-range", "wrong-jurisdiction")


@dataclass(frozen=True)
class PolicyBreach:
    step: int
    kind: str

    def to_value(self) -> dict:
        return {"fault": "PolicyBreach", "step": self.step, "kind": self.kind}


@dataclass(frozen=True)
class DanglingRef:
    step: int

    def to_value(self) -> dict:
        return {"fault": "DanglingRef", "step": self.step}


@dataclass(frozen=True)
class CycleRef:
    first: int
    second: int

    def to_value(self) -> dict:
        return {"fault": "CycleRef", "first": self.first, "second": self.second}


@dataclass(frozen=True)
class DropAnchor:
    batch: int

    def to_value(self) -> dict:
        return {"fault": "DropAnchor", "batch": self.batch}


@dataclass(frozen=True)
class RateBurst:
    role: str
    count: int

    def to_value(self) -> dict:
        return {"fault": "RateBurst", "role": self.role, "count": self.count}


FaultInjection = Union[TamperByte, ForgeSignature, PolicyBreach, DanglingRef, CycleRef, DropAnchor, RateBurst]

# the check each fault is expected to trip
FAULT_CHECKS = {
    TamperByte: Check.CHAIN,
    ForgeSignature: Check.SIGNATURE,
    PolicyBreach: Check.POLICY,
    DanglingRef: Check.LINEAGE,
    CycleRef: Check.LINEAGE,
    DropAnchor: Check.ANCHOR,
    RateBurst: Check.RATE,
}


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    agents: tuple[AgentSpec, ...]
    steps: tuple[StepSpec, ...]
    anchor_strategy: AnchorPolicy
    submitter: str
    faults: tuple = ()

    def with_faults(self, *faults: FaultInjection) -> "ScenarioSpec":
        return dataclasses.replace(self, faults=tuple(self.faults) + tuple(faults))

    def agent(self, role: str) -> AgentSpec:
        for a in self.agents:
            if a.role == role:
                return a
        raise InvalidSpec(f"unknown role {role!r}")

    def validate(self) -> None:
        roles = [a.role for a in self.agents]
        if len(set(roles)) != len(roles):
            raise InvalidSpec("duplicate agent roles")
        self.agent(self.submitter)
        for a in self.agents:
            if a.policy and a.policy.delegated_by is not None:
                self.agent(a.policy.delegated_by)
        for i, s in enumerate(self.steps):
            if self.agent(s.role).policy is None:
                raise InvalidSpec(f"step {i}: role {s.role!r} has no policy")
            if any(not 0 <= r < i for r in s.refs):
                raise InvalidSpec(f"step {i}: refs must point to strictly earlier steps")
        n = len(self.steps)
        for f in self.faults:
            steps = {
                ForgeSignature: lambda f: [f.step],
                PolicyBreach: lambda f: [f.step],
                DanglingRef: lambda f: [f.step],
                CycleRef: lambda f: [f.first, f.second],
            }.get(type(f), lambda f: [])(f)
            if any(not 0 <= s < n for s in steps):
                raise InvalidSpec(f"{f!r} names a step outside 0..{n - 1}")
            if isinstance(f, CycleRef) and f.first == f.second:
                raise InvalidSpec("CycleRef needs two distinct steps")
            if isinstance(f, PolicyBreach) and f.kind not in BREACH_KINDS:
                raise InvalidSpec(f"unknown breach kind {f.kind!r}")
            if isinstance(f, TamperByte) and f.file_kind not in ("trace", "ledger"):
                raise InvalidSpec(f"unknown tamper target {f.file_kind!r}")
            if isinstance(f, RateBurst):
                tmpl = self.agent(f.role).policy
                if tmpl is None or not tmpl.rate_limits or f.count < 1:
                    raise InvalidSpec(f"RateBurst on {f.role!r} needs a rate-limited agent and count >= 1")
            if isinstance(f, DropAnchor) and f.batch < 0:
                raise InvalidSpec("DropAnchor batch must be >= 0")


# built-in scenarios


def builtin_pharma() -> ScenarioSpec:
    """Preclinical synthesis -> submission drafting -> QA review."""
    synth = PolicyTemplate(
        policy_id="gxp-data-synthesis",
        allowed_actions=frozenset({"ingest_dataset", "synthesize_findings"}),
        parameter_constraints={
            "ingest_dataset": {"dataset": Required(), "records": IntRange(1, 100_000)},
            "synthesize_findings": {"method": OneOf(("meta-analysis", "pooled-summary"))},
        },
        rate_limits=(RateLimit(300_000, 4),),
        jurisdictions=frozenset({"EU", "US"}),
        data_boundaries=frozenset({"anonymized", "aggregate"}),
    )
    drafter = PolicyTemplate(
        policy_id="gxp-submission-drafting",
        allowed_actions=frozenset({"draft_section", "compile_submission"}),
        parameter_constraints={
            "draft_section": {"section": MaxLength(40), "pages": IntRange(1, 50)},
            "compile_submission": {"sections": IntRange(1, 20)},
        },
        rate_limits=(RateLimit(300_000, 3),),
        jurisdictions=frozenset({"EU", "US"}),
        data_boundaries=frozenset({"aggregate"}),
        delegated_by="data-synthesizer",
    )
    reviewer = PolicyTemplate(
        policy_id="gxp-qa-review",
        allowed_actions=frozenset({"review_section", "approve_submission"}),
        parameter_constraints={
            "review_section": {"verdict": OneOf(("accepted", "changes-requested"))},
            "approve_submission": {"checklist": Required(), "findings_open": IntRange(0, 0)},
        },
        rate_limits=(RateLimit(600_000, 5),),
        jurisdictions=frozenset({"EU", "US"}),
        data_boundaries=frozenset({"aggregate"}),
    )
    eu = {"jurisdiction": "EU"}
    anon = {**eu, "data_labels": ["anonymized"]}
    agg = {**eu, "data_labels": ["aggregate"]}
    steps = (
        StepSpec("data-synthesizer", "ingest_dataset", {"dataset": "tox-assay-a", "records": 1200}, ctx=anon),
        StepSpec("data-synthesizer", "ingest_dataset", {"dataset": "tox-assay-b", "records": 840}, ctx=anon),
        StepSpec("data-synthesizer", "synthesize_findings", {"method": "meta-analysis"}, (0, 1), ctx=agg),
        StepSpec("document-drafter", "draft_section", {"section": "nonclinical-overview", "pages": 12}, (2,), ctx=agg),
        StepSpec("data-synthesizer", "synthesize_findings", {"method": "pooled-summary"}, (1,), ctx=agg),
        StepSpec("document-drafter", "draft_section", {"section": "toxicology-summary", "pages": 8}, (4,), ctx=agg),
        StepSpec("qa-reviewer", "review_section", {"verdict": "changes-requested"}, (3,), ctx=agg),
        StepSpec("document-drafter", "draft_section", {"section": "nonclinical-overview", "pages": 14}, (2, 4), ctx=agg),
        StepSpec("qa-reviewer", "review_section", {"verdict": "accepted"}, (5, 7), ctx=agg),
        StepSpec("document-drafter", "compile_submission", {"sections": 2}, (5, 7), "critical", ctx=agg),
        StepSpec(
            "qa-reviewer", "approve_submission", {"checklist": "gxp-annex-11", "findings_open": 0}, (9,),
            "critical", ctx=agg,
        ),
    )
    return ScenarioSpec(
        name="pharma",
        agents=(
            AgentSpec("data-synthesizer", {"org": "preclinical-lab", "model": "stub-synth-1"}, synth),
            AgentSpec("document-drafter", {"org": "regulatory-affairs", "model": "stub-draft-1"}, drafter),
            AgentSpec("qa-reviewer", {"org": "quality-assurance", "model": "stub-qa-1"}, reviewer),
        ),
        steps=steps,
        anchor_strategy=EveryN(4),
        submitter="qa-reviewer",
    )


def builtin_legal() -> ScenarioSpec:
    """Redaction in the EU, summarization in California, anchored by an orchestrator."""
    eu = PolicyTemplate(
        policy_id="gdpr-redaction",
        allowed_actions=frozenset({"classify_document", "redact_document"}),
        parameter_constraints={
            "classify_document": {"pages": IntRange(1, 500)},
            "redact_document": {"regime": OneOf(("GDPR",)), "doc_ref": MaxLength(64)},
        },
        rate_limits=(RateLimit(300_000, 4, "redact_document"),),
        jurisdictions=frozenset({"EU"}),
        data_boundaries=frozenset({"eu-personal", "pseudonymized", "public"}),
        delegated_by="orchestrator",
    )
    us = PolicyTemplate(
        policy_id="ccpa-summarization",
        allowed_actions=frozenset({"summarize_document", "flag_for_counsel"}),
        parameter_constraints={
            "summarize_document": {"max_words": IntRange(50, 2000)},
            "flag_for_counsel": {"reason": Required()},
        },
        rate_limits=(RateLimit(300_000, 4),),
        jurisdictions=frozenset({"US-CA"}),
        data_boundaries=frozenset({"pseudonymized", "public"}),
        delegated_by="orchestrator",
    )
    eu_ctx = {"jurisdiction": "EU", "data_labels": ["eu-personal"]}
    eu_out = {"jurisdiction": "EU", "data_labels": ["eu-personal", "pseudonymized"]}
    us_ctx = {"jurisdiction": "US-CA", "data_labels": ["pseudonymized"]}
    steps = []
    for n, doc in enumerate(("msa-2024-017", "dpa-2024-031", "nda-2025-002")):
        base = len(steps)
        steps += [
            StepSpec("eu-redactor", "classify_document", {"doc_ref": doc, "pages": 40 + 7 * n}, ctx=eu_ctx),
            StepSpec("eu-redactor", "redact_document", {"doc_ref": doc, "regime": "GDPR"}, (base,), "critical", eu_out),
            StepSpec("us-summarizer", "summarize_document", {"doc_ref": doc, "max_words": 400}, (base + 1,), ctx=us_ctx),
        ]
    steps.append(
        StepSpec("us-summarizer", "flag_for_counsel", {"reason": "indemnity-clause"}, (2, 5, 8), "critical", us_ctx)
    )
    return ScenarioSpec(
        name="legal",
        agents=(
            AgentSpec("orchestrator", {"org": "matter-coordination", "model": "stub-orchestrator-1"}),
            AgentSpec("eu-redactor", {"org": "firm-eu", "model": "stub-redact-1"}, eu),
            AgentSpec("us-summarizer", {"org": "firm-us", "model": "stub-summarize-1"}, us),
        ),
        steps=tuple(steps),
        anchor_strategy=CriticalImmediate(3),
        submitter="orchestrator",
    )


BUILTINS = {"pharma": builtin_pharma, "legal": builtin_legal}
FAULT_KINDS = (
    "tamper-trace",
    "tamper-ledger",
    "forge-signature",
    "disallowed-action",
    "param-out-of-range",
    "wrong-jurisdiction",
    "dangling-ref",
    "cycle-ref",
    "drop-anchor",
    "rate-burst",
)


def default_fault(spec: ScenarioSpec, kind: str) -> FaultInjection:
    """A representative fault of ``kind`` for ``spec``, as used by ``scenario run --fault``."""
    last = len(spec.steps) - 1
    with_refs = [i for i, s in enumerate(spec.steps) if s.refs]
    if kind == "tamper-trace":
        return TamperByte("trace")
    if kind == "tamper-ledger":
        return TamperByte("ledger")
    if kind == "forge-signature":
        return ForgeSignature(with_refs[0])
    if kind in BREACH_KINDS:
        step = last
        if kind == "param-out-of-range":
            step = next(i for i in range(len(spec.steps)) if _int_range_param(spec, i) is not None)
        return PolicyBreach(step, kind)
    if kind == "dangling-ref":
        return DanglingRef(with_refs[-1])
    if kind == "cycle-ref":
        j = with_refs[0]
        return CycleRef(spec.steps[j].refs[0], j)
    if kind == "drop-anchor":
        return DropAnchor(0)
    if kind == "rate-burst":
        role = next(a.role for a in spec.agents if a.policy and a.policy.rate_limits)
        limit = spec.agent(role).policy.rate_limits[0]
        return RateBurst(role, limit.max_actions + 2)
    raise InvalidSpec(f"unknown fault kind {kind!r}; expected one of {', '.join(FAULT_KINDS)}")


def _int_range_param(spec: ScenarioSpec, i: int) -> tuple[str, IntRange] | None:
    step = spec.steps[i]
    constraints = spec.agent(step.role).policy.parameter_constraints.get(step.action, {})
    for name, c in sorted(constraints.items()):
        if isinstance(c, IntRange) and name in step.params:
            return name, c
    return None


# execution


@dataclass(frozen=True)
class ScenarioArtifacts:
    root: Path
    key_files: dict
    trace_files: dict
    store_dir: Path
    ledger_file: Path
    manifest_file: Path
    manifest: dict

    @property
    def trace_paths(self) -> list[Path]:
        return [self.trace_files[r] for r in sorted(self.trace_files)]

    def expected(self) -> set[tuple[str, int, str, str, str]]:
        return {
            (f["agent"], f["seq"], f["check"], f["verdict"], f["reason"])
            for f in self.manifest["expected_findings"]
        }


@dataclass
class _Planned:
    role: str
    action: str
    params: dict
    ctx: dict
    refs: list  # step index, or ("dangling",), or ("forward", step index)
    anchor_class: str
    ts_ms: int
    burst: bool = False


def scenario_key(spec_name: str, seed: int, role: str) -> KeyPair:
    """INSECURE deterministic key for fixtures; never use outside scenarios."""
    return generate_keypair(hashlib.sha256(f"trusttrack-scenario/{spec_name}/{seed}/{role}".encode()).digest())


def _plan(spec: ScenarioSpec) -> list[_Planned]:
    plan = [
        _Planned(s.role, s.action, dict(s.params), dict(s.ctx), list(s.refs), s.anchor_class, BASE_EPOCH_MS + (i + 1) * STEP_MS)
        for i, s in enumerate(spec.steps)
    ]
    for f in spec.faults:
        if isinstance(f, PolicyBreach):
            p = plan[f.step]
            tmpl = spec.agent(p.role).policy
            if f.kind == "disallowed-action":
                p.action = "export_raw_records"
            elif f.kind == "param-out-of-range":
                found = _int_range_param(spec, f.step)
                if found is None:
                    raise InvalidSpec(f"step {f.step} has no integer-range parameter to breach")
                name, c = found
                p.params[name] = c.max + 1
            else:
                p.ctx["jurisdiction"] = "ZZ" if "ZZ" not in tmpl.jurisdictions else "ZZ-X"
        elif isinstance(f, DanglingRef):
            plan[f.step].refs.append(("dangling",))
        elif isinstance(f, CycleRef):
            lo, hi = sorted((f.first, f.second))
            plan[lo].refs.append(("forward", hi))
            if lo not in plan[hi].refs:
                plan[hi].refs.append(lo)
    for f in spec.faults:
        if isinstance(f, RateBurst):
            limits = spec.agent(f.role).policy.rate_limits
            template = next(
                (s for s in spec.steps if s.role == f.role and any(lim.matches(s.action) for lim in limits)), None
            )
            if template is None:
                raise InvalidSpec(f"RateBurst role {f.role!r} has no steps to repeat")
            start = max(p.ts_ms for p in plan) + BURST_OFFSET_MS
            for k in range(f.count):
                plan.append(
                    _Planned(f.role, template.action, dict(template.params), dict(template.ctx), [], "routine",
                             start + k, burst=True)
                )
    return plan


def _synthetic_digest(rng: random.Random) -> Digest:
    return digest(rng.getrandbits(256).to_bytes(32, "big"))


def _clear(out: Path) -> None:
    for name in ("keys", "traces", "policies"):
        shutil.rmtree(out / name, ignore_errors=True)
    for name in (LEDGER_NAME, LEDGER_NAME + ".lock", MANIFEST_NAME):
        (out / name).unlink(missing_ok=True)


def run_scenario(spec: ScenarioSpec, seed: int, out: str | Path) -> ScenarioArtifacts:
    """Generate the scenario into ``out`` and return where everything landed.

    Previously generated artifacts in ``out`` are replaced; other files are
    left alone.
    """
    spec.validate()
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _clear(out)
        (out / "keys").mkdir()
        (out / "traces").mkdir()
    except OSError as exc:
        raise IoFailure(f"{out}: {exc}") from None
    rng = random.Random(seed)
    keys = {a.role: scenario_key(spec.name, seed, a.role) for a in spec.agents}
    dids = {role: kp.did for role, kp in keys.items()}
    ledger = FileLedger(out / LEDGER_NAME)
    store = PolicyStore(out / "policies")

    key_files = {}
    for i, a in enumerate(spec.agents):
        register_identity(AgentIdentity.for_keypair(keys[a.role], a.metadata), keys[a.role], ledger,
                          now=BASE_EPOCH_MS - 120_000 + i)
        key_files[a.role] = out / "keys" / f"{a.role}.json"
        save_keyfile(keys[a.role], key_files[a.role])
    policy_hashes = {}
    for i, a in enumerate(spec.agents):
        if a.policy is None:
            continue
        delegator = dids[a.policy.delegated_by] if a.policy.delegated_by else None
        doc = a.policy.instantiate(dids[a.role], delegator)
        commit_policy(doc, keys[a.role], BASE_EPOCH_MS - 60_000 + i, ledger, store)
        policy_hashes[a.role] = doc.policy_hash

    plan = _plan(spec)
    forged = {f.step for f in spec.faults if isinstance(f, ForgeSignature)}
    dropped = {f.batch for f in spec.faults if isinstance(f, DropAnchor)}
    roles = [a.role for a in spec.agents]

    # seq is fixed by plan order, so forward refs can name their target up front
    planned_keys = []
    counters: dict[str, int] = {}
    for p in plan:
        counters[p.role] = counters.get(p.role, 0) + 1
        planned_keys.append((dids[p.role], counters[p.role]))

    entries_by_role: dict[str, list[LogEntry]] = {}
    sealed: list[LogEntry] = []
    outputs: list[tuple[Digest, ...]] = []
    pending: list[LogEntry] = []
    batches: list[tuple[int, list[tuple[str, int]], int | None]] = []  # (number, keys, ledger idx)

    def anchor(batch_list: list[list[LogEntry]], now: int) -> None:
        for batch in batch_list:
            number = len(batches)
            idx = None
            if number not in dropped:
                idx = submit_batch(batch, keys[spec.submitter], now, ledger).ledger_index
            batches.append((number, [e.key for e in batch], idx))
            done = {e.key for e in batch}
            pending[:] = [e for e in pending if e.key not in done]

    for i, p in enumerate(plan):
        refs, inputs = [], []
        for r in p.refs:
            if isinstance(r, int):
                refs.append(EntryRef.to(sealed[r]))
                inputs.extend(outputs[r])
            elif r[0] == "dangling":
                refs.append(EntryRef(dids[roles[0]] if p.role != roles[0] else dids[roles[-1]], DANGLING_SEQ,
                                     digest(b"missing upstream entry")))
            else:
                agent, seq = planned_keys[r[1]]
                refs.append(EntryRef(agent, seq, Digest(bytes(32))))
        if not inputs:
            inputs.append(_synthetic_digest(rng))
        out_digests = (_synthetic_digest(rng),)
        ctx = {**p.ctx, "run": f"{spec.name}-{seed}", "step": i}
        log = TraceLog.unchecked(dids[p.role], entries_by_role.get(p.role, []))
        entry = build_entry(log, policy_hashes[p.role], p.action, p.params, p.ts_ms, ctx=ctx, inputs=inputs,
                            outputs=out_digests, refs=refs, anchor_class=p.anchor_class)
        entry = seal_entry(entry, keys[p.role])
        if i in forged:
            forger = keys[next(r for r in roles if r != p.role)]
            entry = dataclasses.replace(entry, sig=forger.sign(entry.signing_bytes()), hash=None)
            entry = dataclasses.replace(entry, hash=entry.compute_hash())
        entries_by_role.setdefault(p.role, []).append(entry)
        sealed.append(entry)
        outputs.append(out_digests)
        pending.append(entry)
        anchor(plan_batches(pending, spec.anchor_strategy), p.ts_ms)
    anchor(plan_batches(pending, Manual()), plan[-1].ts_ms + 1 if plan else BASE_EPOCH_MS)

    trace_files = {}
    for role, entries in entries_by_role.items():
        trace_files[role] = out / "traces" / f"{role}.ttkt"
        export_trace(TraceLog.unchecked(dids[role], entries), trace_files[role])

    tampered = _apply_file_faults(spec, out, trace_files, entries_by_role)
    manifest = _manifest(spec, seed, plan, sealed, planned_keys, batches, tampered, ledger)
    manifest_file = out / MANIFEST_NAME
    atomic_write(manifest_file, canonical_encode(manifest) + b"\n")
    return ScenarioArtifacts(out, key_files, trace_files, out / "policies", out / LEDGER_NAME, manifest_file, manifest)


def _apply_file_faults(spec, out, trace_files, entries_by_role) -> dict:
    """Mutate written bytes; returns what was hit for the manifest."""
    hit: dict = {"trace": [], "ledger": None}
    for f in spec.faults:
        if not isinstance(f, TamperByte):
            continue
        if f.file_kind == "trace":
            role = f.role or [s.role for s in spec.steps][-1]
            path = trace_files[role]
            data = bytearray(path.read_bytes())
            start = data.rfind(b"\n", 0, len(data) - 1) + 1
            pos = data.index(b'"action":"', start) + len(b'"action":"')
            data[pos] = ord("x") if data[pos] != ord("x") else ord("y")
            atomic_write(path, bytes(data))
            hit["trace"].append(entries_by_role[role][-1].key)
        else:
            path = out / LEDGER_NAME
            data = bytearray(path.read_bytes())
            start = data.rfind(b"\n", 0, len(data) - 1) + 1
            pos = data.rfind(b"}", start) - 1  # last digit of the trailing ts_ms
            data[pos] = ord("0") + (data[pos] - ord("0") + 1) % 10
            atomic_write(path, bytes(data))
            hit["ledger"] = data.count(b"\n") - 1
    return hit


def _finding(agent, seq, check: Check, verdict: Verdict, reason: str) -> dict:
    return {"agent": agent, "seq": seq, "check": check.value, "verdict": verdict.value, "reason": reason}


def _manifest(spec, seed, plan, sealed, planned_keys, batches, tampered, ledger) -> dict:
    expected: dict[tuple, dict] = {}

    def expect(key, check, verdict, reason):
        expected[(key[0], key[1], check.value)] = _finding(key[0], key[1], check, verdict, reason)

    for f in spec.faults:
        if isinstance(f, ForgeSignature):
            expect(planned_keys[f.step], Check.SIGNATURE, Verdict.VIOLATION, "BadSignature")
        elif isinstance(f, PolicyBreach):
            reason = {
                "disallowed-action": "ActionNotAllowed",
                "param-out-of-range": "ParamViolation",
                "wrong-jurisdiction": "JurisdictionMismatch",
            }[f.kind]
            expect(planned_keys[f.step], Check.POLICY, Verdict.VIOLATION, reason)
        elif isinstance(f, DanglingRef):
            expect(planned_keys[f.step], Check.LINEAGE, Verdict.VIOLATION, "DanglingRef")
        elif isinstance(f, CycleRef):
            for s in (f.first, f.second):
                expect(planned_keys[s], Check.LINEAGE, Verdict.VIOLATION, "CycleDetected")
        elif isinstance(f, DropAnchor):
            for number, keys, _ in batches:
                if number == f.batch:
                    for k in keys:
                        expect(k, Check.ANCHOR, Verdict.UNVERIFIABLE, "Unanchored")
        elif isinstance(f, RateBurst):
            burst = [i for i, p in enumerate(plan) if p.burst and p.role == f.role]
            limit = spec.agent(f.role).policy.rate_limits
            for pos, i in enumerate(burst, start=1):
                if any(lim.matches(plan[i].action) and pos > lim.max_actions for lim in limit):
                    expect(planned_keys[i], Check.RATE, Verdict.VIOLATION, "RateViolation")

    for key in tampered["trace"]:
        expect(key, Check.CHAIN, Verdict.VIOLATION, "HashMismatch")
        for _, keys, idx in batches:
            if key in keys and idx is not None:
                for k in keys:
                    if k != key:
                        expect(k, Check.ANCHOR, Verdict.UNVERIFIABLE, "BatchIncomplete")
        for i, e in enumerate(sealed):
            if any((r.agent, r.seq) == key for r in e.refs):
                expect(e.key, Check.LINEAGE, Verdict.VIOLATION, "DanglingRef")
    if tampered["ledger"] is not None:
        last = tampered["ledger"]
        expect(("ledger", last), Check.CHAIN, Verdict.VIOLATION, "RecordHashMismatch")
        for _, keys, idx in batches:
            if idx == last:
                for k in keys:
                    expect(k, Check.ANCHOR, Verdict.UNVERIFIABLE, "Unanchored")

    findings = sorted(expected.values(), key=lambda f: (f["agent"], f["seq"], f["check"]))
    verdicts = {f["verdict"] for f in findings}
    overall = (
        Overall.VIOLATIONS_FOUND if "VIOLATION" in verdicts
        else Overall.UNVERIFIABLE if "UNVERIFIABLE" in verdicts
        else Overall.VALID
    )
    return {
        "scenario": spec.name,
        "seed": seed,
        "faults": [f.to_value() for f in spec.faults],
        "expected_findings": findings,
        "expected_overall": overall.value,
    }
