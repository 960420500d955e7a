"""Verification engine: per-entry checks, chain and rate checks, lineage, reports.

Problems never raise; they become findings.  ``UNVERIFIABLE`` (could not
check: unknown policy, no anchor) is kept apart from ``VIOLATION`` (checked
and failed) so callers can choose how strict to be.
"""

from __future__ import annotations

import enum
import glob
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .anchor import ANCHORED, INCOMPLETE, ROOT_MISMATCH, AnchorIndex, anchors_from_ledger, merkle_verify
from .canonical import ZERO_DIGEST, Digest, canonical_encode, loads
from .errors import DigestMismatch, IoFailure, NotFound, TraceError, UnorderedInput
from .identity import IdentityRegistry, IdentityStatus
from .ledger import FileLedger, Ledger
from .policy import VIOLATION_ORDER, PolicyDocument, PolicyStore, check_action, check_rate, policies_from_ledger
from .trace import LogEntry, TraceLog, parse_lines

LEDGER_SUBJECT = "ledger"


class Check(str, enum.Enum):
    SIGNATURE = "SignatureCheck"
    CHAIN = "ChainCheck"
    POLICY = "PolicyCheck"
    RATE = "RateCheck"
    ANCHOR = "AnchorCheck"
    LINEAGE = "LineageCheck"
    IDENTITY = "IdentityCheck"


class Verdict(str, enum.Enum):
    VALID = "VALID"
    VIOLATION = "VIOLATION"
    UNVERIFIABLE = "UNVERIFIABLE"
    WARNING = "WARNING"


class Overall(str, enum.Enum):
    VALID = "VALID"
    VIOLATIONS_FOUND = "VIOLATIONS_FOUND"
    UNVERIFIABLE = "UNVERIFIABLE"


_SEVERITY = {Verdict.VALID: 0, Verdict.WARNING: 1, Verdict.UNVERIFIABLE: 2, Verdict.VIOLATION: 3}


@dataclass(frozen=True)
class Finding:
    agent: str
    seq: int
    check: Check
    verdict: Verdict
    reason: str = ""
    detail: str = ""

    @property
    def sort_key(self) -> tuple:
        return (self.agent, self.seq, self.check.value)

    @property
    def signature(self) -> tuple[str, int, str, str, str]:
        """The (agent, seq, check, verdict, reason) tuple used by expected-findings manifests."""
        return (self.agent, self.seq, self.check.value, self.verdict.value, self.reason)

    def to_value(self) -> dict:
        return {
            "agent": self.agent,
            "seq": self.seq,
            "check": self.check.value,
            "verdict": self.verdict.value,
            "reason": self.reason,
            "detail": self.detail,
        }

    @classmethod
    def from_value(cls, v: dict) -> "Finding":
        return cls(v["agent"], v["seq"], Check(v["check"]), Verdict(v["verdict"]), v["reason"], v["detail"])


def _valid(e: LogEntry, check: Check, detail: str = "") -> Finding:
    return Finding(e.agent, e.seq, check, Verdict.VALID, "", detail)


def _bad(e: LogEntry, check: Check, verdict: Verdict, reason: str, detail: str) -> Finding:
    return Finding(e.agent, e.seq, check, verdict, reason, detail)


@dataclass(frozen=True)
class LineageGraph:
    nodes: tuple[tuple[str, int, Digest], ...] = ()
    edges: tuple[tuple[tuple[str, int], tuple[str, int]], ...] = ()  # upstream -> downstream

    def to_value(self) -> dict:
        return {
            "nodes": [{"agent": a, "seq": s, "hash": str(h)} for a, s, h in self.nodes],
            "edges": [
                {"from": {"agent": u[0], "seq": u[1]}, "to": {"agent": d[0], "seq": d[1]}}
                for u, d in self.edges
            ],
        }

    @classmethod
    def from_value(cls, v: dict) -> "LineageGraph":
        nodes = tuple((n["agent"], n["seq"], Digest.from_hex(n["hash"])) for n in v["nodes"])
        edges = tuple(
            ((e["from"]["agent"], e["from"]["seq"]), (e["to"]["agent"], e["to"]["seq"])) for e in v["edges"]
        )
        return cls(nodes, edges)

    def downstream(self, key: tuple[str, int]) -> list[tuple[str, int]]:
        return [d for u, d in self.edges if u == key]


@dataclass(frozen=True)
class Attribution:
    agent_did: str
    policy_hash: Digest
    anchor_index: int | None

    def to_value(self) -> dict:
        return {"agent_did": self.agent_did, "policy_hash": str(self.policy_hash), "anchor_index": self.anchor_index}


def _attr_key(key: tuple[str, int]) -> str:
    return f"{key[0]}#{key[1]}"


@dataclass(frozen=True)
class AuditReport:
    findings: tuple[Finding, ...]
    lineage: LineageGraph
    attribution: dict = field(default_factory=dict)  # (agent, seq) -> Attribution
    overall: Overall = Overall.VALID

    def problems(self) -> list[Finding]:
        return [f for f in self.findings if f.verdict is not Verdict.VALID]

    def to_value(self) -> dict:
        return {
            "findings": [f.to_value() for f in self.findings],
            "lineage": self.lineage.to_value(),
            "attribution": {_attr_key(k): a.to_value() for k, a in self.attribution.items()},
            "overall": self.overall.value,
        }

    @classmethod
    def from_value(cls, v: dict) -> "AuditReport":
        attribution = {}
        for k, a in v["attribution"].items():
            agent, _, seq = k.rpartition("#")
            attribution[(agent, int(seq))] = Attribution(
                a["agent_did"], Digest.from_hex(a["policy_hash"]), a["anchor_index"]
            )
        return cls(
            tuple(Finding.from_value(f) for f in v["findings"]),
            LineageGraph.from_value(v["lineage"]),
            attribution,
            Overall(v["overall"]),
        )

    @property
    def exit_code(self) -> int:
        return 0 if self.overall is Overall.VALID else 1


def overall_of(findings: Iterable[Finding]) -> Overall:
    verdicts = {f.verdict for f in findings}
    if Verdict.VIOLATION in verdicts:
        return Overall.VIOLATIONS_FOUND
    if Verdict.UNVERIFIABLE in verdicts:
        return Overall.UNVERIFIABLE
    return Overall.VALID


# context


class AuditContext:
    """Everything the per-entry checks consult, derived once from the inputs.

    Only the ledger prefix before the first broken record is trusted.
    """

    def __init__(self, ledger: Ledger, store: PolicyStore, logs: Sequence[TraceLog] = ()) -> None:
        self.ledger_fault = ledger.first_fault()
        trusted = len(ledger) if self.ledger_fault is None else self.ledger_fault[0]
        self.registry = IdentityRegistry.from_ledger(ledger, upto=trusted)
        self.commitments = policies_from_ledger(ledger, upto=trusted)
        self.store = store
        entries: dict[tuple[str, int], LogEntry] = {}
        for log in logs:
            for e in log:
                entries.setdefault(e.key, e)
        self.anchors = AnchorIndex(anchors_from_ledger(ledger, upto=trusted), entries)
        self._policies: dict[Digest, PolicyDocument | tuple[str, str]] = {}

    def policy(self, policy_hash: Digest) -> PolicyDocument | tuple[str, str]:
        """The stored document, or a (reason, detail) pair explaining why not."""
        if policy_hash not in self._policies:
            try:
                self._policies[policy_hash] = self.store.lookup(policy_hash)
            except NotFound:
                self._policies[policy_hash] = ("UnknownPolicy", f"no stored policy {policy_hash}")
            except DigestMismatch as exc:
                self._policies[policy_hash] = ("DigestMismatch", str(exc))
        return self._policies[policy_hash]


# per-entry checks


def _identity_check(e: LogEntry, ctx: AuditContext) -> Finding:
    res = ctx.registry.resolve(e.agent)
    if res.status is IdentityStatus.NOT_FOUND:
        return _bad(e, Check.IDENTITY, Verdict.VIOLATION, "UnknownAgent", f"{e.agent} is not registered")
    if res.status is IdentityStatus.REGISTERED:
        return _valid(e, Check.IDENTITY)
    # revoked: ledger order of the anchor beats the entry's own timestamp
    anchor = ctx.anchors.status(e)
    if anchor.state == ANCHORED:
        before = anchor.ledger_index < res.revocation_index
        how = f"anchored at ledger {anchor.ledger_index}, revoked at ledger {res.revocation_index}"
    else:
        before = e.ts_ms < res.revoked_at_ms
        how = f"ts_ms {e.ts_ms}, revoked at {res.revoked_at_ms}"
    if before:
        return _valid(e, Check.IDENTITY, f"recorded before revocation ({how})")
    return _bad(e, Check.IDENTITY, Verdict.VIOLATION, "RevokedIdentity", how)


def _signature_check(e: LogEntry) -> Finding:
    if e.signature_valid():
        return _valid(e, Check.SIGNATURE)
    return _bad(e, Check.SIGNATURE, Verdict.VIOLATION, "BadSignature", "signature does not verify under the agent key")


def _policy_check(e: LogEntry, ctx: AuditContext) -> Finding:
    doc = ctx.policy(e.policy)
    if isinstance(doc, tuple):
        reason, detail = doc
        verdict = Verdict.UNVERIFIABLE if reason == "UnknownPolicy" else Verdict.VIOLATION
        return _bad(e, Check.POLICY, verdict, reason, detail)
    if doc.agent_did != e.agent:
        return _bad(e, Check.POLICY, Verdict.VIOLATION, "PolicyAgentMismatch", f"policy belongs to {doc.agent_did}")
    if (e.agent, str(e.policy)) not in ctx.commitments:
        return _bad(e, Check.POLICY, Verdict.UNVERIFIABLE, "UncommittedPolicy", "no ledger commitment by this agent")
    violations = check_action(doc, e)
    if not violations:
        return _valid(e, Check.POLICY)
    kinds = [k for k in VIOLATION_ORDER if any(v.kind == k for v in violations)]
    return _bad(e, Check.POLICY, Verdict.VIOLATION, "+".join(kinds), "; ".join(v.detail for v in violations))


def _anchor_check(e: LogEntry, ctx: AuditContext) -> Finding:
    st = ctx.anchors.status(e)
    if st.state == ANCHORED and merkle_verify(st.proof):
        return _valid(e, Check.ANCHOR, f"ledger {st.ledger_index} leaf {st.proof.leaf_index}")
    if st.state == INCOMPLETE:
        return _bad(
            e, Check.ANCHOR, Verdict.UNVERIFIABLE, INCOMPLETE,
            f"batch at ledger {st.ledger_index} cannot be rebuilt from the supplied traces",
        )
    if st.state in (ROOT_MISMATCH, ANCHORED):
        return _bad(
            e, Check.ANCHOR, Verdict.VIOLATION, ROOT_MISMATCH,
            f"entry not included in the root anchored at ledger {st.ledger_index}",
        )
    return _bad(e, Check.ANCHOR, Verdict.UNVERIFIABLE, "Unanchored", "no anchored batch covers this entry")


def verify_entry(entry: LogEntry, ctx: AuditContext) -> list[Finding]:
    return [
        _identity_check(entry, ctx),
        _signature_check(entry),
        _policy_check(entry, ctx),
        _anchor_check(entry, ctx),
    ]


def _chain_findings(log: TraceLog) -> list[Finding]:
    out = []
    prev: LogEntry | None = None
    for e in log:
        if log.agent is not None and e.agent != log.agent:
            out.append(_bad(e, Check.CHAIN, Verdict.VIOLATION, "AgentMismatch", f"log belongs to {log.agent}"))
        elif e.seq != (prev.seq + 1 if prev else 1):
            out.append(_bad(e, Check.CHAIN, Verdict.VIOLATION, "SeqGap", f"expected seq {prev.seq + 1 if prev else 1}"))
        elif e.prev != (prev.hash if prev else ZERO_DIGEST):
            out.append(_bad(e, Check.CHAIN, Verdict.VIOLATION, "ChainBreak", "prev does not match predecessor hash"))
        elif prev and e.ts_ms < prev.ts_ms:
            out.append(
                _bad(e, Check.CHAIN, Verdict.VIOLATION, "NonMonotonicTimestamp", f"{e.ts_ms} < {prev.ts_ms}")
            )
        else:
            out.append(_valid(e, Check.CHAIN))
        prev = e
    return out


def _rate_findings(log: TraceLog, ctx: AuditContext) -> list[Finding]:
    by_policy: dict[Digest, list[LogEntry]] = defaultdict(list)
    for e in log:
        by_policy[e.policy].append(e)
    out = []
    for policy_hash, entries in by_policy.items():
        doc = ctx.policy(policy_hash)
        if isinstance(doc, tuple) or doc.agent_did != log.agent:
            continue
        try:
            hits = check_rate(doc, entries)
        except UnorderedInput as exc:
            out.extend(_bad(e, Check.RATE, Verdict.UNVERIFIABLE, "UnorderedInput", str(exc)) for e in entries)
            continue
        worst: dict[int, list[str]] = defaultdict(list)
        for seq, rv in hits:
            worst[seq].append(rv.detail)
        for e in entries:
            if e.seq in worst:
                out.append(_bad(e, Check.RATE, Verdict.VIOLATION, "RateViolation", "; ".join(worst[e.seq])))
            else:
                out.append(_valid(e, Check.RATE))
    return out


def verify_trace(log: TraceLog, ctx: AuditContext) -> list[Finding]:
    findings = []
    for e in log:
        findings.extend(verify_entry(e, ctx))
    findings.extend(_chain_findings(log))
    findings.extend(_rate_findings(log, ctx))
    return findings


# lineage

_LINEAGE_RANK = {"CycleDetected": 4, "RefHashMismatch": 3, "DanglingRef": 2, "UpstreamLater": 1}


def _cyclic_nodes(graph: dict[tuple[str, int], set[tuple[str, int]]]) -> set[tuple[str, int]]:
    import networkx as nx

    g = nx.DiGraph()
    for u, targets in graph.items():
        g.add_edges_from((u, v) for v in targets)
    cyclic = {n for comp in nx.strongly_connected_components(g) if len(comp) > 1 for n in comp}
    return cyclic | set(nx.nodes_with_selfloops(g))


def build_lineage(logs: Sequence[TraceLog]) -> tuple[LineageGraph, list[Finding]]:
    """Cross-agent DAG from upstream refs, plus LineageCheck findings.

    Edges exist only for refs whose target is present with a matching hash.
    Cycle detection runs over every ref whose target (agent, seq) exists,
    because refs with matching hashes can never form a cycle on their own.
    """
    index: dict[tuple[str, int], LogEntry] = {}
    for log in logs:
        for e in log:
            index.setdefault(e.key, e)
    edges = []
    ref_graph: dict[tuple[str, int], set[tuple[str, int]]] = defaultdict(set)
    problems: dict[tuple[str, int], list[tuple[str, str]]] = defaultdict(list)
    for e in index.values():
        for r in e.refs:
            target = index.get((r.agent, r.seq))
            where = f"{e.agent}#{e.seq} -> {r.agent}#{r.seq}"
            if target is None:
                problems[e.key].append(("DanglingRef", f"{where}: referenced entry not found"))
                continue
            ref_graph[target.key].add(e.key)
            if target.hash != r.hash:
                problems[e.key].append(("RefHashMismatch", f"{where}: ref hash {r.hash} != entry hash {target.hash}"))
                continue
            edges.append((target.key, e.key))
            if target.ts_ms > e.ts_ms:
                problems[e.key].append(("UpstreamLater", f"{where}: upstream ts_ms {target.ts_ms} > {e.ts_ms}"))
    for key in _cyclic_nodes(ref_graph):
        problems[key].append(("CycleDetected", f"{key[0]}#{key[1]} lies on a reference cycle"))

    findings = []
    for key, e in index.items():
        if not e.refs and key not in problems:
            continue
        found = problems.get(key)
        if not found:
            findings.append(_valid(e, Check.LINEAGE, f"{len(e.refs)} upstream refs"))
            continue
        reason = max((r for r, _ in found), key=_LINEAGE_RANK.__getitem__)
        verdict = Verdict.WARNING if reason == "UpstreamLater" else Verdict.VIOLATION
        findings.append(_bad(e, Check.LINEAGE, verdict, reason, "; ".join(d for _, d in found)))

    nodes = tuple(sorted((e.agent, e.seq, e.hash) for e in index.values()))
    return LineageGraph(nodes, tuple(sorted(set(edges)))), findings


# whole audit


def _dedupe(findings: Iterable[Finding]) -> tuple[Finding, ...]:
    """Keep one finding per (agent, seq, check): the most severe, first seen on ties."""
    best: dict[tuple, Finding] = {}
    for f in findings:
        cur = best.get(f.sort_key)
        if cur is None or _SEVERITY[f.verdict] > _SEVERITY[cur.verdict]:
            best[f.sort_key] = f
    return tuple(sorted(best.values(), key=lambda f: f.sort_key))


def audit_all(
    logs: Sequence[TraceLog],
    ledger: Ledger,
    store: PolicyStore,
    extra_findings: Iterable[Finding] = (),
) -> AuditReport:
    """Audit every log against the ledger and policy store.

    ``extra_findings`` carries problems found before parsing finished, such
    as damaged trace lines reported by :func:`load_traces`.
    """
    ctx = AuditContext(ledger, store, logs)
    findings = list(extra_findings)
    if ctx.ledger_fault is not None:
        idx, reason = ctx.ledger_fault
        findings.append(
            Finding(LEDGER_SUBJECT, idx, Check.CHAIN, Verdict.VIOLATION, reason, "records from here on are not trusted")
        )
    for log in logs:
        findings.extend(verify_trace(log, ctx))
    lineage, lineage_findings = build_lineage(logs)
    findings.extend(lineage_findings)

    attribution = {}
    for log in logs:
        for e in log:
            if e.key in attribution:
                continue
            st = ctx.anchors.status(e)
            attribution[e.key] = Attribution(e.agent, e.policy, st.ledger_index if st.state == ANCHORED else None)

    final = _dedupe(findings)
    return AuditReport(final, lineage, dict(sorted(attribution.items())), overall_of(final))


def load_traces(paths: Sequence[str | os.PathLike]) -> tuple[list[TraceLog], list[Finding], list[str]]:
    """Read trace files leniently for auditing.

    Lines that fail to parse or whose hash does not recompute are dropped and
    reported as ChainCheck violations; everything else is handed to the
    auditor unchecked so chain problems surface as findings.  Returns
    ``(logs, findings, diagnostics)``.  Unreadable files raise IoFailure.
    """
    logs, findings, diagnostics = [], [], []
    for path in paths:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from None
        parsed = parse_lines(data)
        good = [item for _, item in parsed if isinstance(item, LogEntry)]
        agent = good[0].agent if good else _guess_agent(data, path)
        for n, item in parsed:
            if isinstance(item, TraceError):
                diagnostics.append(f"{path}: line {n}: {item.code}: {item}")
                findings.append(Finding(agent, n, Check.CHAIN, Verdict.VIOLATION, item.code, f"{path}: {item}"))
        logs.append(TraceLog.unchecked(agent, good))
    return logs, findings, diagnostics


def _guess_agent(data: bytes, path: str | os.PathLike) -> str:
    first = data.split(b"\n", 1)[0]
    try:
        v = loads(first)
        if isinstance(v, dict) and isinstance(v.get("agent"), str):
            return v["agent"]
    except Exception:
        pass
    return str(path)


def expand_globs(patterns: Iterable[str]) -> list[str]:
    out: list[str] = []
    for pat in patterns:
        matches = sorted(glob.glob(pat))
        out.extend(matches if matches else ([pat] if not glob.has_magic(pat) else []))
    return sorted(dict.fromkeys(out))


def audit_paths(
    trace_paths: Sequence[str | os.PathLike], ledger_path: str | os.PathLike, store_dir: str | os.PathLike
) -> tuple[AuditReport, list[str]]:
    """Audit files on disk; returns the report and per-line diagnostics."""
    if not Path(ledger_path).exists():
        raise IoFailure(f"{ledger_path}: no such ledger")
    ledger = FileLedger(ledger_path)
    logs, findings, diagnostics = load_traces(trace_paths)
    return audit_all(logs, ledger, PolicyStore(store_dir), findings), diagnostics


# rendering


def render_report(report: AuditReport, fmt: str = "interchange") -> bytes:
    if fmt == "interchange":
        return canonical_encode(report.to_value()) + b"\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [
        "trusttrack audit report",
        f"findings: {len(report.findings)} entries: {len(report.attribution)} "
        f"lineage-edges: {len(report.lineage.edges)}",
    ]
    for f in report.findings:
        reason = f.reason or "-"
        detail = f" {f.detail}" if f.detail else ""
        lines.append(f"{f.agent} {f.seq} {f.check.value} {f.verdict.value} {reason}{detail}".replace("\n", " "))
    lines.append(f"overall: {report.overall.value}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_report(data: bytes) -> AuditReport:
    return AuditReport.from_value(loads(data))


TEXT_HEADER_LINES = 2
TEXT_FOOTER_LINES = 1
