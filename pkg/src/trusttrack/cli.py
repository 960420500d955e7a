"""``ttk`` command line.

Exit codes: 0 success or VALID, 1 the audit found problems or the operation
was refused, 2 usage error, 3 unreadable or corrupt input.  Machine output
goes to stdout (canonical JSON unless ``--format text``), diagnostics to
stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from ._fsutil import atomic_write
from .anchor import anchors_from_ledger, flush_batches, parse_strategy
from .audit import Verdict, audit_paths, expand_globs, render_report
from .canonical import CanonicalError, Digest, canonical_encode, loads
from .errors import (
    CorruptLedger,
    DigestMismatch,
    InvalidPolicy,
    InvalidSpec,
    IoFailure,
    LedgerAppendFailure,
    MalformedDid,
    MalformedInput,
    MalformedKey,
    MalformedSeed,
    NonMonotonicTimestamp,
    TraceError,
    TrustTrackError,
)
from .identity import (
    AgentIdentity,
    IdentityStatus,
    generate_keypair,
    load_keyfile,
    now_ms,
    public_key_of,
    register_identity,
    resolve,
    revoke_identity,
    save_keyfile,
)
from .ledger import FileLedger
from .policy import PolicyDocument, PolicyStore, commit_policy, validate_policy
from .scenarios import BUILTINS, FAULT_KINDS, default_fault, run_scenario
from .trace import ANCHOR_CLASSES, EntryRef, TraceLog, build_entry, export_trace, import_trace, seal_entry

EXIT_OK, EXIT_FINDINGS, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _emit(value: object) -> None:
    sys.stdout.buffer.write(canonical_encode(value) + b"\n")
    sys.stdout.flush()


def _read_value(path: str, what: str) -> object:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from None
    try:
        return loads(data)
    except CanonicalError as exc:
        raise CanonicalError(f"{what} {path}: {exc}") from None


def _read_map(path: str | None, what: str) -> dict:
    if path is None:
        return {}
    v = _read_value(path, what)
    if not isinstance(v, dict):
        raise CanonicalError(f"{what} {path}: expected a JSON object")
    return v


def _existing_ledger(path: str) -> FileLedger:
    if not Path(path).is_file():
        raise IoFailure(f"{path}: no such ledger")
    return FileLedger(path)


def _ts(args) -> int:
    return args.ts_ms if args.ts_ms is not None else now_ms()


def _digest_arg(text: str) -> Digest:
    try:
        return Digest.from_hex(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a 64-char lowercase hex digest: {text!r}") from None


def _ref_arg(text: str) -> EntryRef:
    agent, seq, h = (text.rsplit(":", 2) + ["", ""])[:3]
    try:
        return EntryRef(agent, int(seq), Digest.from_hex(h))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected agent:seq:hash, got {text!r}") from None


def _load_policy_file(path: str) -> PolicyDocument:
    return PolicyDocument.from_value(_read_value(path, "policy"))


# commands


def cmd_keygen(args) -> int:
    seed = None
    if args.seed_hex is not None:
        try:
            seed = bytes.fromhex(args.seed_hex)
        except ValueError:
            raise MalformedSeed("--seed-hex must be hex") from None
    kp = generate_keypair(seed)
    save_keyfile(kp, args.out)
    _emit({"did": kp.did, "key_file": str(args.out)})
    return EXIT_OK


def cmd_id_register(args) -> int:
    kp = load_keyfile(args.key)
    metadata = _read_map(args.metadata, "metadata")
    idx = register_identity(AgentIdentity.for_keypair(kp, metadata), kp, FileLedger(args.ledger), now=_ts(args))
    _emit({"did": kp.did, "ledger_index": idx})
    return EXIT_OK


def cmd_id_resolve(args) -> int:
    public_key_of(args.did)  # malformed input is a usage error, checked before any I/O
    res = resolve(args.did, _existing_ledger(args.ledger))
    out = {"did": args.did, "status": res.status.value}
    if res.identity is not None:
        out["metadata"] = res.identity.metadata
        out["registered_at_index"] = res.identity.registered_at
    if res.revocation is not None:
        out["revoked_at_ms"] = res.revocation.revoked_at_ms
        out["revocation_reason"] = res.revocation.reason
        out["revocation_index"] = res.revocation_index
    _emit(out)
    return EXIT_OK if res.status is IdentityStatus.REGISTERED else EXIT_FINDINGS


def cmd_id_revoke(args) -> int:
    kp = load_keyfile(args.key)
    ts = _ts(args)
    idx = revoke_identity(kp.did, kp, args.reason, ts, _existing_ledger(args.ledger))
    _emit({"did": kp.did, "revoked_at_ms": ts, "ledger_index": idx})
    return EXIT_OK


def cmd_policy_validate(args) -> int:
    raw = _read_value(args.policy, "policy")
    try:
        doc = PolicyDocument.from_value(raw)
    except InvalidPolicy as exc:
        _emit({"valid": False, "issues": [{"code": "Malformed", "detail": str(exc)}], "policy_hash": None})
        return EXIT_FINDINGS
    issues = validate_policy(doc)
    _emit(
        {
            "valid": not issues,
            "issues": [{"code": i.code, "detail": i.detail} for i in issues],
            "policy_hash": str(doc.policy_hash),
        }
    )
    return EXIT_FINDINGS if issues else EXIT_OK


def cmd_policy_commit(args) -> int:
    kp = load_keyfile(args.key)
    doc = _load_policy_file(args.policy)
    c = commit_policy(doc, kp, _ts(args), _existing_ledger(args.ledger), PolicyStore(args.store))
    _emit({"policy_hash": str(c.policy_hash), "agent_did": c.agent_did, "ledger_index": c.ledger_index})
    return EXIT_OK


def cmd_log_append(args) -> int:
    kp = load_keyfile(args.key)
    trace = Path(args.trace)
    log = import_trace(trace) if trace.exists() else TraceLog(kp.did)
    if log.agent != kp.did:
        raise UsageError(f"{trace} belongs to {log.agent}, not {kp.did}")
    params = _read_map(args.params, "params")
    ctx = _read_map(args.ctx, "ctx")
    try:
        entry = build_entry(
            log, args.policy_hash, args.action, params, args.ts_ms,
            ctx=ctx, inputs=args.input, outputs=args.output, refs=args.ref, anchor_class=args.anchor_class,
        )
    except NonMonotonicTimestamp as exc:
        raise UsageError(str(exc)) from None
    entry = seal_entry(entry, kp)
    log.append(entry)
    export_trace(log, trace)
    _emit(entry.to_value())
    return EXIT_OK


def cmd_anchor_flush(args) -> int:
    paths = expand_globs(args.traces)
    if not paths:
        raise IoFailure(f"no trace files match {' '.join(args.traces)}")
    ledger = _existing_ledger(args.ledger)
    kp = load_keyfile(args.key)
    covered = {k for a in anchors_from_ledger(ledger) for k in a.keys()}
    pending = [e for p in paths for e in import_trace(p) if e.key not in covered]
    anchors = flush_batches(pending, args.strategy, kp, _ts(args), ledger)
    _emit(
        {
            "anchors": [
                {"batch_id": a.batch_id, "ledger_index": a.ledger_index, "leaf_count": a.leaf_count,
                 "merkle_root": str(a.merkle_root)}
                for a in anchors
            ],
            "pending": len(pending),
        }
    )
    return EXIT_OK


def cmd_ledger_verify(args) -> int:
    ledger = _existing_ledger(args.ledger)
    fault = ledger.first_fault()
    _emit(
        {
            "valid": fault is None,
            "length": len(ledger),
            "fault": None if fault is None else {"idx": fault[0], "reason": fault[1]},
        }
    )
    if fault is not None:
        print(f"{args.ledger}: line {fault[0] + 1}: {fault[1]}", file=sys.stderr)
    return EXIT_OK if fault is None else EXIT_FINDINGS


def cmd_ledger_checkpoint(args) -> int:
    print(_existing_ledger(args.ledger).checkpoint())
    return EXIT_OK


def _audit(args):
    paths = expand_globs(args.traces)
    if not paths:
        raise IoFailure(f"no trace files match {' '.join(args.traces)}")
    report, diagnostics = audit_paths(paths, args.ledger, args.store)
    for line in diagnostics:
        print(line, file=sys.stderr)
    return report


def cmd_verify(args) -> int:
    report = _audit(args)
    problems = report.problems()
    if args.format == "text":
        for f in problems:
            print(f"{f.agent} {f.seq} {f.check.value} {f.verdict.value} {f.reason} {f.detail}".rstrip())
        print(f"overall: {report.overall.value}")
    else:
        _emit({"findings": [f.to_value() for f in problems], "overall": report.overall.value})
    for f in problems:
        if f.verdict is Verdict.VIOLATION:
            print(f"{f.agent}#{f.seq}: {f.check.value}: {f.reason}", file=sys.stderr)
    return report.exit_code


def cmd_audit_report(args) -> int:
    report = _audit(args)
    data = render_report(report, args.format)
    if args.out:
        atomic_write(Path(args.out), data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    return report.exit_code


def cmd_scenario_run(args) -> int:
    spec = BUILTINS[args.name]()
    spec = spec.with_faults(*(default_fault(spec, k) for k in args.fault))
    out = args.out or f"scenario-{args.name}-{args.seed}"
    art = run_scenario(spec, args.seed, out)
    _emit(
        {
            "scenario": args.name,
            "seed": args.seed,
            "out": str(art.root),
            "traces": [str(p) for p in art.trace_paths],
            "expected_overall": art.manifest["expected_overall"],
            "expected_findings": len(art.manifest["expected_findings"]),
        }
    )
    return EXIT_OK


# parser


def _env_flag(p: argparse.ArgumentParser, flag: str, env: str, help: str) -> None:
    default = os.environ.get(env)
    p.add_argument(flag, default=default, required=default is None, help=f"{help} (default: ${env})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttk", description="Agent identity, policy, trace and audit tooling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def ts_flag(p):
        p.add_argument("--ts-ms", type=int, help="timestamp in ms since epoch (default: now)")

    p = sub.add_parser("keygen", help="create an Ed25519 key file")
    p.add_argument("--out", required=True, help="key file to write (mode 0600)")
    p.add_argument("--seed-hex", help="32-byte seed as 64 hex chars (default: random)")
    p.set_defaults(func=cmd_keygen)

    ident = sub.add_parser("id", help="identity registration and lookup")
    isub = ident.add_subparsers(dest="id_command", required=True, metavar="command")
    p = isub.add_parser("register", help="register the key's DID on the ledger")
    p.add_argument("--key", required=True)
    _env_flag(p, "--ledger", "TTK_LEDGER", "ledger file")
    p.add_argument("--metadata", help="JSON file with identity metadata")
    ts_flag(p)
    p.set_defaults(func=cmd_id_register)
    p = isub.add_parser("resolve", help="look up a DID (exit 1 unless registered)")
    p.add_argument("--did", required=True)
    _env_flag(p, "--ledger", "TTK_LEDGER", "ledger file")
    p.set_defaults(func=cmd_id_resolve)
    p = isub.add_parser("revoke", help="revoke the key's DID")
    p.add_argument("--key", required=True)
    _env_flag(p, "--ledger", "TTK_LEDGER", "ledger file")
    p.add_argument("--reason", required=True)
    ts_flag(p)
    p.set_defaults(func=cmd_id_revoke)

    pol = sub.add_parser("policy", help="policy validation and commitment")
    psub = pol.add_subparsers(dest="policy_command", required=True, metavar="command")
    p = psub.add_parser("validate", help="check a policy document (exit 1 if invalid)")
    p.add_argument("--policy", required=True)
    p.set_defaults(func=cmd_policy_validate)
    p = psub.add_parser("commit", help="store a policy and commit its hash to the ledger")
    p.add_argument("--key", required=True)
    p.add_argument("--policy", required=True)
    _env_flag(p, "--ledger", "TTK_LEDGER", "ledger file")
    _env_flag(p, "--store", "TTK_STORE", "policy store directory")
    ts_flag(p)
    p.set_defaults(func=cmd_policy_commit)

    log = sub.add_parser("log", help="behavior logging")
    lsub = log.add_subparsers(dest="log_command", required=True, metavar="command")
    p = lsub.add_parser("append", help="seal and append one entry to a trace file")
    p.add_argument("--key", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--policy-hash", required=True, type=_digest_arg)
    p.add_argument("--action", required=True)
    p.add_argument("--params", required=True, help="JSON file with action parameters")
    p.add_argument("--ts-ms", required=True, type=int)
    p.add_argument("--ctx", help="JSON file with context")
    p.add_argument("--ref", action="append", default=[], type=_ref_arg, help="upstream entry as agent:seq:hash")
    p.add_argument("--input", action="append", default=[], type=_digest_arg, help="input digest")
    p.add_argument("--output", action="append", default=[], type=_digest_arg, help="output digest")
    p.add_argument("--anchor-class", choices=ANCHOR_CLASSES, default="routine")
    p.set_defaults(func=cmd_log_append)

    anc = sub.add_parser("anchor", help="Merkle batch anchoring")
    asub = anc.add_subparsers(dest="anchor_command", required=True, metavar="command")
    p = asub.add_parser("flush", help="anchor trace entries not yet covered by the ledger")
    p.add_argument("--traces", required=True, nargs="+", help="trace files or glob patterns")
    _env_flag(p, "--ledger", "TTK_LEDGER", "ledger file")
    p.add_argument("--key", required=True, help="submitter key file")
    p.add_argument("--strategy", required=True, type=_strategy_arg, help="every-n:N | critical[:N] | manual")
    ts_flag(p)
    p.set_defaults(func=cmd_anchor_flush)

    led = sub.add_parser("ledger", help="ledger inspection")
    dsub = led.add_subparsers(dest="ledger_command", required=True, metavar="command")
    p = dsub.add_parser("verify", help="check the record hash chain")
    _env_flag(p, "--ledger", "TTK_LEDGER", "ledger file")
    p.set_defaults(func=cmd_ledger_verify)
    p = dsub.add_parser("checkpoint", help="print idx:<n> rhash:<hex> for the tail")
    _env_flag(p, "--ledger", "TTK_LEDGER", "ledger file")
    p.set_defaults(func=cmd_ledger_checkpoint)

    for name, func, helptext in (
        ("verify", cmd_verify, "audit traces and print only the problems"),
        (None, cmd_audit_report, "full audit report"),
    ):
        if name is None:
            aud = sub.add_parser("audit", help="audit reports")
            p = aud.add_subparsers(dest="audit_command", required=True, metavar="command").add_parser(
                "report", help=helptext
            )
            p.add_argument("--out", help="write the report here instead of stdout")
        else:
            p = sub.add_parser(name, help=helptext)
        p.add_argument("--traces", required=True, nargs="+", help="trace files or glob patterns")
        _env_flag(p, "--ledger", "TTK_LEDGER", "ledger file")
        _env_flag(p, "--store", "TTK_STORE", "policy store directory")
        p.add_argument("--format", choices=("interchange", "text"), default="interchange")
        p.set_defaults(func=func)

    scen = sub.add_parser("scenario", help="deterministic demo workflows")
    ssub = scen.add_subparsers(dest="scenario_command", required=True, metavar="command")
    p = ssub.add_parser("run", help="generate a scenario directory")
    p.add_argument("name", choices=sorted(BUILTINS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default: scenario-<name>-<seed>)")
    p.add_argument("--fault", action="append", default=[], choices=FAULT_KINDS, help="inject a fault (repeatable)")
    p.set_defaults(func=cmd_scenario_run)
    return parser


def _strategy_arg(text: str):
    try:
        return parse_strategy(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


_USAGE_ERRORS = (UsageError, MalformedDid, MalformedSeed, MalformedInput, InvalidSpec)
_IO_ERRORS = (
    IoFailure,
    CorruptLedger,
    CanonicalError,
    MalformedKey,
    TraceError,
    DigestMismatch,
    LedgerAppendFailure,
    OSError,
)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"ttk: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _IO_ERRORS as exc:
        code = exc.code if isinstance(exc, TrustTrackError) else type(exc).__name__
        print(f"ttk: {code}: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrustTrackError as exc:
        print(f"ttk: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_FINDINGS


def main() -> None:
    sys.exit(run())
