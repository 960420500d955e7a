"""Small builders shared by the unit tests."""

from __future__ import annotations

from trusttrack.identity import AgentIdentity, generate_keypair, register_identity
from trusttrack.policy import IntRange, MaxLength, OneOf, PolicyDocument, RateLimit, Required

T0 = 1_000_000


def keypair(n: int):
    return generate_keypair(bytes([n]) * 32)


def registered(ledger, n: int, ts: int = 1):
    kp = keypair(n)
    register_identity(AgentIdentity.for_keypair(kp, {"n": n}), kp, ledger, now=ts)
    return kp


def policy_for(did: str, **overrides) -> PolicyDocument:
    fields = dict(
        policy_id="test-policy",
        agent_did=did,
        version=1,
        allowed_actions=frozenset({"summarize", "redact"}),
        not_before_ms=0,
        not_after_ms=T0 * 10,
        parameter_constraints={
            "summarize": {
                "words": IntRange(10, 500),
                "style": OneOf(("brief", "full")),
                "title": MaxLength(8),
                "source": Required(),
            }
        },
        rate_limits=(RateLimit(1_000, 3),),
        jurisdictions=frozenset({"EU"}),
        data_boundaries=frozenset({"public", "pseudonymized"}),
    )
    fields.update(overrides)
    return PolicyDocument(**fields)


GOOD_PARAMS = {"words": 100, "style": "brief", "title": "short", "source": "doc-1"}
GOOD_CTX = {"jurisdiction": "EU", "data_labels": ["public"]}
