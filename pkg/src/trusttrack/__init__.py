"""Verifiable agent identity, policy commitments, signed behavior logs and audit."""

from __future__ import annotations

__version__ = "0.1.0"
