"""Typed error with a stable machine-readable code.

Every failure the platform reports carries one of the short codes below so
callers (and the wire protocols) can branch on `err.code` instead of parsing
messages. Service servers serialize these as ``{"error": code, "detail": ...}``
and clients re-raise them unchanged.
"""

from __future__ import annotations


class VpeError(Exception):
    """An error with a stable short code, e.g. ``NO_TOPIC`` or ``BAD_OFFSET``."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail
