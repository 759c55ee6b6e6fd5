"""Stable seed derivation so adding sweep points never perturbs existing ones."""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Hash the parts into a 64-bit seed.

    Uses repr() of each part, so floats keep their shortest round-trip form
    and the mapping is stable across runs and platforms.
    """
    key = "|".join(repr(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")
