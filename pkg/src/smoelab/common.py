"""Shared error types and seed derivation helpers."""

from __future__ import annotations

import hashlib
import json


class ConfigError(ValueError):
    """Raised when a configuration value violates a documented precondition."""


class NumericDomainError(ValueError):
    """Raised when an operation receives non-finite input."""


_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 mixing step; maps a 64-bit state to a well-mixed output."""
    x = (x + _SPLITMIX_GAMMA) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(root_seed: int, label: str) -> int:
    """Derive an independent sub-seed from a root seed and a purpose label.

    Components seeded through distinct labels (data, init, shuffling) are
    independently reproducible: changing one label's consumer never perturbs
    the streams of the others.
    """
    h = int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")
    return splitmix64((root_seed & _MASK64) ^ h)


def stable_json(obj) -> str:
    """Canonical JSON used for hashing: sorted keys, no whitespace drift."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Hex digest identifying a logical configuration (no timing/host fields)."""
    return hashlib.sha256(stable_json(obj).encode()).hexdigest()[:16]
