"""Deterministic, addressable random streams.

Every random draw in the project comes from a counter-based Philox4x64-10
bit generator (numpy's ``np.random.Philox``).  The 128-bit Philox key is
derived from a sequence of string/int parts with FNV-1a (64-bit), one lane
per FNV seed constant, so a stream address like ``("subsample", slide_uid,
epoch)`` maps to the same generator on every platform and every run.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

# Per-lane tweaks so the two key words differ even for short part lists.
_LANE_SALTS = (0x0, 0x9E3779B97F4A7C15)


def _fnv1a(data: bytes, state: int) -> int:
    for byte in data:
        state = ((state ^ byte) * _FNV_PRIME) & _MASK64
    return state


def _encode_part(part) -> bytes:
    if isinstance(part, (int, np.integer)):
        return b"i" + int(part).to_bytes(8, "little", signed=True)
    if isinstance(part, str):
        raw = part.encode("utf-8")
        return b"s" + len(raw).to_bytes(4, "little") + raw
    raise TypeError(f"stream address parts must be str or int, got {type(part)!r}")


def derive_key(*parts) -> tuple[int, int]:
    """Fold the parts into two 64-bit words (one FNV-1a pass per lane)."""
    blob = b"".join(_encode_part(p) for p in parts)
    return tuple(_fnv1a(blob, (_FNV_OFFSET ^ salt) & _MASK64) for salt in _LANE_SALTS)


def rng_for(*parts) -> np.random.Generator:
    """Generator for the stream addressed by ``parts``."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))
