"""Canonical serialization and digests.

Every digest in the system (contract state, blocks, broker books, match
output, run reports) is sha256 over one canonical JSON form, so that
independent re-execution reproduces digests byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from fractions import Fraction
from typing import Any


def canon(obj: Any) -> Any:
    """Normalize a value tree to plain JSON types with a stable encoding."""
    if obj is None or isinstance(obj, (bool, int, str)):
        return obj
    if isinstance(obj, Fraction):
        return f"frac:{obj.numerator}/{obj.denominator}"
    if isinstance(obj, float):
        # floats appear only in geometry (locations, radii); repr is exact
        return f"float:{obj!r}"
    if isinstance(obj, (bytes, bytearray)):
        return f"hex:{bytes(obj).hex()}"
    if isinstance(obj, (list, tuple)):
        return [canon(x) for x in obj]
    if isinstance(obj, dict):
        out = {}
        for key, value in obj.items():
            if not isinstance(key, str):
                raise TypeError(f"non-string dict key {key!r} cannot be canonicalized")
            out[key] = canon(value)
        return out
    if hasattr(obj, "snapshot"):
        return canon(obj.snapshot())
    raise TypeError(f"cannot canonicalize {type(obj).__name__}")


def canon_json(obj: Any) -> str:
    return json.dumps(canon(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def digest(obj: Any) -> str:
    return hashlib.sha256(canon_json(obj).encode("utf-8")).hexdigest()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
