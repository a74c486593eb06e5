"""Small shared helpers: content hashing and canonical JSON."""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def array_hash(arr: np.ndarray) -> str:
    """Content digest of an array, covering dtype, shape, and bytes."""
    a = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def text_hash(text: str) -> int:
    """Stable 32-bit hash of a string (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def canonical_json(obj: Any) -> str:
    """JSON with sorted keys and no whitespace jitter, for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def json_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def freeze_array(arr: np.ndarray) -> np.ndarray:
    """Return a read-only copy, for immutable containers."""
    out = np.array(arr, copy=True)
    out.flags.writeable = False
    return out
