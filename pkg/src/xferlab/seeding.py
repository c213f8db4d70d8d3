"""Hash-derived seeds and content digests shared by every module."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from an ordered tuple of printable parts."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") >> 1


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def digest(*chunks: bytes, size: int = 16) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()[:size]


def array_digest(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return digest(repr(a.shape).encode(), a.tobytes())
