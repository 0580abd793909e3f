"""Small shared helpers: seed derivation and file hashing."""

from __future__ import annotations

import hashlib
from pathlib import Path

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix_seed(seed: int, *keys: int) -> int:
    """Stable sub-seed derivation: independent streams per (seed, keys) tuple.

    Keeps per-part noise decoupled so replaying one part never shifts another.
    """
    h = _splitmix64(seed & _MASK64)
    for k in keys:
        h = _splitmix64(h ^ ((k & _MASK64) * 0xD6E8FEB86659FD93 & _MASK64))
    # torch.Generator seeds must fit in a signed 64-bit int
    return h & 0x7FFFFFFFFFFFFFFF


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: str | Path) -> dict[str, str]:
    """Relative path -> sha256 for every file under root (sorted, reproducible)."""
    root = Path(root)
    return {
        str(p.relative_to(root)): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }
