"""Deterministic hashing, seeding, and normalization helpers.

Python's builtin hash() is salted per process, so every derived seed in the
pipeline goes through blake2b instead. All text comparison in the toolkit is
done byte-wise on NFC-normalized strings.
"""

from __future__ import annotations

import hashlib
import json
import unicodedata
from pathlib import Path


def nfc(text: str) -> str:
    """Unicode NFC normalization, applied to every text field at construction."""
    return unicodedata.normalize("NFC", text)


def stable_hash(*parts: object) -> int:
    """64-bit unsigned hash of the parts, stable across processes and platforms."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


def derive_seed(root_seed: int, *scope: object) -> int:
    """Per-stage or per-item seed derived from a root seed.

    Seeding by (root, id) rather than by position makes outputs independent
    of input ordering and of how work is scheduled.
    """
    return stable_hash(root_seed, *scope) % (2**32)


def config_hash(obj: object) -> str:
    """sha256 of a canonical JSON rendering; identifies a run configuration."""
    payload = json.dumps(obj, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
