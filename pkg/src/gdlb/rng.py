"""Named random substreams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("data", "init", "train", "eval")


def _key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def substream(root: int, *names: str | int) -> np.random.Generator:
    """Independent generator for ``(root, names...)``; stable across runs and
    platforms because it only depends on the seed and the names."""
    keys = [_key(n) if isinstance(n, str) else int(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence([int(root), *keys]))


def subseed(root: int, *names: str | int) -> int:
    return int(substream(root, *names).integers(0, 2**31 - 1))


def stable_hash(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")
