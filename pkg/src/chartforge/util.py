"""Small shared utilities: canonical JSON, atomic file writes, sortable ids.

Everything that must be byte-stable across runs funnels through this module,
so determinism decisions live in exactly one place.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from pathlib import Path

# Crockford base32, the ULID alphabet.
_B32 = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"


def canonical_json(value) -> str:
    """Serialize with sorted keys and compact separators.

    Snapshots, events, and manifests all use this form so that replaying a
    log reproduces files byte for byte.
    """
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_text_atomic(path: Path, text: str) -> None:
    """Write via temp-file-plus-rename so readers never see a torn file."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_bytes_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def stable_int_digest(text: str) -> int:
    """A platform-independent 64-bit integer digest, for seeding RNG streams."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _encode_b32(value: int, width: int) -> str:
    chars = []
    for _ in range(width):
        chars.append(_B32[value & 0x1F])
        value >>= 5
    return "".join(reversed(chars))


def _ulid(time_part: int, rand_part: int) -> str:
    return _encode_b32(time_part & ((1 << 48) - 1), 10) + _encode_b32(
        rand_part & ((1 << 80) - 1), 16
    )


def wall_ulid() -> str:
    """A fresh ULID from wall-clock milliseconds; used for default run ids."""
    return _ulid(int(time.time() * 1000), int.from_bytes(os.urandom(10), "big"))


class DerivedIds:
    """Deterministic ULID-format id allocator.

    Ids are content-free 26-char Crockford base32 strings: the time slot
    carries the allocation index (cosmetic sortability within a namespace),
    the random slot is a seeded hash of (seed, namespace, index). The same
    seed and namespace always yield the same ids, which keeps identifiers
    stable across crash-resumed and re-run pipelines. Ordering is never
    derived from ids except for display.
    """

    def __init__(self, seed: int | None = None):
        self._seed = 0 if seed is None else int(seed)

    def id_for(self, namespace: str, index: int) -> str:
        material = f"{self._seed}|{namespace}|{index}"
        rand = int.from_bytes(hashlib.sha256(material.encode()).digest()[:10], "big")
        return _ulid(index, rand)


class Clock:
    """Injectable clock. The logical variant ticks a counter, which keeps
    event timestamps deterministic for seeded runs."""

    def __init__(self, logical: bool = False):
        self._logical = logical
        self._tick = 0
        self._lock = threading.Lock()

    def now(self) -> float:
        if not self._logical:
            return time.time()
        with self._lock:
            self._tick += 1
            return float(self._tick)
