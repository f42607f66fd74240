"""Counter-based splittable randomness.

Every consumer derives its own generator from (seed, purpose tag, index) via
SHA-256 into a Philox key. Streams never share state, so adding a draw in one
place (say, a growth event) cannot shift batch order or parameter init.
"""

from __future__ import annotations

import hashlib

import numpy as np


def make_generator(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    material = f"{int(seed)}:{tag}:{int(index)}".encode("utf-8")
    digest = hashlib.sha256(material).digest()
    # Philox keys are two u64 words; fix byte order so keys match across platforms.
    key = np.array(
        [
            int.from_bytes(digest[0:8], "little"),
            int.from_bytes(digest[8:16], "little"),
        ],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def normal(
    shape: tuple[int, ...],
    std: float,
    seed: int,
    tag: str,
    index: int = 0,
    dtype=np.float32,
) -> np.ndarray:
    gen = make_generator(seed, tag, index)
    return (gen.standard_normal(shape, dtype=np.float64) * std).astype(dtype)
