"""Rotary phase tables.

Tables extend to any requested length with the base unchanged, which is what
the long-context evaluation relies on.
"""

from __future__ import annotations

import numpy as np


def rotary_tables(
    n_positions: int, d_head: int, base: float = 10000.0, dtype=np.float32
) -> tuple[np.ndarray, np.ndarray]:
    if d_head % 2 != 0:
        raise ValueError("d_head must be even")
    half = d_head // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(n_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)
