"""Attention entropy measurement and windowed aggregation.

Entropy here is always the Shannon entropy of the final query position's
attention row, divided by log N so it lands in [0, 1]. The window keeps
running means per (layer, head) between growth decisions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


def entropy_of_rows(rows: np.ndarray) -> np.ndarray:
    """Normalized entropy over the last axis; 0 log 0 reads as 0."""
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[-1]
    if n < 2:
        raise ValueError("entropy needs at least 2 positions (log N must be positive)")
    if np.any(rows < 0.0):
        raise ValueError("attention rows must be nonnegative")
    sums = rows.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError("attention rows must sum to 1 within 1e-9")
    terms = np.zeros_like(rows)
    nz = rows > 0.0
    terms[nz] = rows[nz] * np.log(rows[nz])
    ent = -terms.sum(axis=-1) / np.log(n)
    return np.clip(ent, 0.0, 1.0)


def head_entropy(row: np.ndarray) -> float:
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("head_entropy takes a single attention row")
    return float(entropy_of_rows(row))


@dataclass(frozen=True)
class AttentionTrace:
    layer: int
    head: int
    row: np.ndarray
    entropy: float

    @classmethod
    def from_row(cls, layer: int, head: int, row: np.ndarray) -> "AttentionTrace":
        row = np.asarray(row, dtype=np.float64)
        return cls(layer=layer, head=head, row=row, entropy=head_entropy(row))


def layer_entropy(traces: list[AttentionTrace], n_head: int) -> float:
    if len(traces) != n_head:
        raise ValueError(f"expected {n_head} traces, got {len(traces)}")
    layers = {t.layer for t in traces}
    if len(layers) != 1:
        raise ValueError("traces must all come from one layer")
    heads = {t.head for t in traces}
    if len(heads) != n_head:
        raise ValueError("duplicate or missing head traces")
    return float(np.mean([t.entropy for t in traces]))


def intra_layer_variance(head_means) -> float:
    values = np.asarray(list(head_means), dtype=np.float64)
    if values.size < 2:
        raise ValueError("variance needs at least 2 heads")
    return float(np.mean((values - values.mean()) ** 2))


class TraceCollector:
    """Receives base-pass attention rows from the forward pass.

    Rows arrive in the activation dtype; they are renormalized in 64-bit at
    capture so downstream entropy math sees exact simplex rows.
    """

    def __init__(self) -> None:
        self.rows: dict[tuple[int, int], np.ndarray] = {}

    def record(self, layer: int, head: int, rows: np.ndarray) -> None:
        r = np.asarray(rows, dtype=np.float64)
        r = r / r.sum(axis=-1, keepdims=True)
        self.rows[(layer, head)] = r

    def batch_entropies(self) -> dict[tuple[int, int], float]:
        """Per (layer, head): entropy per sample, then the batch mean."""
        return {
            key: float(entropy_of_rows(rows).mean()) for key, rows in self.rows.items()
        }


@dataclass
class EntropyWindow:
    """Running means of per-head entropy since the last growth decision."""

    batches: int = 0
    _sums: dict[tuple[int, int], float] = field(default_factory=dict)
    _keys: frozenset | None = None

    def update(self, batch_entropies: Mapping[tuple[int, int], float]) -> None:
        keys = frozenset(batch_entropies)
        if self._keys is None:
            self._keys = keys
            self._sums = {k: 0.0 for k in keys}
        elif keys != self._keys:
            raise ValueError("trace set changed between window updates")
        for key, value in batch_entropies.items():
            self._sums[key] += float(value)
        self.batches += 1

    def reset(self) -> None:
        self.batches = 0
        self._sums = {}
        self._keys = None

    def head_means(self) -> dict[tuple[int, int], float]:
        if self.batches == 0:
            raise ValueError("window is empty")
        return {k: s / self.batches for k, s in self._sums.items()}

    def layer_means(self) -> dict[int, float]:
        by_layer: dict[int, list[float]] = {}
        for (layer, _), mean in self.head_means().items():
            by_layer.setdefault(layer, []).append(mean)
        return {layer: float(np.mean(vals)) for layer, vals in by_layer.items()}

    def layer_variances(self) -> dict[int, float]:
        by_layer: dict[int, list[float]] = {}
        for (layer, _), mean in self.head_means().items():
            by_layer.setdefault(layer, []).append(mean)
        return {
            layer: intra_layer_variance(vals)
            for layer, vals in by_layer.items()
            if len(vals) >= 2
        }

    def state(self) -> dict:
        return {
            "batches": self.batches,
            "sums": {f"{l}:{h}": v for (l, h), v in self._sums.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "EntropyWindow":
        window = cls()
        sums = {
            (int(k.split(":")[0]), int(k.split(":")[1])): float(v)
            for k, v in state["sums"].items()
        }
        window.batches = int(state["batches"])
        window._sums = sums
        window._keys = frozenset(sums) if sums else None
        return window
