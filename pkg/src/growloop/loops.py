"""Loop policy vocabulary: directives, head selection, and the
weighted-contribution analysis behind the flow export.

The loop update itself lives in model.transformer next to the block forward;
this module stays free of model imports so schedulers and reports can use it
standalone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class LoopDivergenceError(RuntimeError):
    """A loop iterate blew past the divergence guard."""

    def __init__(self, iteration: int, ratio: float):
        super().__init__(
            f"loop iterate {iteration} grew to {ratio:.3g}x the input magnitude"
        )
        self.iteration = iteration


@dataclass(frozen=True)
class HeadSet:
    layer: int
    members: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(set(self.members)) != len(self.members):
            raise ValueError("head indices must be unique")
        if any(m < 0 for m in self.members):
            raise ValueError("head indices must be nonnegative")
        if tuple(sorted(self.members)) != self.members:
            raise ValueError("head indices must be sorted")


@dataclass(frozen=True)
class LoopDirective:
    """What a layer does beyond its plain forward.

    kind: none | head_loop | block_loop | mask
    heads: loop set S for head_loop, the masked set for mask
    depth: extra iterations K
    """

    kind: str = "none"
    heads: tuple[int, ...] = ()
    depth: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "head_loop", "block_loop", "mask"):
            raise ValueError(f"unknown directive kind {self.kind!r}")
        if self.depth < 0:
            raise ValueError("loop depth must be nonnegative")
        if self.kind == "block_loop" and self.depth < 1:
            raise ValueError("block_loop needs depth >= 1")

    @classmethod
    def none(cls) -> "LoopDirective":
        return cls()

    @classmethod
    def head_loop(cls, heads: Sequence[int], depth: int) -> "LoopDirective":
        return cls(kind="head_loop", heads=tuple(sorted(heads)), depth=depth)

    @classmethod
    def block_loop(cls, depth: int) -> "LoopDirective":
        return cls(kind="block_loop", depth=depth)

    @classmethod
    def mask(cls, heads: Sequence[int]) -> "LoopDirective":
        return cls(kind="mask", heads=tuple(sorted(heads)))


def select_heads(layer: int, entropies: Sequence[float], h: int) -> HeadSet:
    """Indices of the h highest entropies; ties break toward the lower index."""
    values = [float(e) for e in entropies]
    if h < 1:
        raise ValueError("h must be at least 1")
    if h > len(values):
        raise ValueError(f"h={h} exceeds {len(values)} heads")
    if not all(np.isfinite(values)):
        raise ValueError("entropies must be finite")
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return HeadSet(layer=layer, members=tuple(sorted(order[:h])))


def select_low_entropy_heads(layer: int, entropies: Sequence[float], h: int) -> HeadSet:
    """Mirror selection used by the low-entropy ablation arm."""
    values = [float(e) for e in entropies]
    if h < 1 or h > len(values):
        raise ValueError("h out of range")
    order = sorted(range(len(values)), key=lambda i: (values[i], i))
    return HeadSet(layer=layer, members=tuple(sorted(order[:h])))


def weighted_attention_contribution(row: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Per token j: attention weight times the Euclidean norm of V_j."""
    row = np.asarray(row, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if row.shape[0] != values.shape[0]:
        raise ValueError("row and value count differ")
    return row * np.linalg.norm(values, axis=-1)


class ContributionFlow:
    """Collects weighted contributions per loop iteration for the flow export."""

    def __init__(self) -> None:
        self.records: list[dict] = []

    def record(
        self, layer: int, head: int, loop_index: int, rows: np.ndarray, values: np.ndarray
    ) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        for sample in range(rows.shape[0]):
            contribution = weighted_attention_contribution(rows[sample], values[sample])
            self.records.append(
                {
                    "sample": sample,
                    "layer": layer,
                    "head": head,
                    "loop_index": loop_index,
                    "contribution": contribution,
                }
            )

    def to_json_objects(self) -> list[dict]:
        out = []
        for rec in self.records:
            flow = [
                {
                    "loop_index": rec["loop_index"],
                    "token_index": j,
                    "contribution": float(c),
                }
                for j, c in enumerate(rec["contribution"])
            ]
            out.append(
                {
                    "sample": rec["sample"],
                    "layer": rec["layer"],
                    "head": rec["head"],
                    "flow": flow,
                }
            )
        return out
