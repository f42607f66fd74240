"""Analytic matmul FLOP accounting.

Every forward matmul of shapes (m, n) @ (n, k) costs 2mnk; a training step
costs 3x the forward pass (backward counted as 2x). Only matmuls are
counted, matching the runtime counter, so the analytic and instrumented
totals must agree exactly as integers. Embedding lookup is a gather and
costs nothing here; norms and rotary twists are elementwise.
"""

from __future__ import annotations

from typing import Mapping

from ..loops import LoopDirective
from ..model.config import ModelConfig

TRAINING_MULTIPLIER = 3


def attention_head_flops(config: ModelConfig, n_positions: int) -> int:
    """One head's Q/K/V/O projections plus score and mix matmuls."""
    n, d, dh = n_positions, config.d_model, config.d_head
    return 8 * n * d * dh + 4 * n * n * dh


def ffn_flops(config: ModelConfig, n_positions: int) -> int:
    # Gated FFN: gate, up, and down projections.
    return 6 * n_positions * config.d_model * config.d_ff


def layer_flops(config: ModelConfig, n_positions: int) -> int:
    return config.n_head * attention_head_flops(config, n_positions) + ffn_flops(
        config, n_positions
    )


def output_head_flops(config: ModelConfig, n_positions: int) -> int:
    return 2 * n_positions * config.d_model * config.vocab_size


def forward_flops(
    config: ModelConfig,
    n_positions: int | None = None,
    directives: Mapping[int, LoopDirective] | None = None,
) -> int:
    """Forward matmul FLOPs for one sequence under the given loop directives."""
    n = config.max_seq_len if n_positions is None else n_positions
    per_head = attention_head_flops(config, n)
    per_ffn = ffn_flops(config, n)
    total = 0
    for layer in range(config.n_layer):
        directive = directives.get(layer) if directives else None
        heads = config.n_head
        extra = 0
        if directive is not None:
            if directive.kind == "mask":
                heads -= len(directive.heads)
            elif directive.kind == "head_loop":
                extra = directive.depth * len(directive.heads) * per_head
            elif directive.kind == "block_loop":
                extra = directive.depth * (config.n_head * per_head + per_ffn)
        total += heads * per_head + per_ffn + extra
    return total + output_head_flops(config, n)


def flops_per_step(
    config: ModelConfig,
    directives: Mapping[int, LoopDirective] | None,
    batch_size: int,
    n_positions: int | None = None,
    training_multiplier: int = TRAINING_MULTIPLIER,
) -> int:
    return batch_size * training_multiplier * forward_flops(
        config, n_positions, directives
    )


def loop_overhead_ratio(
    config: ModelConfig, directives: Mapping[int, LoopDirective]
) -> float:
    """Fractional extra cost of the directives over the plain forward pass."""
    base = forward_flops(config)
    return forward_flops(config, directives=directives) / base - 1.0


def paper_shaped_config() -> ModelConfig:
    """A 16-layer shape big enough for overhead ratios to be meaningful."""
    return ModelConfig(
        n_layer=16,
        n_head=16,
        d_model=1024,
        d_head=64,
        d_ff=8192,
        max_seq_len=4096,
        vocab_size=50304,
    )
