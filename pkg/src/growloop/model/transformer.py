"""Block and model forward passes, including loop-directive dispatch and the
selective head-loop update itself."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..engine import Tensor, embedding_lookup, next_token_cross_entropy
from ..loops import ContributionFlow, LoopDirective, LoopDivergenceError
from ..probe import TraceCollector
from .attention import attention_residual, rmsnorm, summed_heads
from .config import ModelConfig
from .params import ParamStore
from .rotary import rotary_tables


def looped_attention_forward(
    h0: Tensor,
    params: ParamStore,
    layer: int,
    config: ModelConfig,
    cos: np.ndarray,
    sin: np.ndarray,
    members: Sequence[int],
    depth: int,
    flow: ContributionFlow | None = None,
    guard_ratio: float = 1e4,
) -> Tensor:
    """Apply h -> h + sum over S of attention(h) for `depth` iterations.

    Weights are shared across iterations and with the base pass, so gradients
    accumulate through every unrolled step. Each iteration rereads the
    layer's attention pre-norm: the looped operator is exactly the block's
    attention sub-layer restricted to S, with no extra normalization modules.
    """
    members = tuple(members)
    if any(m < 0 or m >= config.n_head for m in members):
        raise ValueError("loop set references a head outside this layer")
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    if depth == 0 or not members:
        return h0

    gain = params[f"layer{layer}.attn_norm.gain"]
    base_scale = float(np.max(np.abs(h0.data))) + 1e-12
    h_cur = h0
    for k in range(1, depth + 1):
        xn = rmsnorm(h_cur, gain, config.norm_eps)
        total = summed_heads(
            xn, params, layer, config, cos, sin, members,
            flow=flow, flow_heads=members, loop_index=k,
        )
        h_cur = h_cur + total
        ratio = float(np.max(np.abs(h_cur.data))) / base_scale
        if ratio > guard_ratio:
            raise LoopDivergenceError(iteration=k, ratio=ratio)
    return h_cur


def ffn_residual(h: Tensor, params: ParamStore, layer: int, config: ModelConfig) -> Tensor:
    gain = params[f"layer{layer}.ffn_norm.gain"]
    xn = rmsnorm(h, gain, config.norm_eps)
    gate = xn @ params[f"layer{layer}.ffn.w_gate"]
    act = gate.silu() if config.ffn_kind == "swiglu" else gate.relu()
    inner = act * (xn @ params[f"layer{layer}.ffn.w_up"])
    return h + inner @ params[f"layer{layer}.ffn.w_down"]


def _block_once(
    h: Tensor,
    params: ParamStore,
    layer: int,
    config: ModelConfig,
    cos: np.ndarray,
    sin: np.ndarray,
    skip_heads=(),
    collector=None,
    flow=None,
    flow_heads=(),
) -> Tensor:
    h = attention_residual(
        h, params, layer, config, cos, sin,
        skip_heads=skip_heads, collector=collector, flow=flow, flow_heads=flow_heads,
    )
    return ffn_residual(h, params, layer, config)


def block_forward(
    h: Tensor,
    params: ParamStore,
    layer: int,
    config: ModelConfig,
    cos: np.ndarray,
    sin: np.ndarray,
    directive: LoopDirective | None = None,
    collector: TraceCollector | None = None,
    flow: ContributionFlow | None = None,
    guard_ratio: float = 1e4,
) -> Tensor:
    directive = directive or LoopDirective.none()

    if directive.kind == "block_loop":
        out = _block_once(h, params, layer, config, cos, sin, collector=collector)
        base_scale = float(np.max(np.abs(h.data))) + 1e-12
        for k in range(1, directive.depth + 1):
            out = _block_once(out, params, layer, config, cos, sin)
            ratio = float(np.max(np.abs(out.data))) / base_scale
            if ratio > guard_ratio:
                raise LoopDivergenceError(iteration=k, ratio=ratio)
        return out

    if directive.kind == "mask":
        h_post = attention_residual(
            h, params, layer, config, cos, sin,
            skip_heads=directive.heads, collector=collector,
        )
        return ffn_residual(h_post, params, layer, config)

    if directive.kind == "head_loop":
        h_post = attention_residual(
            h, params, layer, config, cos, sin,
            collector=collector, flow=flow, flow_heads=directive.heads,
        )
        h_post = looped_attention_forward(
            h_post, params, layer, config, cos, sin,
            directive.heads, directive.depth, flow=flow, guard_ratio=guard_ratio,
        )
        return ffn_residual(h_post, params, layer, config)

    h_post = attention_residual(h, params, layer, config, cos, sin, collector=collector)
    return ffn_residual(h_post, params, layer, config)


def model_forward(
    params: ParamStore,
    config: ModelConfig,
    token_ids: np.ndarray,
    directives: Mapping[int, LoopDirective] | None = None,
    collector: TraceCollector | None = None,
    flow: ContributionFlow | None = None,
    want_loss: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """Full forward over (B, N) token ids; returns (logits, mean loss).

    The loss is next-token cross entropy averaged over the N-1 supervised
    positions of every sequence; it is None when want_loss is False. N may
    exceed max_seq_len (rotary tables extend), which the long-context
    evaluation uses deliberately.
    """
    token_ids = np.asarray(token_ids)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
    if token_ids.ndim != 2 or token_ids.shape[1] < 1:
        raise ValueError("token_ids must be a nonempty (B, N) array")
    directives = dict(directives or {})
    for layer in directives:
        if layer < 0 or layer >= config.n_layer:
            raise ValueError(f"directive for unknown layer {layer}")

    embed = params["embed.weight"]
    n = token_ids.shape[1]
    cos, sin = rotary_tables(n, config.d_head, config.rotary_base, dtype=embed.dtype)

    h = embedding_lookup(embed, token_ids)
    for layer in range(config.n_layer):
        h = block_forward(
            h, params, layer, config, cos, sin,
            directive=directives.get(layer), collector=collector, flow=flow,
        )
    h = rmsnorm(h, params["final_norm.gain"], config.norm_eps)
    logits = h @ params["lm_head.weight"]

    loss = None
    if want_loss:
        if n < 2:
            raise ValueError("loss needs at least 2 tokens")
        loss = next_token_cross_entropy(logits, token_ids)
    return logits, loss
