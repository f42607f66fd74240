"""Single-head attention and the summed multi-head residual update.

Heads have their own d x d_h projections and a d_h x d output map; head
outputs are summed straight into the residual stream (there is no joint
output projection), so masking or looping a head subset is literal set
arithmetic on that sum.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from ..engine import Tensor, concat
from .config import ModelConfig
from .params import ParamStore, head_names


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * ((ms + eps) ** -0.5) * gain


def head_forward(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    cos: np.ndarray,
    sin: np.ndarray,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """One head over (B, N, d) input.

    Returns the (B, N, d) head output, the last query position's attention
    row (B, N), and the value rows (B, N, d_h); the latter two are detached
    numpy views for probing and flow analysis.
    """
    d_head = wq.shape[-1]
    # scale q rather than the N x N score array; same product, smaller pass
    q = (x @ wq).rotary(cos, sin) * (1.0 / math.sqrt(d_head))
    k = (x @ wk).rotary(cos, sin)
    v = x @ wv
    a = (q @ k.mT).causal_softmax()
    out = (a @ v) @ wo
    return out, a.data[..., -1, :], v.data


def summed_heads(
    xn: Tensor,
    params: ParamStore,
    layer: int,
    config: ModelConfig,
    cos: np.ndarray,
    sin: np.ndarray,
    members: Sequence[int],
    collector=None,
    flow=None,
    flow_heads: Iterable[int] = (),
    loop_index: int = 0,
) -> Tensor:
    """Sum of head outputs over `members` as three wide products.

    Stacking the per-head input projections side by side and the per-head
    output maps vertically turns sum_h (a_h @ v_h) @ wo_h into one block
    product, identical term by term to running the heads separately.
    """
    members = tuple(members)
    dh = config.d_head
    names = [head_names(layer, h) for h in members]
    wq = concat([params[n[0]] for n in names], axis=-1)
    wk = concat([params[n[1]] for n in names], axis=-1)
    wv = concat([params[n[2]] for n in names], axis=-1)
    wo = concat([params[n[3]] for n in names], axis=0)

    b, n, _ = xn.shape
    s = len(members)
    # (B, N, S*dh) -> (B, S, N, dh) so attention batches over heads
    q = (xn @ wq).reshape(b, n, s, dh).swapaxes(1, 2)
    q = q.rotary(cos, sin) * (1.0 / math.sqrt(dh))
    k = (xn @ wk).reshape(b, n, s, dh).swapaxes(1, 2).rotary(cos, sin)
    v = (xn @ wv).reshape(b, n, s, dh).swapaxes(1, 2)
    a = (q @ k.mT).causal_softmax()

    if collector is not None:
        for i, head in enumerate(members):
            collector.record(layer, head, a.data[:, i, -1, :])
    if flow is not None:
        wanted = set(flow_heads)
        for i, head in enumerate(members):
            if head in wanted:
                flow.record(layer, head, loop_index, a.data[:, i, -1, :], v.data[:, i])

    mix = (a @ v).swapaxes(1, 2).reshape(b, n, s * dh)
    return mix @ wo


def attention_residual(
    h: Tensor,
    params: ParamStore,
    layer: int,
    config: ModelConfig,
    cos: np.ndarray,
    sin: np.ndarray,
    skip_heads: Iterable[int] = (),
    collector=None,
    flow=None,
    flow_heads: Iterable[int] = (),
) -> Tensor:
    """h + sum of head outputs over the layer's non-skipped heads.

    Skipped heads contribute exactly zero (they are never computed). The
    collector, when given, receives each computed head's last-row attention
    trace from this base pass; flow_heads get a loop_index-0 flow record.
    """
    skip = set(skip_heads)
    if any(s < 0 or s >= config.n_head for s in skip):
        raise ValueError("masked head outside this layer")
    members = [head for head in range(config.n_head) if head not in skip]
    if not members:
        return h
    gain = params[f"layer{layer}.attn_norm.gain"]
    xn = rmsnorm(h, gain, config.norm_eps)
    total = summed_heads(
        xn, params, layer, config, cos, sin, members,
        collector=collector, flow=flow, flow_heads=flow_heads, loop_index=0,
    )
    return h + total
