"""Parameter container and deterministic initialization."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..engine import Tensor, rng
from .config import ConfigError, ModelConfig


class ParamStore:
    """Ordered name -> Tensor map holding every trainable parameter."""

    def __init__(self) -> None:
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        self._tensors[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def total_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}


def head_names(layer: int, head: int) -> tuple[str, str, str, str]:
    base = f"layer{layer}.head{head}"
    return (f"{base}.wq", f"{base}.wk", f"{base}.wv", f"{base}.wo")


def init_parameters(config: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Deterministic init: scaled normals for projections, ones for gains.

    Matrices feeding the residual stream (per-head output maps and the FFN
    down map) get the usual 1/sqrt(2 * n_layer) damping.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_parameters needs a ModelConfig")
    d, dh, dff, v = config.d_model, config.d_head, config.d_ff, config.vocab_size
    base_std = 0.02
    out_std = base_std / math.sqrt(2.0 * config.n_layer)

    store = ParamStore()

    def mat(name: str, shape: tuple[int, ...], std: float) -> None:
        data = rng.normal(shape, std, seed, f"param:{name}", dtype=dtype)
        store.add(name, Tensor(data, requires_grad=True))

    def gain(name: str, width: int) -> None:
        store.add(name, Tensor(np.ones(width, dtype=dtype), requires_grad=True))

    mat("embed.weight", (v, d), base_std)
    for layer in range(config.n_layer):
        gain(f"layer{layer}.attn_norm.gain", d)
        for head in range(config.n_head):
            wq, wk, wv, wo = head_names(layer, head)
            mat(wq, (d, dh), base_std)
            mat(wk, (d, dh), base_std)
            mat(wv, (d, dh), base_std)
            mat(wo, (dh, d), out_std)
        gain(f"layer{layer}.ffn_norm.gain", d)
        mat(f"layer{layer}.ffn.w_gate", (d, dff), base_std)
        mat(f"layer{layer}.ffn.w_up", (d, dff), base_std)
        mat(f"layer{layer}.ffn.w_down", (dff, d), out_std)
    gain("final_norm.gain", d)
    mat("lm_head.weight", (d, v), base_std)
    return store
