"""Static architecture description and its validation."""

from __future__ import annotations

from dataclasses import dataclass


class ConfigError(ValueError):
    """A configuration violates an invariant or names an unknown option."""


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int = 6
    n_head: int = 8
    d_model: int = 256
    d_head: int = 32
    d_ff: int = 1024
    vocab_size: int = 256
    max_seq_len: int = 256
    norm_kind: str = "rmsnorm"
    pos_encoding: str = "rotary"
    ffn_kind: str = "swiglu"
    rotary_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        for field in ("n_layer", "n_head", "d_model", "d_head", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, field)) <= 0:
                raise ConfigError(f"{field} must be positive")
        if self.n_head * self.d_head != self.d_model:
            raise ConfigError(
                f"n_head * d_head must equal d_model "
                f"({self.n_head} * {self.d_head} != {self.d_model})"
            )
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be at least 2")
        if self.d_head % 2 != 0:
            raise ConfigError("d_head must be even for rotary phases")
        if self.norm_kind != "rmsnorm":
            raise ConfigError(f"unsupported norm_kind {self.norm_kind!r}")
        if self.pos_encoding != "rotary":
            raise ConfigError(f"unsupported pos_encoding {self.pos_encoding!r}")
        if self.ffn_kind not in ("swiglu", "reglu"):
            raise ConfigError(f"unsupported ffn_kind {self.ffn_kind!r}")


def desk_config(**overrides) -> ModelConfig:
    """The default small configuration used throughout the test bench."""
    return ModelConfig(**overrides)
