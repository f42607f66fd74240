"""Flat key=value run configuration with a closed key schema."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from ..growth import GrowthConfig
from ..model.config import ConfigError, ModelConfig

VARIANTS = ("vanilla", "block_loop", "sgt", "ablation")

ABLATION_ARMS = (
    "block_loop",
    "attention_loop",
    "high_entropy",
    "low_entropy",
    "mask_high",
    "mask_low",
)


@dataclass(frozen=True)
class TrainSettings:
    # run
    variant: str = "sgt"
    seed: int = 0
    steps: int = 500
    batch_size: int = 4
    # optimizer
    lr: float = 3e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0
    # data
    train_fraction: float = 0.9
    # cadence
    probe_every: int = 50
    checkpoint_every: int = 0
    # model
    n_layer: int = 6
    n_head: int = 8
    d_model: int = 256
    d_head: int = 32
    d_ff: int = 1024
    max_seq_len: int = 256
    vocab_size: int = 256
    activation: str = "swiglu"
    rotary_base: float = 10000.0
    # growth
    t_start: int = 250
    delta_t: int = 250
    target_layers: int = 3
    k_max: int = 3
    heads_per_layer: int = 2
    excluded_layers: tuple[int, ...] = (0,)
    direction: str = "deep_to_shallow"
    # ablation (variant == "ablation" only)
    ablate_arm: str = ""
    ablate_layer: int = -1
    ablate_pool: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.probe_every < 1:
            raise ConfigError("probe_every must be >= 1")
        if self.variant == "ablation":
            if self.ablate_arm not in ABLATION_ARMS:
                raise ConfigError(f"ablate_arm must be one of {ABLATION_ARMS}")
            if not 0 <= self.ablate_layer < self.n_layer:
                raise ConfigError("ablate_layer out of range")
            if self.ablate_pool < 0:
                raise ConfigError("ablate_pool must be >= 0")
            if self.heads_per_layer > self.n_head:
                raise ConfigError("heads_per_layer exceeds n_head")
        elif self.ablate_arm or self.ablate_layer != -1 or self.ablate_pool:
            raise ConfigError("ablate_* settings require variant=ablation")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_layer=self.n_layer,
            n_head=self.n_head,
            d_model=self.d_model,
            d_head=self.d_head,
            d_ff=self.d_ff,
            max_seq_len=self.max_seq_len,
            vocab_size=self.vocab_size,
            ffn_kind=self.activation,
            rotary_base=self.rotary_base,
        )

    def growth_config(self) -> GrowthConfig:
        cfg = GrowthConfig(
            t_start=self.t_start,
            delta_t=self.delta_t,
            target_layers=self.target_layers,
            k_max=self.k_max,
            heads_per_layer=self.heads_per_layer,
            excluded_layers=self.excluded_layers,
            direction=self.direction,
        )
        cfg.validate_for(self.n_layer, self.n_head)
        return cfg

    def to_pairs(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "excluded_layers":
                value = ",".join(str(x) for x in value)
            out[f.name] = str(value)
        return out


def _parse_excluded(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad excluded_layers list {text!r}") from exc


_FIELD_TYPES = {f.name: f.type for f in fields(TrainSettings)}


def parse_config_text(text: str) -> dict[str, str]:
    """key=value per line; blank lines and # comments ignored."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def settings_from_pairs(pairs: dict[str, str]) -> TrainSettings:
    settings = TrainSettings()
    known = _FIELD_TYPES
    updates: dict[str, object] = {}
    for key, value in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        kind = known[key]
        try:
            if key == "excluded_layers":
                updates[key] = _parse_excluded(value)
            elif kind == "int":
                updates[key] = int(value)
            elif kind == "float":
                updates[key] = float(value)
            else:
                updates[key] = value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return replace(settings, **updates)
