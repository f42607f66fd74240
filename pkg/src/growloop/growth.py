"""Training-time depth growth: warm-up, growing, and fixed phases.

The grower watches windowed layer entropies, keeps a candidate pool of the
top-L layers, and at each decision either deepens the currently growing
layer's loop or activates a new layer strictly shallower than everything
active so far (the shallow-to-deep mirror inverts that rule). Head sets are
frozen at activation; nothing is ever removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

from .loops import LoopDirective, select_heads
from .model.config import ConfigError
from .probe import EntropyWindow

PHASES = ("warmup", "growing", "fixed")


@dataclass(frozen=True)
class GrowthConfig:
    t_start: int = 250
    delta_t: int = 250
    target_layers: int = 3
    k_max: int = 3
    heads_per_layer: int = 2
    excluded_layers: tuple[int, ...] = (0,)
    direction: str = "deep_to_shallow"

    def __post_init__(self) -> None:
        if self.t_start < 1:
            raise ConfigError("t_start must be >= 1")
        if self.delta_t < 1:
            raise ConfigError("delta_t must be >= 1")
        if self.target_layers < 1:
            raise ConfigError("target_layers must be >= 1")
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if self.heads_per_layer < 1:
            raise ConfigError("heads_per_layer must be >= 1")
        if self.direction not in ("deep_to_shallow", "shallow_to_deep"):
            raise ConfigError(f"unknown direction {self.direction!r}")

    def validate_for(self, n_layer: int, n_head: int) -> None:
        eligible = n_layer - len(set(self.excluded_layers))
        if self.target_layers > eligible:
            raise ConfigError(
                f"target_layers={self.target_layers} exceeds {eligible} eligible layers"
            )
        if self.heads_per_layer > n_head:
            raise ConfigError("heads_per_layer exceeds n_head")


@dataclass(frozen=True)
class ArchState:
    active: tuple[int, ...] = ()
    growing: int | None = None
    depths: dict[int, int] = field(default_factory=dict)
    head_sets: dict[int, tuple[int, ...]] = field(default_factory=dict)
    phase: str = "warmup"

    def directives(self) -> dict[int, LoopDirective]:
        return {
            layer: LoopDirective.head_loop(self.head_sets[layer], self.depths[layer])
            for layer in self.active
        }

    def depth_of(self, layer: int) -> int:
        return self.depths.get(layer, 0)

    def to_state(self) -> dict:
        return {
            "active": list(self.active),
            "growing": self.growing,
            "depths": {str(k): v for k, v in self.depths.items()},
            "head_sets": {str(k): list(v) for k, v in self.head_sets.items()},
            "phase": self.phase,
        }

    @classmethod
    def from_state(cls, raw: dict) -> "ArchState":
        return cls(
            active=tuple(int(x) for x in raw["active"]),
            growing=None if raw["growing"] is None else int(raw["growing"]),
            depths={int(k): int(v) for k, v in raw["depths"].items()},
            head_sets={int(k): tuple(int(x) for x in v) for k, v in raw["head_sets"].items()},
            phase=str(raw["phase"]),
        )


def is_decision_step(t: int, config: GrowthConfig) -> bool:
    return t >= config.t_start and (t - config.t_start) % config.delta_t == 0


def phase_of(t: int, config: GrowthConfig, state: ArchState) -> str:
    if t < config.t_start:
        return "warmup"
    if _is_complete(config, state):
        return "fixed"
    return "growing"


def _is_complete(config: GrowthConfig, state: ArchState) -> bool:
    return len(state.active) == config.target_layers and all(
        state.depths[layer] == config.k_max for layer in state.active
    )


def candidate_pool(
    layer_entropies: Mapping[int, float],
    target_layers: int,
    excluded: tuple[int, ...],
) -> tuple[int, ...]:
    """Top-L eligible layers by windowed entropy; ties go to the deeper index."""
    banned = set(excluded)
    eligible = {l: float(e) for l, e in layer_entropies.items() if l not in banned}
    if len(eligible) < target_layers:
        raise ValueError(
            f"only {len(eligible)} eligible layers for a pool of {target_layers}"
        )
    ranked = sorted(eligible, key=lambda l: (-eligible[l], -l))
    return tuple(ranked[:target_layers])


def select_new_layer(
    pool: tuple[int, ...],
    active: tuple[int, ...],
    direction: str,
    n_layer: int,
) -> int | None:
    """Next layer to activate, or None when the pool has no admissible entry."""
    if direction == "deep_to_shallow":
        floor = min(active) if active else n_layer
        candidates = [l for l in pool if l not in active and l < floor]
        return max(candidates) if candidates else None
    ceiling = max(active) if active else -1
    candidates = [l for l in pool if l not in active and l > ceiling]
    return min(candidates) if candidates else None


def growth_step(
    t: int,
    window: EntropyWindow,
    config: GrowthConfig,
    state: ArchState,
    n_layer: int,
) -> tuple[ArchState, list[dict]]:
    """One scheduled decision. Returns the new state and its log events.

    Branch order is deliberate: deepen the growing layer while it stays in
    the pool and under k_max; otherwise try to activate a new layer (the
    growing pointer moves there, abandoning the old layer at its depth);
    otherwise stall. The window is reset after every decision.
    """
    if not is_decision_step(t, config):
        raise ValueError(f"step {t} is not a growth decision step")
    if phase_of(t, config, state) != "growing":
        raise ValueError(f"growth_step called in phase {phase_of(t, config, state)!r}")

    layer_means = window.layer_means()
    head_means = window.head_means()
    pool = candidate_pool(layer_means, config.target_layers, config.excluded_layers)
    entropies_log = {str(l): layer_means[l] for l in sorted(layer_means)}

    def event(kind: str, layer: int | None) -> dict:
        return {
            "step": t,
            "event": kind,
            "layer": layer,
            "K_l": None if layer is None else new_state.depths.get(layer),
            "S_l": None if layer is None else list(new_state.head_sets.get(layer, ())),
            "layer_entropies": entropies_log,
        }

    events: list[dict] = []
    grower = state.growing
    if grower is not None and grower in pool and state.depths[grower] < config.k_max:
        depths = dict(state.depths)
        depths[grower] += 1
        new_state = replace(state, depths=depths)
        events.append(event("deepen", grower))
    elif len(state.active) < config.target_layers:
        chosen = select_new_layer(pool, state.active, config.direction, n_layer)
        if chosen is None:
            new_state = state
            events.append(event("stall", None))
        else:
            per_head = [head_means[(chosen, h)] for h in sorted(
                h for (l, h) in head_means if l == chosen
            )]
            members = select_heads(chosen, per_head, config.heads_per_layer).members
            depths = dict(state.depths)
            depths[chosen] = 1
            head_sets = dict(state.head_sets)
            head_sets[chosen] = members
            new_state = replace(
                state,
                active=state.active + (chosen,),
                growing=chosen,
                depths=depths,
                head_sets=head_sets,
            )
            events.append(event("activate", chosen))
    else:
        new_state = state
        events.append(event("stall", None))

    if _is_complete(config, new_state):
        new_state = replace(new_state, phase="fixed")
        events.append(event("freeze", new_state.growing))
    else:
        new_state = replace(new_state, phase="growing")

    window.reset()
    return new_state, events
