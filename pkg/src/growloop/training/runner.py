"""The training loop, evaluation paths, and run-directory plumbing.

A run owns one output directory: metrics.csv every step, probe CSVs every
probe_every steps, a growth-events JSONL for the looping variants, and
checkpoints. Everything logged is a pure function of (settings, corpus),
so re-running a command reproduces the files byte for byte.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..engine import NumericError, no_grad
from ..growth import (
    ArchState,
    GrowthConfig,
    candidate_pool,
    growth_step,
    is_decision_step,
    phase_of,
)
from ..loops import LoopDirective, LoopDivergenceError
from ..model import init_parameters, model_forward
from ..model.config import ConfigError, ModelConfig
from ..probe import EntropyWindow, TraceCollector, intra_layer_variance
from ..schemas import CsvWriter, append_growth_events
from .adamw import AdamW
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Corpus
from .flops import flops_per_step
from .runconfig import TrainSettings

# Settings that must match a checkpoint's for a resume to stay bit-exact.
# Cadence/duration knobs may differ (e.g. training further than planned).
_RESUME_FREE_KEYS = {"steps", "probe_every", "checkpoint_every"}


class TrainingAbort(RuntimeError):
    def __init__(self, step: int, reason: str) -> None:
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class TrainResult:
    out_dir: str
    steps: int
    final_loss: float
    parameter_count: int
    flops_total: int
    metrics_path: str
    growth_log_path: str | None
    checkpoint_path: str
    events: list = field(default_factory=list)


def directives_for(
    variant: str,
    arch: ArchState,
    block_layers: tuple[int, ...],
    ablate_choice: dict | None = None,
) -> dict[int, LoopDirective]:
    if variant == "sgt":
        return arch.directives()
    if variant == "block_loop" and block_layers:
        return {layer: LoopDirective.block_loop(1) for layer in block_layers}
    if variant == "ablation" and ablate_choice is not None:
        layer = int(ablate_choice["layer"])
        heads = [int(h) for h in ablate_choice["heads"]]
        kind = ablate_choice["kind"]
        if kind == "block_loop":
            return {layer: LoopDirective.block_loop(int(ablate_choice["depth"]))}
        if kind == "head_loop":
            return {layer: LoopDirective.head_loop(heads, int(ablate_choice["depth"]))}
        return {layer: LoopDirective.mask(heads)}
    return {}


def _phase_for(
    variant: str,
    t: int,
    gcfg: GrowthConfig | None,
    arch: ArchState,
    activated: bool,
) -> str:
    if variant == "vanilla":
        return "fixed"
    if variant in ("block_loop", "ablation"):
        return "fixed" if activated else "warmup"
    return phase_of(t, gcfg, arch)


def _active_layers(
    variant: str,
    arch: ArchState,
    block_layers: tuple[int, ...],
    ablate_choice: dict | None,
) -> str:
    if variant == "sgt":
        layers = arch.active
    elif variant == "ablation":
        layers = () if ablate_choice is None else (int(ablate_choice["layer"]),)
    else:
        layers = block_layers
    return "|".join(str(layer) for layer in layers)


def _select_ablation_heads(
    settings: TrainSettings, head_means: dict[tuple[int, int], float]
) -> dict:
    """Pick the looped/masked head set for the configured arm from the
    windowed entropies at the chosen layer."""
    layer = settings.ablate_layer
    arm = settings.ablate_arm
    values = [head_means[(layer, idx)] for idx in range(settings.n_head)]
    candidates = list(range(settings.n_head))
    if settings.ablate_pool and arm not in ("block_loop", "attention_loop"):
        # optional first stage: shortlist the highest-entropy heads, then
        # make the final pick inside the shortlist
        ranked = sorted(candidates, key=lambda i: (-values[i], i))
        candidates = sorted(ranked[: settings.ablate_pool])
    h = settings.heads_per_layer
    if arm == "block_loop":
        kind, heads = "block_loop", []
    elif arm == "attention_loop":
        kind, heads = "head_loop", candidates
    else:
        reverse = arm in ("high_entropy", "mask_high")
        ranked = sorted(
            candidates, key=lambda i: (-values[i] if reverse else values[i], i)
        )
        heads = sorted(ranked[:h])
        kind = "mask" if arm.startswith("mask") else "head_loop"
    depth = 0 if kind == "mask" else settings.k_max
    return {"arm": arm, "layer": layer, "kind": kind, "heads": heads, "depth": depth}


def train(
    settings: TrainSettings,
    corpus: Corpus,
    out_dir: str,
    resume_from: str | None = None,
) -> TrainResult:
    cfg = settings.model_config()
    # only the growing variant exercises the growth capacity checks
    gcfg = settings.growth_config() if settings.variant == "sgt" else None
    os.makedirs(out_dir, exist_ok=True)

    params = init_parameters(cfg, settings.seed)
    optimizer = AdamW(
        params,
        lr=settings.lr,
        betas=(settings.beta1, settings.beta2),
        eps=settings.eps,
        weight_decay=settings.weight_decay,
    )
    window = EntropyWindow()
    arch = ArchState()
    start_step = 0
    flops_cum = 0
    events: list[dict] = []
    block_layers: tuple[int, ...] = ()
    ablate_choice: dict | None = None
    parameter_count = params.total_parameters()

    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        saved = meta["settings"]
        current = settings.to_pairs()
        for key, value in current.items():
            if key in _RESUME_FREE_KEYS:
                continue
            if saved.get(key) != value:
                raise ConfigError(
                    f"checkpoint setting {key}={saved.get(key)!r} does not match "
                    f"{value!r}; refusing to resume"
                )
        for name, tensor in params.items():
            arr = arrays[f"param:{name}"]
            if arr.shape != tensor.data.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            tensor.data = arr.astype(tensor.data.dtype, copy=True)
            optimizer.m[name] = arrays[f"adam_m:{name}"].copy()
            optimizer.v[name] = arrays[f"adam_v:{name}"].copy()
        optimizer.step_count = int(meta["optimizer_step_count"])
        start_step = int(meta["step"])
        flops_cum = int(meta["flops_cum"])
        arch = ArchState.from_state(meta["arch_state"])
        window = EntropyWindow.from_state(meta["window"])
        events = list(meta["events"])
        block_layers = tuple(int(x) for x in meta["block_layers"])
        ablate_choice = meta.get("ablate_choice")

    metrics_path = os.path.join(out_dir, "metrics.csv")
    heads_path = os.path.join(out_dir, "probe_heads.csv")
    layers_path = os.path.join(out_dir, "probe_layers.csv")
    growth_log_path = (
        None
        if settings.variant == "vanilla"
        else os.path.join(out_dir, "growth_events.jsonl")
    )
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    metrics = CsvWriter(metrics_path, "metrics")
    heads_csv = CsvWriter(heads_path, "probe_heads")
    layers_csv = CsvWriter(layers_path, "probe_layers")
    if growth_log_path is not None:
        open(growth_log_path, "w").close()
        if events:
            append_growth_events(growth_log_path, events)

    def checkpoint_meta(step: int) -> dict:
        return {
            "kind": "train_state",
            "settings": settings.to_pairs(),
            "step": step,
            "optimizer_step_count": optimizer.step_count,
            "flops_cum": flops_cum,
            "arch_state": arch.to_state(),
            "window": window.state(),
            "events": events,
            "block_layers": list(block_layers),
            "ablate_choice": ablate_choice,
            "parameter_count": parameter_count,
        }

    def checkpoint_arrays() -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, tensor in params.items():
            out[f"param:{name}"] = tensor.data
            out[f"adam_m:{name}"] = optimizer.m[name]
            out[f"adam_v:{name}"] = optimizer.v[name]
        return out

    loss_value = math.nan
    try:
        for t in range(start_step + 1, settings.steps + 1):
            directives = directives_for(
                settings.variant, arch, block_layers, ablate_choice
            )
            batch = corpus.sample_batch(settings.seed, t, settings.batch_size)
            collector = TraceCollector()
            try:
                _, loss = model_forward(params, cfg, batch, directives, collector)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise TrainingAbort(t, "non-finite loss")
                loss.backward()
            except (NumericError, LoopDivergenceError) as exc:
                raise TrainingAbort(t, str(exc)) from exc
            optimizer.clip_gradients(settings.grad_clip)
            optimizer.step()
            params.zero_grad()

            batch_entropies = collector.batch_entropies()
            window.update(batch_entropies)

            step_flops = flops_per_step(cfg, directives, settings.batch_size)
            flops_cum += step_flops
            activated = bool(block_layers) or ablate_choice is not None
            phase = _phase_for(settings.variant, t, gcfg, arch, activated)
            growing = arch.growing if settings.variant == "sgt" else None
            metrics.write_row(
                {
                    "step": t,
                    "loss": loss_value,
                    "ppl": math.exp(loss_value),
                    "flops_step": step_flops,
                    "flops_cum": flops_cum,
                    "phase": phase,
                    "active_layers": _active_layers(
                        settings.variant, arch, block_layers, ablate_choice
                    ),
                    "growing_layer": growing,
                }
            )

            if t % settings.probe_every == 0:
                by_layer: dict[int, list[float]] = {}
                for (layer, head) in sorted(batch_entropies):
                    value = batch_entropies[(layer, head)]
                    heads_csv.write_row(
                        {"step": t, "layer": layer, "head": head,
                         "entropy_mean": value}
                    )
                    by_layer.setdefault(layer, []).append(value)
                for layer in sorted(by_layer):
                    values = by_layer[layer]
                    layers_csv.write_row(
                        {
                            "step": t,
                            "layer": layer,
                            "layer_entropy": float(np.mean(values)),
                            "intra_layer_variance": intra_layer_variance(values),
                        }
                    )

            if (
                settings.variant == "sgt"
                and is_decision_step(t, gcfg)
                and phase_of(t, gcfg, arch) == "growing"
            ):
                arch, new_events = growth_step(t, window, gcfg, arch, cfg.n_layer)
                events.extend(new_events)
                append_growth_events(growth_log_path, new_events)
            elif (
                settings.variant == "block_loop"
                and t == settings.t_start
                and not block_layers
            ):
                means = window.layer_means()
                chosen = candidate_pool(means, settings.target_layers, ())
                block_layers = tuple(sorted(chosen))
                new_events = [
                    {
                        "step": t,
                        "event": "activate",
                        "layer": layer,
                        "K_l": 1,
                        "S_l": [],
                        "layer_entropies": {
                            str(k): means[k] for k in sorted(means)
                        },
                    }
                    for layer in block_layers
                ]
                events.extend(new_events)
                append_growth_events(growth_log_path, new_events)
                window.reset()
            elif (
                settings.variant == "ablation"
                and t == settings.t_start
                and ablate_choice is None
            ):
                ablate_choice = _select_ablation_heads(settings, window.head_means())
                if ablate_choice["kind"] != "mask":
                    means = window.layer_means()
                    new_events = [
                        {
                            "step": t,
                            "event": "activate",
                            "layer": ablate_choice["layer"],
                            "K_l": ablate_choice["depth"],
                            "S_l": list(ablate_choice["heads"]),
                            "layer_entropies": {
                                str(k): means[k] for k in sorted(means)
                            },
                        }
                    ]
                    events.extend(new_events)
                    append_growth_events(growth_log_path, new_events)
                window.reset()

            if params.total_parameters() != parameter_count:
                raise TrainingAbort(t, "parameter count changed during growth")

            if (
                settings.checkpoint_every
                and t % settings.checkpoint_every == 0
                and t < settings.steps
            ):
                save_checkpoint(
                    os.path.join(ckpt_dir, f"step{t:06d}.ckpt"),
                    checkpoint_meta(t),
                    checkpoint_arrays(),
                )
    finally:
        metrics.close()
        heads_csv.close()
        layers_csv.close()

    final_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(final_path, checkpoint_meta(settings.steps), checkpoint_arrays())
    return TrainResult(
        out_dir=out_dir,
        steps=settings.steps,
        final_loss=loss_value,
        parameter_count=parameter_count,
        flops_total=flops_cum,
        metrics_path=metrics_path,
        growth_log_path=growth_log_path,
        checkpoint_path=final_path,
        events=events,
    )


def _mean_cross_entropy(
    params, cfg: ModelConfig, windows: np.ndarray,
    directives: dict[int, LoopDirective] | None, batch_size: int = 16,
) -> float:
    total = 0.0
    count = 0
    with no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = windows[start : start + batch_size]
            _, loss = model_forward(params, cfg, chunk, directives)
            positions = chunk.shape[0] * (chunk.shape[1] - 1)
            total += float(loss.data) * positions
            count += positions
    return total / count


def evaluate_perplexity(
    params,
    cfg: ModelConfig,
    corpus: Corpus,
    directives: dict[int, LoopDirective] | None = None,
    eval_len: int | None = None,
    batch_size: int = 16,
) -> float:
    """exp(mean next-token cross entropy in nats) over validation windows."""
    windows = corpus.validation_windows(eval_len)
    return math.exp(_mean_cross_entropy(params, cfg, windows, directives, batch_size))


def long_context_eval(
    params,
    cfg: ModelConfig,
    corpus: Corpus,
    directives: dict[int, LoopDirective] | None = None,
    multipliers: tuple[int, ...] = (2, 3, 4),
    batch_size: int = 4,
) -> list[dict]:
    """Perplexity at multiples of the training length; rotary tables simply
    extend to the longer contexts with the base frequency unchanged."""
    table: list[dict] = []
    for m in multipliers:
        length = m * cfg.max_seq_len
        ppl = evaluate_perplexity(
            params, cfg, corpus, directives,
            eval_len=length, batch_size=batch_size,
        )
        table.append({"multiplier": int(m), "context_length": length, "ppl": ppl})
    return table


@dataclass
class RestoredRun:
    settings: TrainSettings
    cfg: ModelConfig
    params: object
    arch: ArchState
    block_layers: tuple[int, ...]
    ablate_choice: dict | None
    step: int

    def directives(self) -> dict[int, LoopDirective]:
        return directives_for(
            self.settings.variant, self.arch, self.block_layers, self.ablate_choice
        )


def restore_model(checkpoint_path: str) -> RestoredRun:
    """Rebuild a trained model and its loop layout from a checkpoint."""
    from .runconfig import settings_from_pairs

    meta, arrays = load_checkpoint(checkpoint_path)
    settings = settings_from_pairs(meta["settings"])
    cfg = settings.model_config()
    params = init_parameters(cfg, settings.seed)
    for name, tensor in params.items():
        tensor.data = arrays[f"param:{name}"].astype(tensor.data.dtype, copy=True)
    return RestoredRun(
        settings=settings,
        cfg=cfg,
        params=params,
        arch=ArchState.from_state(meta["arch_state"]),
        block_layers=tuple(int(x) for x in meta["block_layers"]),
        ablate_choice=meta.get("ablate_choice"),
        step=int(meta["step"]),
    )
