"""Report bundles: merged tables and rendered figures from completed runs.

A bundle is one directory of schema-checked CSV/JSON files plus PNG figures
drawn from the same rows, so a report can be read by tooling and by eye.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .schemas import (
    SCHEMA_VERSION,
    append_growth_events,
    read_csv,
    read_growth_events,
    write_csv,
)
from .training import parse_config_text


class ReportError(RuntimeError):
    """A run directory is missing pieces or the bundle failed validation."""


@dataclass
class RunData:
    name: str
    path: str
    variant: str
    metrics: list[dict] = field(default_factory=list)
    probe_heads: list[dict] = field(default_factory=list)
    probe_layers: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    has_growth_log: bool = False
    extrapolation: list[dict] = field(default_factory=list)
    ablation: list[dict] = field(default_factory=list)


def _read_table(path: str, expected: str) -> list[dict]:
    name, rows = read_csv(path)
    if name != expected:
        raise ReportError(f"{path}: expected {expected} table, found {name}")
    return rows


def load_run(run_dir: str) -> RunData:
    """Read and schema-check one run directory."""
    metrics_path = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(metrics_path):
        raise ReportError(f"{run_dir}: incomplete run, no metrics.csv")
    name = os.path.basename(os.path.normpath(run_dir))

    variant = ""
    config_copy = os.path.join(run_dir, "config.cfg")
    if os.path.exists(config_copy):
        with open(config_copy, "r", encoding="utf-8") as fh:
            variant = parse_config_text(fh.read()).get("variant", "")

    run = RunData(name=name, path=run_dir, variant=variant)
    run.metrics = _read_table(metrics_path, "metrics")
    if not run.metrics:
        raise ReportError(f"{run_dir}: metrics.csv has no rows")

    heads_path = os.path.join(run_dir, "probe_heads.csv")
    if os.path.exists(heads_path):
        run.probe_heads = _read_table(heads_path, "probe_heads")
    layers_path = os.path.join(run_dir, "probe_layers.csv")
    if os.path.exists(layers_path):
        run.probe_layers = _read_table(layers_path, "probe_layers")

    growth_path = os.path.join(run_dir, "growth_events.jsonl")
    if os.path.exists(growth_path):
        run.has_growth_log = True
        run.events = read_growth_events(growth_path)

    extra_path = os.path.join(run_dir, "extrapolation.csv")
    if os.path.exists(extra_path):
        run.extrapolation = _read_table(extra_path, "extrapolation")
    ablation_path = os.path.join(run_dir, "ablation.csv")
    if os.path.exists(ablation_path):
        run.ablation = _read_table(ablation_path, "ablation")
    return run


def export_report(run_dirs: list[str], out_dir: str, render: bool = True) -> dict:
    """Merge the given runs into one bundle under out_dir.

    Returns the summary dict that is also written to summary.json.
    """
    if not run_dirs:
        raise ReportError("no run directories given")
    runs = [load_run(d) for d in run_dirs]
    names = [r.name for r in runs]
    if len(set(names)) != len(names):
        raise ReportError(f"duplicate run names: {names}")
    os.makedirs(out_dir, exist_ok=True)

    merged_loss = [
        {
            "run": run.name,
            "step": int(row["step"]),
            "flops_cum": int(row["flops_cum"]),
            "loss": float(row["loss"]),
        }
        for run in runs
        for row in run.metrics
    ]
    write_csv(os.path.join(out_dir, "loss_vs_flops.csv"), "loss_vs_flops", merged_loss)

    merged_extra = [
        {
            "run": run.name,
            "multiplier": int(row["multiplier"]),
            "context_length": int(row["context_length"]),
            "ppl": float(row["ppl"]),
        }
        for run in runs
        for row in run.extrapolation
    ]
    if merged_extra:
        write_csv(
            os.path.join(out_dir, "extrapolation.csv"), "extrapolation", merged_extra
        )

    merged_ablation = [row for run in runs for row in run.ablation]
    if merged_ablation:
        write_csv(os.path.join(out_dir, "ablation.csv"), "ablation", merged_ablation)

    for run in runs:
        if run.has_growth_log:
            path = os.path.join(out_dir, f"growth_events_{run.name}.jsonl")
            open(path, "w").close()
            append_growth_events(path, run.events)

    summary = {
        "schema_version": SCHEMA_VERSION,
        "runs": {
            run.name: {
                "variant": run.variant,
                "steps": int(run.metrics[-1]["step"]),
                "final_loss": float(run.metrics[-1]["loss"]),
                "final_ppl": float(run.metrics[-1]["ppl"]),
                "flops_total": int(run.metrics[-1]["flops_cum"]),
                "growth_events": len(run.events),
            }
            for run in runs
        },
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if render:
        _render_figures(runs, out_dir)

    _check_bundle(out_dir)
    return summary


def _check_bundle(out_dir: str) -> None:
    """Re-read every table we just wrote; a bad bundle must not ship."""
    for fname in sorted(os.listdir(out_dir)):
        path = os.path.join(out_dir, fname)
        if fname.endswith(".csv"):
            read_csv(path)
        elif fname.endswith(".jsonl"):
            read_growth_events(path)
        elif fname.endswith(".json"):
            with open(path, "r", encoding="utf-8") as fh:
                json.load(fh)


EVENT_MARKERS = {"activate": "o", "deepen": "^"}


def _render_figures(runs: list[RunData], out_dir: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    def save(fig, name: str) -> None:
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, name), dpi=120)
        plt.close(fig)

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for run in runs:
        steps = [int(r["step"]) for r in run.metrics]
        losses = [float(r["loss"]) for r in run.metrics]
        ax.plot(steps, losses, label=run.name)
    ax.set_xlabel("training step")
    ax.set_ylabel("loss (nats)")
    ax.legend()
    save(fig, "loss_vs_steps.png")

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for run in runs:
        flops = [int(r["flops_cum"]) for r in run.metrics]
        losses = [float(r["loss"]) for r in run.metrics]
        ax.plot(flops, losses, label=run.name)
    ax.set_xlabel("cumulative training FLOPs")
    ax.set_ylabel("loss (nats)")
    ax.legend()
    save(fig, "loss_vs_flops.png")

    probed = [run for run in runs if run.probe_layers]
    if probed:
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for run in probed:
            by_layer: dict[int, list[tuple[int, float]]] = {}
            for row in run.probe_layers:
                by_layer.setdefault(int(row["layer"]), []).append(
                    (int(row["step"]), float(row["layer_entropy"]))
                )
            for layer, points in sorted(by_layer.items()):
                xs, ys = zip(*points)
                ax.plot(xs, ys, label=f"{run.name} L{layer}")
        ax.set_xlabel("training step")
        ax.set_ylabel("windowed layer entropy")
        ax.set_ylim(0.0, 1.0)
        ax.legend(fontsize="x-small", ncols=2)
        save(fig, "layer_entropy.png")

        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for run in probed:
            by_layer = {}
            for row in run.probe_layers:
                by_layer.setdefault(int(row["layer"]), []).append(
                    (int(row["step"]), float(row["intra_layer_variance"]))
                )
            for layer, points in sorted(by_layer.items()):
                xs, ys = zip(*points)
                ax.plot(xs, ys, label=f"{run.name} L{layer}")
        ax.set_xlabel("training step")
        ax.set_ylabel("intra-layer entropy variance")
        ax.legend(fontsize="x-small", ncols=2)
        save(fig, "entropy_variance.png")

    with_events = [run for run in runs if run.events]
    if with_events:
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for run in with_events:
            for kind, marker in EVENT_MARKERS.items():
                xs = [e["step"] for e in run.events if e["event"] == kind]
                ys = [e["layer"] for e in run.events if e["event"] == kind]
                if xs:
                    ax.scatter(xs, ys, marker=marker, label=f"{run.name} {kind}")
            for event in run.events:
                if event["event"] == "freeze":
                    ax.axvline(event["step"], linestyle=":", color="gray")
        ax.set_xlabel("training step")
        ax.set_ylabel("layer")
        ax.legend(fontsize="x-small")
        save(fig, "growth_timeline.png")

    with_extra = [run for run in runs if run.extrapolation]
    if with_extra:
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for run in with_extra:
            xs = [int(r["context_length"]) for r in run.extrapolation]
            ys = [float(r["ppl"]) for r in run.extrapolation]
            ax.plot(xs, ys, marker="o", label=run.name)
        ax.set_xlabel("evaluation context length (tokens)")
        ax.set_ylabel("perplexity")
        ax.legend()
        save(fig, "extrapolation.png")
