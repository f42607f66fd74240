"""Batch command line: train, eval, analyze, theory, ablate, report.

Every run directory is self-describing: a manifest, a resolved config copy,
and the logs land next to each other so a run can be reproduced from its
directory alone. Verbosity comes from the GROWLOOP_LOG environment variable
(DEBUG/INFO/WARNING/ERROR); output streams are otherwise kept terse.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .model.config import ConfigError
from .probe import TraceCollector, intra_layer_variance
from .loops import ContributionFlow
from .model import model_forward
from .report import ReportError, export_report
from .schemas import CsvWriter, SchemaError, write_csv
from .theory import TheoryError, entropy_sweep, write_theory_report
from .training import (
    ABLATION_ARMS,
    CheckpointError,
    Corpus,
    TrainingAbort,
    TrainSettings,
    evaluate_perplexity,
    ingest_corpus,
    load_corpus_file,
    long_context_eval,
    parse_config_text,
    restore_model,
    settings_from_pairs,
    synthesize_corpus,
    train,
)
from .training.data import CorpusError

log = logging.getLogger("growloop")

TRAIN_VARIANTS = ("vanilla", "block_loop", "sgt")
DEFAULT_SYNTH_BYTES = 1_200_000


def _configure_logging() -> None:
    level = os.environ.get("GROWLOOP_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _prepare_out_dir(path: str, allow_nonempty: bool = False) -> str:
    os.makedirs(path, exist_ok=True)
    if os.listdir(path) and not allow_nonempty:
        raise ConfigError(
            f"output directory {path!r} is not empty (pass --resume to reuse one)"
        )
    return path


def _write_manifest(
    out_dir: str,
    subcommand: str,
    config_path: str | None,
    seed: int | None,
    overrides: list[str],
) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config_path,
        "out_dir": out_dir,
        "seed": seed,
        "overrides": overrides,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_config_copy(out_dir: str, settings: TrainSettings) -> None:
    lines = [f"{key} = {value}" for key, value in settings.to_pairs().items()]
    with open(os.path.join(out_dir, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _split_overrides(items: list[str]) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key in pairs:
            raise ConfigError(f"--set repeats key {key!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def _resolve_settings(args, forced: dict[str, str]) -> TrainSettings:
    pairs: dict[str, str] = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            pairs.update(parse_config_text(fh.read()))
    pairs.update(_split_overrides(args.set))
    pairs.update(forced)
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    return settings_from_pairs(pairs)


def _resolve_corpus(args, settings: TrainSettings) -> Corpus:
    if args.corpus:
        data = load_corpus_file(args.corpus)
    else:
        data = synthesize_corpus(args.synth_bytes, settings.seed)
    return ingest_corpus(data, settings.max_seq_len, settings.train_fraction)


def _add_run_options(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--corpus", help="raw text file; synthesized when omitted")
    sub.add_argument("--synth-bytes", type=int, default=DEFAULT_SYNTH_BYTES,
                     help="size of the synthesized corpus")
    sub.add_argument("--out", required=True, help="run output directory")


def cmd_train(args) -> int:
    forced = {}
    if args.variant is not None:
        forced["variant"] = args.variant
    settings = _resolve_settings(args, forced)
    if settings.variant not in TRAIN_VARIANTS:
        raise ConfigError(f"train variant must be one of {TRAIN_VARIANTS}")
    corpus = _resolve_corpus(args, settings)
    out_dir = _prepare_out_dir(args.out, allow_nonempty=args.resume is not None)
    _write_manifest(out_dir, "train", args.config, settings.seed, args.set)
    _write_config_copy(out_dir, settings)
    log.info("training %s for %d steps", settings.variant, settings.steps)
    result = train(settings, corpus, out_dir, resume_from=args.resume)
    for event in result.events:
        log.info("growth event %s", event)
    print(
        f"done step={result.steps} loss={result.final_loss:.6f} "
        f"flops={result.flops_total} out={result.out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    restored = restore_model(args.checkpoint)
    settings = restored.settings
    corpus = _resolve_corpus(args, settings)
    directives = restored.directives()
    ppl = evaluate_perplexity(restored.params, restored.cfg, corpus, directives)
    print(f"ppl {ppl:.6f}")
    rows = []
    if args.extrapolate:
        try:
            multipliers = tuple(int(x) for x in args.extrapolate.split(","))
        except ValueError:
            raise ConfigError(f"bad --extrapolate list {args.extrapolate!r}")
        table = long_context_eval(
            restored.params, restored.cfg, corpus, directives, multipliers
        )
        run_name = os.path.basename(os.path.dirname(os.path.abspath(args.checkpoint)))
        for row in table:
            print(
                f"extrapolate x{row['multiplier']} "
                f"len={row['context_length']} ppl={row['ppl']:.6f}"
            )
            rows.append({"run": run_name, **row})
    if args.out:
        out_dir = _prepare_out_dir(args.out)
        _write_manifest(out_dir, "eval", None, settings.seed, [])
        with open(os.path.join(out_dir, "eval.json"), "w", encoding="utf-8") as fh:
            json.dump(
                {"checkpoint": args.checkpoint, "ppl": ppl, "step": restored.step},
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")
        if rows:
            write_csv(os.path.join(out_dir, "extrapolation.csv"), "extrapolation", rows)
    return 0


def cmd_analyze(args) -> int:
    restored = restore_model(args.checkpoint)
    settings = restored.settings
    corpus = _resolve_corpus(args, settings)
    windows = corpus.validation_windows(settings.max_seq_len)
    if windows.shape[0] == 0:
        raise CorpusError("validation split has no full windows")
    batch = windows[: args.batch_size]

    collector = TraceCollector()
    flow = ContributionFlow()
    model_forward(
        restored.params, restored.cfg, batch,
        directives=restored.directives(), collector=collector, flow=flow,
        want_loss=False,
    )
    out_dir = _prepare_out_dir(args.out)
    _write_manifest(out_dir, "analyze", None, settings.seed, [])

    entropies = collector.batch_entropies()
    heads_csv = CsvWriter(os.path.join(out_dir, "probe_heads.csv"), "probe_heads")
    by_layer: dict[int, list[float]] = {}
    for (layer, head) in sorted(entropies):
        value = entropies[(layer, head)]
        heads_csv.write_row(
            {"step": restored.step, "layer": layer, "head": head,
             "entropy_mean": value}
        )
        by_layer.setdefault(layer, []).append(value)
    heads_csv.close()
    layers_csv = CsvWriter(os.path.join(out_dir, "probe_layers.csv"), "probe_layers")
    for layer in sorted(by_layer):
        values = by_layer[layer]
        layers_csv.write_row(
            {
                "step": restored.step,
                "layer": layer,
                "layer_entropy": float(np.mean(values)),
                "intra_layer_variance": intra_layer_variance(values),
            }
        )
    layers_csv.close()

    with open(
        os.path.join(out_dir, "contribution_flow.json"), "w", encoding="utf-8"
    ) as fh:
        json.dump(flow.to_json_objects(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"analyzed {batch.shape[0]} windows into {out_dir}")
    return 0


def _parse_sweep(spec: str) -> np.ndarray:
    # e.g. entropy:0.2..0.95:50
    try:
        dimension, span, count = spec.split(":")
        lo_text, hi_text = span.split("..")
        lo, hi, n = float(lo_text), float(hi_text), int(count)
    except ValueError:
        raise ConfigError(f"bad sweep spec {spec!r}; expected entropy:LO..HI:COUNT")
    if dimension != "entropy":
        raise ConfigError(f"unknown sweep dimension {dimension!r}")
    if n < 2 or not 0.0 < lo < hi <= 1.0:
        raise ConfigError(f"bad sweep range {spec!r}")
    return np.linspace(lo, hi, n)


def cmd_theory(args) -> int:
    targets = _parse_sweep(args.sweep)
    out_dir = _prepare_out_dir(args.out)
    _write_manifest(out_dir, "theory", None, args.seed, [args.sweep])
    rows, summary = entropy_sweep(
        args.n, args.beta, targets, k=args.k, seed=args.seed
    )
    write_theory_report(out_dir, rows, summary)
    print(
        f"{summary['n_matrices']} matrices "
        f"spearman={summary['spearman_entropy_vs_error_ratio']:.4f} out={out_dir}"
    )
    return 0


def cmd_ablate(args) -> int:
    forced = {
        "variant": "ablation",
        "ablate_arm": args.arm,
        "ablate_layer": str(args.layer),
        "heads_per_layer": str(args.h),
        "k_max": str(args.k),
        "ablate_pool": "10" if args.two_stage else "0",
    }
    settings = _resolve_settings(args, forced)
    corpus = _resolve_corpus(args, settings)
    out_dir = _prepare_out_dir(args.out)
    _write_manifest(out_dir, "ablate", args.config, settings.seed, args.set)
    _write_config_copy(out_dir, settings)
    result = train(settings, corpus, out_dir)

    restored = restore_model(result.checkpoint_path)
    ppl = evaluate_perplexity(
        restored.params, restored.cfg, corpus, restored.directives()
    )
    choice = restored.ablate_choice or {}
    row = {
        "arm": args.arm,
        "layer": args.layer,
        "heads": "|".join(str(h) for h in choice.get("heads", [])),
        "depth": int(choice.get("depth", 0)),
        "steps": result.steps,
        "final_loss": result.final_loss,
        "ppl": ppl,
        "flops_total": result.flops_total,
    }
    write_csv(os.path.join(out_dir, "ablation.csv"), "ablation", [row])
    print(
        f"arm={args.arm} layer={args.layer} heads={row['heads'] or '-'} "
        f"ppl={ppl:.6f} flops={result.flops_total}"
    )
    return 0


def cmd_report(args) -> int:
    out_dir = _prepare_out_dir(args.out)
    summary = export_report(args.runs, out_dir, render=not args.no_figures)
    _write_manifest(out_dir, "report", None, None, list(args.runs))
    for name, info in sorted(summary["runs"].items()):
        print(
            f"{name}: steps={info['steps']} loss={info['final_loss']:.6f} "
            f"flops={info['flops_total']} events={info['growth_events']}"
        )
    print(f"report written to {out_dir}")
    return 0


def cmd_make_corpus(args) -> int:
    if os.path.exists(args.out):
        raise ConfigError(f"{args.out!r} already exists")
    data = synthesize_corpus(args.bytes, args.seed)
    with open(args.out, "wb") as fh:
        fh.write(data)
    print(f"wrote {len(data)} bytes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="growloop",
        description="Entropy-guided looped-transformer lab",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--variant", choices=TRAIN_VARIANTS, default=None)
    p.add_argument("--resume", help="checkpoint file to continue from")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--extrapolate", metavar="2,3,4",
                   help="context-length multipliers")
    p.add_argument("--corpus")
    p.add_argument("--synth-bytes", type=int, default=DEFAULT_SYNTH_BYTES)
    p.add_argument("--out", default=None, help="optional output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="entropy and contribution snapshot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--synth-bytes", type=int, default=DEFAULT_SYNTH_BYTES)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("theory", help="mixing-matrix entropy sweep")
    p.add_argument("--sweep", required=True, metavar="entropy:LO..HI:COUNT")
    p.add_argument("--n", type=int, default=32, help="matrix size")
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--k", type=int, default=10, help="power-iteration steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("ablate", help="train one ablation arm")
    p.add_argument("--arm", required=True, choices=ABLATION_ARMS)
    p.add_argument("--layer", required=True, type=int)
    p.add_argument("--h", type=int, default=2, help="heads per selection")
    p.add_argument("--k", type=int, default=2, help="loop depth")
    p.add_argument("--two-stage", action="store_true",
                   help="shortlist ten high-entropy heads before the final pick")
    _add_run_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge runs into a report bundle")
    p.add_argument("--runs", nargs="+", required=True, metavar="RUN_DIR")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-corpus", help="write a synthesized corpus file")
    p.add_argument("--bytes", type=int, default=DEFAULT_SYNTH_BYTES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_corpus)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging()
    try:
        return args.func(args)
    except (ConfigError, SchemaError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAbort, CheckpointError, TheoryError, ReportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
