"""Versioned on-disk table formats.

Every CSV starts with a `# schema <name> v<version>` comment line followed
by the fixed header row. Floats print with 9 significant digits. The growth
log is JSON lines with one event object per line.
"""

from __future__ import annotations

import json
from typing import Iterable, Mapping

SCHEMA_VERSION = 1

TABLES: dict[str, tuple[str, ...]] = {
    "metrics": (
        "step", "loss", "ppl", "flops_step", "flops_cum", "phase",
        "active_layers", "growing_layer",
    ),
    "probe_heads": ("step", "layer", "head", "entropy_mean"),
    "probe_layers": ("step", "layer", "layer_entropy", "intra_layer_variance"),
    "theory_matrices": (
        "N", "beta", "mean_entropy", "error_ratio_K", "trace", "trace_bound",
        "lemma_violations_count",
    ),
    "loss_vs_flops": ("run", "step", "flops_cum", "loss"),
    "extrapolation": ("run", "multiplier", "context_length", "ppl"),
    "ablation": (
        "arm", "layer", "heads", "depth", "steps", "final_loss", "ppl",
        "flops_total",
    ),
}

GROWTH_EVENT_KEYS = ("step", "event", "layer", "K_l", "S_l", "layer_entropies")
GROWTH_EVENT_KINDS = ("activate", "deepen", "stall", "freeze")


class SchemaError(ValueError):
    pass


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        raise SchemaError("booleans have no column format")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".9g")
    text = str(value)
    if any(ch in text for ch in ",\n\r"):
        raise SchemaError(f"value {text!r} needs quoting; not supported")
    return text


def schema_line(name: str) -> str:
    return f"# schema {name} v{SCHEMA_VERSION}"


def _columns_for(name: str) -> tuple[str, ...]:
    try:
        return TABLES[name]
    except KeyError:
        raise SchemaError(f"unknown table {name!r}") from None


def encode_rows(name: str, rows: Iterable[Mapping]) -> str:
    columns = _columns_for(name)
    lines = [schema_line(name), ",".join(columns)]
    for row in rows:
        missing = [c for c in columns if c not in row]
        if missing:
            raise SchemaError(f"{name} row missing columns {missing}")
        lines.append(",".join(format_value(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def write_csv(path: str, name: str, rows: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(encode_rows(name, rows))


class CsvWriter:
    """Incremental writer that still enforces the schema per row."""

    def __init__(self, path: str, name: str) -> None:
        self.columns = _columns_for(name)
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self._fh.write(schema_line(name) + "\n")
        self._fh.write(",".join(self.columns) + "\n")

    def write_row(self, row: Mapping) -> None:
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise SchemaError(f"row missing columns {missing}")
        self._fh.write(",".join(format_value(row[c]) for c in self.columns) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_csv(path: str) -> tuple[str, list[dict[str, str]]]:
    """Returns (schema name, rows) after validating the version and header."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# schema "):
        raise SchemaError(f"{path}: missing schema line")
    parts = lines[0].split()
    name, version = parts[2], parts[3]
    if version != f"v{SCHEMA_VERSION}":
        raise SchemaError(f"{path}: unsupported schema version {version}")
    if name not in TABLES:
        raise SchemaError(f"{path}: unknown table {name!r}")
    columns = TABLES[name]
    if len(lines) < 2 or tuple(lines[1].split(",")) != columns:
        raise SchemaError(f"{path}: header does not match {name} schema")
    rows = []
    for line in lines[2:]:
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != len(columns):
            raise SchemaError(f"{path}: row width {len(cells)} != {len(columns)}")
        rows.append(dict(zip(columns, cells)))
    return name, rows


def check_growth_event(obj: Mapping) -> None:
    if tuple(sorted(obj)) != tuple(sorted(GROWTH_EVENT_KEYS)):
        raise SchemaError(f"growth event keys {sorted(obj)} != {sorted(GROWTH_EVENT_KEYS)}")
    if obj["event"] not in GROWTH_EVENT_KINDS:
        raise SchemaError(f"unknown growth event kind {obj['event']!r}")
    if not isinstance(obj["step"], int):
        raise SchemaError("growth event step must be an integer")
    if obj["layer"] is not None and not isinstance(obj["layer"], int):
        raise SchemaError("growth event layer must be an integer or null")
    if not isinstance(obj["layer_entropies"], dict):
        raise SchemaError("layer_entropies must be an object")


def append_growth_events(path: str, events: Iterable[Mapping]) -> None:
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        for event in events:
            check_growth_event(event)
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def read_growth_events(path: str) -> list[dict]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            check_growth_event(obj)
            events.append(obj)
    return events
