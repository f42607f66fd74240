"""Delimited-output schemas: versioned headers, formatting, growth events."""

import json

import pytest

from growloop.schemas import (
    SCHEMA_VERSION,
    CsvWriter,
    SchemaError,
    append_growth_events,
    check_growth_event,
    format_value,
    read_csv,
    read_growth_events,
    schema_line,
    write_csv,
)


class TestFormatting:
    def test_floats_use_nine_significant_digits(self):
        assert format_value(1.0 / 3.0) == "0.333333333"
        assert format_value(0.1) == "0.1"
        assert format_value(123456789012.0) == "1.23456789e+11"

    def test_ints_are_exact(self):
        assert format_value(2**62) == str(2**62)

    def test_none_is_empty(self):
        assert format_value(None) == ""

    def test_rejects_bools_and_delimiters(self):
        with pytest.raises(SchemaError):
            format_value(True)
        with pytest.raises(SchemaError):
            format_value("a,b")
        with pytest.raises(SchemaError):
            format_value("line\nbreak")


class TestCsvRoundTrip:
    ROWS = [
        {"run": "a", "step": 1, "flops_cum": 100, "loss": 2.5},
        {"run": "a", "step": 2, "flops_cum": 200, "loss": 1.0 / 7.0},
    ]

    def test_write_then_read(self, tmp_path):
        path = str(tmp_path / "t.csv")
        write_csv(path, "loss_vs_flops", self.ROWS)
        name, rows = read_csv(path)
        assert name == "loss_vs_flops"
        assert rows[1]["loss"] == format_value(1.0 / 7.0)

    def test_incremental_writer_matches_batch(self, tmp_path):
        batch = str(tmp_path / "batch.csv")
        inc = str(tmp_path / "inc.csv")
        write_csv(batch, "loss_vs_flops", self.ROWS)
        writer = CsvWriter(inc, "loss_vs_flops")
        for row in self.ROWS:
            writer.write_row(row)
        writer.close()
        assert open(batch, "rb").read() == open(inc, "rb").read()

    def test_rejects_unknown_table_and_missing_columns(self, tmp_path):
        with pytest.raises(SchemaError):
            write_csv(str(tmp_path / "x.csv"), "mystery", [])
        with pytest.raises(SchemaError):
            write_csv(str(tmp_path / "y.csv"), "loss_vs_flops", [{"run": "a"}])

    def test_read_rejects_version_and_header_tampering(self, tmp_path):
        path = str(tmp_path / "t.csv")
        write_csv(path, "loss_vs_flops", self.ROWS)
        lines = open(path).read().splitlines()

        bad_version = str(tmp_path / "v.csv")
        future = lines[:]
        future[0] = f"# schema loss_vs_flops v{SCHEMA_VERSION + 1}"
        open(bad_version, "w").write("\n".join(future) + "\n")
        with pytest.raises(SchemaError):
            read_csv(bad_version)

        bad_header = str(tmp_path / "h.csv")
        swapped = lines[:]
        swapped[1] = "step,run,flops_cum,loss"
        open(bad_header, "w").write("\n".join(swapped) + "\n")
        with pytest.raises(SchemaError):
            read_csv(bad_header)


class TestGrowthEvents:
    EVENT = {
        "step": 250,
        "event": "activate",
        "layer": 15,
        "K_l": 1,
        "S_l": [3, 7],
        "layer_entropies": {"1": 0.5},
    }

    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "events.jsonl")
        append_growth_events(path, [self.EVENT])
        append_growth_events(path, [dict(self.EVENT, step=500, event="deepen")])
        events = read_growth_events(path)
        assert len(events) == 2
        assert events[0] == self.EVENT
        assert events[1]["step"] == 500

    def test_lines_are_single_json_objects(self, tmp_path):
        path = str(tmp_path / "events.jsonl")
        append_growth_events(path, [self.EVENT])
        raw = open(path).read()
        assert raw.endswith("\n")
        assert json.loads(raw.splitlines()[0])["event"] == "activate"

    def test_check_rejects_malformed_events(self):
        with pytest.raises(SchemaError):
            check_growth_event({**self.EVENT, "event": "explode"})
        with pytest.raises(SchemaError):
            check_growth_event({**self.EVENT, "step": "soon"})
        missing = dict(self.EVENT)
        del missing["K_l"]
        with pytest.raises(SchemaError):
            check_growth_event(missing)
        with pytest.raises(SchemaError):
            check_growth_event({**self.EVENT, "extra": 1})
