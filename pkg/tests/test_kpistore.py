"""Tests for the DuckDB KPI store."""

import hashlib

import numpy as np
import pytest

from conftest import make_trace
from errors import TraceParseError
from ingest import save_traces
from kpistore import (
    calculate_file_hash,
    check_quality,
    get_imported_files,
    import_trace_file,
    init_store,
    load_traces_from_store,
)


@pytest.fixture
def db_path(tmp_path):
    return tmp_path / "store" / "kpi.duckdb"


@pytest.fixture
def traces():
    return [
        make_trace([0.01, 0.02, 0.015, 0.01], entity_id="plain_uav-00", entity_class="plain_uav"),
        make_trace([40.0, 42.5, 39.0, 41.0], kpi_name="delay"),
        make_trace([0.005, 0.004, 0.006, 0.005]),
    ]


def write(traces, path, format="csv"):
    save_traces(traces, path, format)
    return path


class TestImport:
    """Hash-keyed imports"""

    def test_import_then_reimport(self, db_path, traces, tmp_path):
        path = write(traces, tmp_path / "traces.csv")

        assert import_trace_file(db_path, path) == 12
        assert import_trace_file(db_path, path) == 0
        assert get_imported_files(db_path) == {"traces.csv": calculate_file_hash(path)}

    def test_changed_file_replaces_rows(self, db_path, traces, tmp_path):
        path = write(traces, tmp_path / "traces.csv")
        import_trace_file(db_path, path)

        changed = [make_trace([50.0, 51.0], kpi_name="delay")]
        write(changed, path)
        assert import_trace_file(db_path, path) == 2

        loaded = load_traces_from_store(db_path)
        assert len(loaded) == 1
        assert loaded[0].values.tolist() == [50.0, 51.0]

    def test_jsonl(self, db_path, traces, tmp_path):
        path = write(traces, tmp_path / "traces.jsonl", "jsonl")
        assert import_trace_file(db_path, path, "jsonl") == 12

    def test_bad_file_leaves_store_intact(self, db_path, traces, tmp_path):
        import_trace_file(db_path, write(traces, tmp_path / "good.csv"))
        bad = tmp_path / "bad.csv"
        bad.write_text("entity_id,entity_class,kpi_name,timestamp,value\na,b,delay,0,oops\n")

        with pytest.raises(TraceParseError):
            import_trace_file(db_path, bad)
        assert list(get_imported_files(db_path)) == ["good.csv"]
        assert sum(len(t) for t in load_traces_from_store(db_path)) == 12

    def test_file_hash(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(b"x" * 10_000)
        assert calculate_file_hash(path) == hashlib.sha256(b"x" * 10_000).hexdigest()


class TestLoad:
    """Reading traces back"""

    def test_round_trip_sorted(self, db_path, traces, tmp_path):
        import_trace_file(db_path, write(traces, tmp_path / "traces.csv"))
        loaded = load_traces_from_store(db_path)

        assert [t.key for t in loaded] == sorted(t.key for t in traces)
        by_key = {t.key: t for t in traces}
        for trace in loaded:
            original = by_key[trace.key]
            assert trace.entity_class == original.entity_class
            assert np.array_equal(trace.timestamps, original.timestamps)
            assert np.array_equal(trace.values, original.values)

    def test_class_filter(self, db_path, traces, tmp_path):
        import_trace_file(db_path, write(traces, tmp_path / "traces.csv"))
        loaded = load_traces_from_store(db_path, entity_class="plain_uav")
        assert [t.entity_id for t in loaded] == ["plain_uav-00"]

    def test_missing_store(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="msadm import"):
            load_traces_from_store(tmp_path / "nope.duckdb")


class TestQuality:
    """Warnings that never block the pipeline"""

    def test_clean_data(self, db_path, traces, tmp_path):
        import_trace_file(db_path, write(traces, tmp_path / "traces.csv"))
        report = check_quality(db_path)

        assert not report.has_issues()
        assert any("12 readings" in message for message in report.info)

    def test_flags_problems(self, db_path, tmp_path):
        bad = [
            make_trace([0.1, 1.5, 0.2]),
            make_trace([40.0, -1.0, 41.0], kpi_name="delay"),
            make_trace([5.0, 5.0, 5.0, 5.0, 5.0], kpi_name="jitter"),
        ]
        path = write(bad, tmp_path / "bad.csv")
        # Samples at t = 0, 1, 2, 3, 20
        text = path.read_text().replace("city_vehicle-00,city_vehicle,jitter,4.0,", "city_vehicle-00,city_vehicle,jitter,20.0,")
        path.write_text(text)

        import_trace_file(db_path, path)
        warnings = check_quality(db_path).warnings

        assert any("packet_loss" in w and "outside [0, 1]" in w for w in warnings)
        assert any("delay" in w and "negative" in w for w in warnings)
        assert any("jitter" in w and "gap of 17" in w for w in warnings)

    def test_empty_store(self, db_path):
        init_store(db_path)
        report = check_quality(db_path)
        assert report.warnings == ["No readings in store"]

    def test_print_report(self, db_path, traces, tmp_path, capsys):
        import_trace_file(db_path, write(traces, tmp_path / "traces.csv"))
        check_quality(db_path).print_report(verbose=True)

        out = capsys.readouterr().out
        assert "No data quality issues found" in out
        assert "Fraction KPIs within [0, 1]" in out
        assert "12 readings from 2 entities" in out
        rows = {line.split()[0]: line.split()[1:] for line in out.splitlines() if line.startswith("   ")}
        assert rows["packet_loss"] == ["fraction", "8", "0", "0", "0"]
        assert rows["delay"] == ["ms", "4", "0", "0", "0"]

    def test_coverage_and_counts_per_kpi(self, db_path, tmp_path, capsys):
        bad = [
            make_trace([0.1, 1.5, 0.2]),
            make_trace([0.1, 1.2, 0.2], entity_id="city_vehicle-01"),
            make_trace([40.0, -1.0, 41.0], kpi_name="delay"),
        ]
        import_trace_file(db_path, write(bad, tmp_path / "bad.csv"))
        report = check_quality(db_path)

        assert [(c.kpi_name, c.readings, c.entities) for c in report.coverage] == [
            ("delay", 3, 1), ("packet_loss", 6, 2),
        ]
        assert report.counts("packet_loss") == {"range": 2, "negative": 0, "gap": 0}
        assert report.counts("delay") == {"range": 0, "negative": 1, "gap": 0}

        report.print_report()
        out = capsys.readouterr().out
        assert "⚠️  packet_loss:" in out
        assert "No data quality issues found" not in out
