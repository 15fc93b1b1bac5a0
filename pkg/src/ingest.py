#!/usr/bin/env python3
"""
Load raw KPI traces from CSV / JSONL files and slice them into windows.

File layout (header row for CSV, one object per line for JSONL):
    entity_id,entity_class,kpi_name,timestamp,value

One KpiTrace is produced per (entity_id, kpi_name) pair, in order of first
appearance. Timestamps must be strictly increasing within a trace.

Usage:
    python src/ingest.py path/to/traces.csv
    python src/ingest.py path/to/traces.jsonl --window 64 --stride 32
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from errors import DomainError, MsadmError, TraceParseError, TraceValidationError

logger = logging.getLogger(__name__)

COLUMNS = ["entity_id", "entity_class", "kpi_name", "timestamp", "value"]

FORMATS = ("csv", "jsonl")

# Unit family per KPI, used when rendering values
KPI_UNITS = {
    "packet_loss": "fraction",
    "bit_error_rate": "fraction",
    "delay": "ms",
    "jitter": "ms",
    "throughput": "Mb/s",
}

FAULT_CLASSES = ("congestion", "node_crash", "malicious_traffic", "config_error", "interference")

# Classification targets: index 0 is the no-fault class
CLASS_NAMES = ("normal",) + FAULT_CLASSES

LABEL_COLUMNS = ["entity_id", "window_index", "anomaly", "fault_class"]


@dataclass(frozen=True)
class KpiTrace:
    """One entity's samples for one KPI."""

    entity_id: str
    entity_class: str
    kpi_name: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.timestamps) != len(self.values):
            raise TraceValidationError(
                f"{self.entity_id}/{self.kpi_name}: {len(self.timestamps)} timestamps "
                f"but {len(self.values)} values"
            )
        if not np.all(np.isfinite(self.values)):
            raise TraceValidationError(f"{self.entity_id}/{self.kpi_name}: non-finite value")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            bad = int(np.argmin(np.diff(self.timestamps) > 0)) + 1
            raise TraceValidationError(
                f"{self.entity_id}/{self.kpi_name}: timestamps not strictly increasing "
                f"at sample {bad} (t={self.timestamps[bad]!r})"
            )

    def __len__(self):
        return len(self.values)

    @property
    def key(self):
        return (self.entity_id, self.kpi_name)


@dataclass(frozen=True)
class KpiWindow:
    """A fixed-length slice of a trace."""

    entity_id: str
    entity_class: str
    kpi_name: str
    window_index: int
    start_time: float
    end_time: float
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) < 2:
            raise DomainError(f"window needs at least 2 samples, got {len(self.values)}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError(f"{self.entity_id}/{self.kpi_name}#{self.window_index}: non-finite sample")

    @property
    def group(self):
        return (self.entity_class, self.kpi_name)


def _rows_to_traces(rows):
    """Group parsed rows into traces, keeping first-appearance order."""
    grouped = {}
    for entity_id, entity_class, kpi_name, timestamp, value in rows:
        key = (entity_id, kpi_name)
        if key not in grouped:
            grouped[key] = (entity_class, [], [])
        elif grouped[key][0] != entity_class:
            raise TraceValidationError(
                f"{entity_id}/{kpi_name}: entity_class changes from "
                f"'{grouped[key][0]}' to '{entity_class}'"
            )
        grouped[key][1].append(timestamp)
        grouped[key][2].append(value)

    return [
        KpiTrace(
            entity_id=entity_id,
            entity_class=entity_class,
            kpi_name=kpi_name,
            timestamps=np.asarray(ts, dtype=float),
            values=np.asarray(vs, dtype=float),
        )
        for (entity_id, kpi_name), (entity_class, ts, vs) in grouped.items()
    ]


def _parse_number(raw, field, line):
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise TraceParseError(f"{field} '{raw}' is not a number", line=line) from None
    if not np.isfinite(value):
        raise TraceParseError(f"{field} '{raw}' is not finite", line=line)
    return value


def _read_csv_rows(path):
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        raise TraceParseError(f"{path.name}: {e}") from None

    missing = [c for c in COLUMNS if c not in df.columns]
    if missing:
        raise TraceParseError(f"Missing required columns {missing}. Found: {list(df.columns)}", line=1)

    rows = []
    # Header is line 1, data starts at line 2
    for line, record in enumerate(df[COLUMNS].itertuples(index=False, name=None), start=2):
        entity_id, entity_class, kpi_name, timestamp, value = record
        if not entity_id or not entity_class or not kpi_name:
            raise TraceParseError("empty identifier field", line=line)
        rows.append((
            entity_id,
            entity_class,
            kpi_name,
            _parse_number(timestamp, "timestamp", line),
            _parse_number(value, "value", line),
        ))
    return rows


def _read_jsonl_rows(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        for line, text in enumerate(f, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as e:
                raise TraceParseError(f"invalid JSON ({e.msg})", line=line) from None
            if not isinstance(obj, dict):
                raise TraceParseError("expected a JSON object", line=line)
            missing = [c for c in COLUMNS if c not in obj]
            if missing:
                raise TraceParseError(f"missing keys {missing}", line=line)
            rows.append((
                str(obj["entity_id"]),
                str(obj["entity_class"]),
                str(obj["kpi_name"]),
                _parse_number(obj["timestamp"], "timestamp", line),
                _parse_number(obj["value"], "value", line),
            ))
    return rows


def load_traces(path, format="csv"):
    """
    Load KPI traces from a file.

    Args:
        path: CSV or JSONL file
        format: "csv" or "jsonl"

    Returns:
        list[KpiTrace]: One trace per (entity_id, kpi_name), first-appearance order
    """
    path = Path(path)
    if format not in FORMATS:
        raise DomainError(f"Unknown trace format '{format}' (expected one of {FORMATS})")
    if not path.exists():
        raise FileNotFoundError(f"Trace file not found: {path}")

    rows = _read_csv_rows(path) if format == "csv" else _read_jsonl_rows(path)
    traces = _rows_to_traces(rows)
    logger.info("loaded %d traces (%d samples) from %s", len(traces), len(rows), path)
    return traces


def save_traces(traces, path, format="csv"):
    """
    Write traces in the ingest layout.

    Floats are written with repr() so reloading is bit-exact.
    """
    path = Path(path)
    if format not in FORMATS:
        raise DomainError(f"Unknown trace format '{format}' (expected one of {FORMATS})")
    path.parent.mkdir(parents=True, exist_ok=True)

    if format == "csv":
        records = [
            (t.entity_id, t.entity_class, t.kpi_name, repr(float(ts)), repr(float(v)))
            for t in traces
            for ts, v in zip(t.timestamps, t.values)
        ]
        pd.DataFrame(records, columns=COLUMNS).to_csv(path, index=False)
    else:
        with open(path, "w", encoding="utf-8") as f:
            for t in traces:
                for ts, v in zip(t.timestamps, t.values):
                    f.write(json.dumps({
                        "entity_id": t.entity_id,
                        "entity_class": t.entity_class,
                        "kpi_name": t.kpi_name,
                        "timestamp": float(ts),
                        "value": float(v),
                    }) + "\n")
    logger.info("wrote %d traces to %s", len(traces), path)


def window(trace, T, stride):
    """
    Slice a trace into windows of T samples at offsets 0, stride, 2*stride, ...

    The trailing partial window is dropped. A trace shorter than T yields [].
    """
    if T < 2:
        raise DomainError(f"window length T must be >= 2, got {T}")
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")

    n = len(trace)
    if n < T:
        return []

    windows = []
    for index, offset in enumerate(range(0, n - T + 1, stride)):
        windows.append(KpiWindow(
            entity_id=trace.entity_id,
            entity_class=trace.entity_class,
            kpi_name=trace.kpi_name,
            window_index=index,
            start_time=float(trace.timestamps[offset]),
            end_time=float(trace.timestamps[offset + T - 1]),
            values=trace.values[offset:offset + T],
        ))
    return windows


def window_all(traces, T, stride):
    """Windows of every trace, concatenated in trace order."""
    result = []
    for trace in traces:
        result.extend(window(trace, T, stride))
    return result


def group_windows(windows):
    """Group windows by (entity_class, kpi_name), preserving order."""
    groups = {}
    for w in windows:
        groups.setdefault(w.group, []).append(w)
    return groups


def load_labels(path):
    """
    Read a ground-truth labels file.

    Returns:
        DataFrame with LABEL_COLUMNS, anomaly as bool
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Labels file not found: {path}")
    df = pd.read_csv(path, dtype={"entity_id": str, "fault_class": str})
    missing = [c for c in LABEL_COLUMNS if c not in df.columns]
    if missing:
        raise TraceParseError(f"{path.name}: missing label columns {missing}", line=1)

    unknown = sorted(set(df["fault_class"]) - set(CLASS_NAMES))
    if unknown:
        raise TraceValidationError(f"{path.name}: unknown fault classes {unknown}")
    df["window_index"] = df["window_index"].astype(int)
    df["anomaly"] = df["anomaly"].astype(str).str.lower().isin(["1", "true"])
    return df[LABEL_COLUMNS]


def save_labels(labels, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = labels[LABEL_COLUMNS].copy()
    out["anomaly"] = out["anomaly"].astype(int)
    out.to_csv(path, index=False)


def main():
    parser = argparse.ArgumentParser(description="Load and window KPI traces")
    parser.add_argument("path", type=Path, help="CSV or JSONL trace file")
    parser.add_argument("--format", choices=FORMATS, default="csv")
    parser.add_argument("--window", type=int, default=32, help="Window length in samples")
    parser.add_argument("--stride", type=int, default=32)
    args = parser.parse_args()

    try:
        traces = load_traces(args.path, args.format)
    except (MsadmError, FileNotFoundError) as e:
        print(f"❌ Error: {e}")
        sys.exit(2)

    print(f"📊 Loaded {len(traces)} trace(s)")
    for trace in traces:
        count = len(window(trace, args.window, args.stride))
        print(f"   - {trace.entity_id}/{trace.kpi_name} ({trace.entity_class}): "
              f"{len(trace)} samples, {count} window(s)")


if __name__ == "__main__":
    main()
