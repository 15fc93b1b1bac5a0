#!/usr/bin/env python3
"""
DuckDB KPI store.

Imports trace files into a `readings` table, keyed by file hash so repeated
imports are no-ops, loads traces back for the pipeline, and runs data
quality checks that warn without blocking anything.

Usage:
    python src/kpistore.py import data/run/traces.csv
    python src/kpistore.py import data/run/traces.jsonl --format jsonl
    python src/kpistore.py check --verbose
"""

import argparse
import hashlib
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import duckdb
import numpy as np
import pandas as pd

from config import get_db_path
from errors import MsadmError
from ingest import COLUMNS, KPI_UNITS, KpiTrace, load_traces

logger = logging.getLogger(__name__)

# Sampling gaps larger than this multiple of the median gap are flagged
GAP_FACTOR = 3.0

NON_NEGATIVE_KPIS = ("delay", "jitter", "throughput")


def init_store(db_path):
    """Create tables and indexes if they do not exist yet."""
    db_path = Path(db_path)
    db_path.parent.mkdir(parents=True, exist_ok=True)

    conn = duckdb.connect(str(db_path))
    try:
        conn.execute("""
            CREATE TABLE IF NOT EXISTS readings (
                entity_id VARCHAR NOT NULL,
                entity_class VARCHAR NOT NULL,
                kpi_name VARCHAR NOT NULL,
                timestamp DOUBLE NOT NULL,
                value DOUBLE NOT NULL,
                import_id INTEGER,
                PRIMARY KEY (entity_id, kpi_name, timestamp)
            )
        """)

        conn.execute("CREATE SEQUENCE IF NOT EXISTS import_id_seq START 1")
        conn.execute("""
            CREATE TABLE IF NOT EXISTS imports (
                import_id INTEGER PRIMARY KEY DEFAULT nextval('import_id_seq'),
                filename VARCHAR NOT NULL UNIQUE,
                file_hash VARCHAR,
                imported_at TIMESTAMP DEFAULT current_timestamp,
                rows_added INTEGER
            )
        """)

        conn.execute("CREATE INDEX IF NOT EXISTS idx_readings_class ON readings(entity_class, kpi_name)")
    finally:
        conn.close()
    logger.info("store ready at %s", db_path)


def calculate_file_hash(file_path):
    """SHA-256 hex digest of a file, read in chunks."""
    sha256_hash = hashlib.sha256()
    with open(file_path, "rb") as f:
        for byte_block in iter(lambda: f.read(4096), b""):
            sha256_hash.update(byte_block)
    return sha256_hash.hexdigest()


def _traces_frame(traces, import_id):
    records = [
        (t.entity_id, t.entity_class, t.kpi_name, float(ts), float(v), import_id)
        for t in traces
        for ts, v in zip(t.timestamps, t.values)
    ]
    return pd.DataFrame(records, columns=COLUMNS + ["import_id"])


def import_trace_file(db_path, path, format="csv"):
    """
    Import one trace file.

    Unchanged files (same name and hash) are skipped. A changed file replaces
    every reading of its previous import.

    Returns:
        int: Rows added (0 when skipped)
    """
    path = Path(path)
    file_hash = calculate_file_hash(path)
    init_store(db_path)

    conn = duckdb.connect(str(db_path))
    in_transaction = False
    try:
        existing = conn.execute(
            "SELECT import_id, file_hash FROM imports WHERE filename = ?", [path.name]
        ).fetchone()
        if existing and existing[1] == file_hash:
            logger.info("skipping %s: already imported (hash %s)", path.name, file_hash[:12])
            return 0

        # Parse before touching the tables so a bad file leaves the store intact
        traces = load_traces(path, format)

        conn.execute("BEGIN TRANSACTION")
        in_transaction = True
        if existing:
            logger.info("re-importing %s: hash changed %s → %s", path.name, (existing[1] or "none")[:12], file_hash[:12])
            conn.execute("DELETE FROM readings WHERE import_id = ?", [existing[0]])
            conn.execute("DELETE FROM imports WHERE import_id = ?", [existing[0]])

        import_id = conn.execute(
            "INSERT INTO imports (filename, file_hash, rows_added) VALUES (?, ?, 0) RETURNING import_id",
            [path.name, file_hash],
        ).fetchone()[0]

        df_final = _traces_frame(traces, import_id)
        before = conn.execute("SELECT COUNT(*) FROM readings").fetchone()[0]
        conn.execute("""
            INSERT OR IGNORE INTO readings (entity_id, entity_class, kpi_name, timestamp, value, import_id)
            SELECT entity_id, entity_class, kpi_name, timestamp, value, import_id FROM df_final
        """)
        after = conn.execute("SELECT COUNT(*) FROM readings").fetchone()[0]
        rows_added = after - before

        conn.execute("UPDATE imports SET rows_added = ? WHERE import_id = ?", [rows_added, import_id])
        conn.execute("COMMIT")
        in_transaction = False
    except Exception:
        if in_transaction:
            conn.execute("ROLLBACK")
        raise
    finally:
        conn.close()

    duplicates = len(df_final) - rows_added
    if duplicates:
        logger.warning("%s: %d reading(s) already stored by another import", path.name, duplicates)
    logger.info("imported %s: %d rows", path.name, rows_added)
    return rows_added


def get_imported_files(db_path):
    """{filename: file_hash} for every recorded import."""
    conn = duckdb.connect(str(db_path))
    try:
        result = conn.execute("SELECT filename, file_hash FROM imports ORDER BY import_id").fetchall()
        return {row[0]: row[1] for row in result}
    finally:
        conn.close()


def load_traces_from_store(db_path, entity_class=None):
    """
    Read traces back from the store.

    Traces come out ordered by (entity_id, kpi_name), samples by timestamp.

    Args:
        db_path: DuckDB file
        entity_class: Optional filter
    """
    db_path = Path(db_path)
    if not db_path.exists():
        raise FileNotFoundError(f"KPI store not found: {db_path}. Run `msadm import` first.")

    query = "SELECT entity_id, entity_class, kpi_name, timestamp, value FROM readings"
    params = []
    if entity_class is not None:
        query += " WHERE entity_class = ?"
        params.append(entity_class)
    query += " ORDER BY entity_id, kpi_name, timestamp"

    conn = duckdb.connect(str(db_path), read_only=True)
    try:
        df = conn.execute(query, params).fetchdf()
    finally:
        conn.close()

    traces = []
    for (entity_id, kpi_name), part in df.groupby(["entity_id", "kpi_name"], sort=True):
        classes = part["entity_class"].unique()
        traces.append(KpiTrace(
            entity_id=entity_id,
            entity_class=str(classes[0]),
            kpi_name=kpi_name,
            timestamps=part["timestamp"].to_numpy(dtype=float),
            values=part["value"].to_numpy(dtype=float),
        ))
    logger.info("loaded %d traces from store %s", len(traces), db_path)
    return traces


QUALITY_CHECKS = ("range", "negative", "gap")


@dataclass(frozen=True)
class QualityFinding:
    entity_id: str
    kpi_name: str
    check: str
    message: str


@dataclass
class KpiCoverage:
    """Readings and entities seen for one KPI."""

    kpi_name: str
    readings: int
    entities: int

    @property
    def unit(self):
        return KPI_UNITS.get(self.kpi_name, "?")


@dataclass
class QualityReport:
    """Per-KPI coverage plus the findings of every check."""

    coverage: list = field(default_factory=list)
    findings: list = field(default_factory=list)
    passed: list = field(default_factory=list)
    store_warnings: list = field(default_factory=list)
    entities: int = 0

    @property
    def readings(self):
        return sum(c.readings for c in self.coverage)

    @property
    def warnings(self):
        return self.store_warnings + [f.message for f in self.findings]

    @property
    def info(self):
        if not self.coverage:
            return list(self.passed)
        return [f"{self.readings} readings from {self.entities} entities"] + self.passed

    def add_finding(self, entity_id, kpi_name, check, message):
        self.findings.append(QualityFinding(entity_id, kpi_name, check, message))

    def counts(self, kpi_name):
        """{check: number of flagged traces} for one KPI."""
        return {
            check: sum(1 for f in self.findings if f.kpi_name == kpi_name and f.check == check)
            for check in QUALITY_CHECKS
        }

    def has_issues(self):
        return bool(self.store_warnings or self.findings)

    def print_report(self, verbose=False):
        print("\n🔍 KPI data quality")
        for message in self.store_warnings:
            print(f"⚠️  {message}")
        if self.coverage:
            print(f"   {self.readings} readings from {self.entities} entities\n")
            print(f"   {'KPI':<14}{'unit':<10}{'readings':>9}{'range':>7}{'negative':>10}{'gaps':>6}")
            for c in self.coverage:
                n = self.counts(c.kpi_name)
                print(f"   {c.kpi_name:<14}{c.unit:<10}{c.readings:>9}{n['range']:>7}{n['negative']:>10}{n['gap']:>6}")

        for kpi_name in sorted({f.kpi_name for f in self.findings}):
            print(f"\n⚠️  {kpi_name}:")
            for f in self.findings:
                if f.kpi_name == kpi_name:
                    print(f"   - {f.message}")

        if verbose:
            for message in self.passed:
                print(f"✅ {message}")
        if not self.has_issues():
            print("\n✅ No data quality issues found")


def check_fraction_range(conn, report):
    """Fraction KPIs (loss, BER) must stay in [0, 1]."""
    fraction_kpis = [k for k, unit in KPI_UNITS.items() if unit == "fraction"]
    placeholders = ", ".join("?" for _ in fraction_kpis)
    rows = conn.execute(f"""
        SELECT entity_id, kpi_name, COUNT(*), MIN(value), MAX(value)
        FROM readings
        WHERE kpi_name IN ({placeholders}) AND (value < 0 OR value > 1)
        GROUP BY entity_id, kpi_name
        ORDER BY entity_id, kpi_name
    """, fraction_kpis).fetchall()

    if rows:
        for entity_id, kpi, count, low, high in rows:
            report.add_finding(entity_id, kpi, "range", f"{entity_id}/{kpi}: {count} value(s) outside [0, 1] (range {low:.4g}..{high:.4g})")
    else:
        report.passed.append("Fraction KPIs within [0, 1]")


def check_non_negative(conn, report):
    placeholders = ", ".join("?" for _ in NON_NEGATIVE_KPIS)
    rows = conn.execute(f"""
        SELECT entity_id, kpi_name, COUNT(*), MIN(value)
        FROM readings
        WHERE kpi_name IN ({placeholders}) AND value < 0
        GROUP BY entity_id, kpi_name
        ORDER BY entity_id, kpi_name
    """, list(NON_NEGATIVE_KPIS)).fetchall()

    if rows:
        for entity_id, kpi, count, low in rows:
            report.add_finding(entity_id, kpi, "negative", f"{entity_id}/{kpi}: {count} negative value(s) (min {low:.4g})")
    else:
        report.passed.append("Delay, jitter and throughput non-negative")


def check_sampling_gaps(conn, report):
    """Flag traces whose largest sampling gap exceeds GAP_FACTOR × the median gap."""
    df = conn.execute("""
        SELECT entity_id, kpi_name,
               timestamp - LAG(timestamp) OVER (PARTITION BY entity_id, kpi_name ORDER BY timestamp) AS gap
        FROM readings
    """).fetchdf().dropna()

    if df.empty:
        report.passed.append("No sampling gaps to check")
        return

    irregular = 0
    for (entity_id, kpi), part in df.groupby(["entity_id", "kpi_name"], sort=True):
        gaps = part["gap"].to_numpy()
        median = float(np.median(gaps))
        largest = float(gaps.max())
        if median > 0 and largest > GAP_FACTOR * median:
            irregular += 1
            report.add_finding(entity_id, kpi, "gap", f"{entity_id}/{kpi}: gap of {largest:.4g} vs median {median:.4g}")

    if not irregular:
        report.passed.append("Sampling intervals regular")


def check_quality(db_path):
    """Run every check; returns a QualityReport."""
    report = QualityReport()
    conn = duckdb.connect(str(db_path), read_only=True)
    try:
        count, entities = conn.execute("SELECT COUNT(*), COUNT(DISTINCT entity_id) FROM readings").fetchone()
        if count == 0:
            report.store_warnings.append("No readings in store")
            return report
        report.entities = entities
        rows = conn.execute("""
            SELECT kpi_name, COUNT(*), COUNT(DISTINCT entity_id)
            FROM readings
            GROUP BY kpi_name
            ORDER BY kpi_name
        """).fetchall()
        report.coverage = [KpiCoverage(kpi, int(n), int(e)) for kpi, n, e in rows]

        check_fraction_range(conn, report)
        check_non_negative(conn, report)
        check_sampling_gaps(conn, report)
    finally:
        conn.close()
    return report


def main():
    parser = argparse.ArgumentParser(description="DuckDB KPI store")
    parser.add_argument("--db", type=Path, default=None, help="Store path (default from config)")
    sub = parser.add_subparsers(dest="command", required=True)

    imp = sub.add_parser("import", help="Import trace files")
    imp.add_argument("files", nargs="+", type=Path)
    imp.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    chk = sub.add_parser("check", help="Run data quality checks")
    chk.add_argument("--verbose", "-v", action="store_true")

    args = parser.parse_args()
    db_path = args.db or get_db_path()

    if args.command == "import":
        total = 0
        for path in args.files:
            print(f"📖 Reading {path.name}...")
            try:
                rows = import_trace_file(db_path, path, args.format)
            except (MsadmError, FileNotFoundError, duckdb.Error) as e:
                print(f"❌ Error: {e}")
                sys.exit(2)
            if rows:
                print(f"✅ Imported {rows} readings")
            else:
                print("⏭️  Already imported (unchanged)")
            total += rows
        print(f"\n📊 {total} readings added at {datetime.now():%Y-%m-%d %H:%M:%S}")
    else:
        report = check_quality(db_path)
        report.print_report(verbose=args.verbose)


if __name__ == "__main__":
    main()
