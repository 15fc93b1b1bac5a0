#!/usr/bin/env python3
"""
Seeded heterogeneous-network KPI simulator with labelled fault injection.

Three entity classes with different KPI scales (city vehicles, expressway
vehicles, UAVs over open terrain) report packet loss, delay, throughput and
jitter once per sample period. Normal samples are Gaussian around the class
baseline, clamped to physical ranges. Fault events rewrite the samples of
their target entities inside [start, end):

    congestion         delay x (1+a), loss + 0.08a, jitter x (1+0.5a)
    node_crash         loss = 1.0, throughput = 0
    malicious_traffic  throughput x (1+3a), loss ~ 0.99
    config_error       delay + 2a * baseline mean (step)
    interference       jitter x (1+3a), delay deviations x (1+2a)

A window is labelled anomalous iff it overlaps a fault event of its entity.

Usage:
    python src/simnet.py data/run
    python src/simnet.py data/run --nodes 8 --windows 84 --seed 11
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from errors import DomainError, MsadmError, ScenarioError
from ingest import FAULT_CLASSES, LABEL_COLUMNS, KpiTrace, save_labels, save_traces

logger = logging.getLogger(__name__)

KPIS = ("packet_loss", "delay", "throughput", "jitter")

ENTITY_CLASSES = ("city_vehicle", "expressway_vehicle", "plain_uav")


class KpiBaseline(NamedTuple):
    mean: float
    scale: float


BASELINES = {
    "city_vehicle": {
        "packet_loss": KpiBaseline(0.005, 0.002),
        "delay": KpiBaseline(40.0, 5.0),
        "throughput": KpiBaseline(50.0, 5.0),
        "jitter": KpiBaseline(5.0, 1.0),
    },
    "expressway_vehicle": {
        "packet_loss": KpiBaseline(0.01, 0.004),
        "delay": KpiBaseline(60.0, 8.0),
        "throughput": KpiBaseline(30.0, 4.0),
        "jitter": KpiBaseline(8.0, 2.0),
    },
    "plain_uav": {
        "packet_loss": KpiBaseline(0.03, 0.01),
        "delay": KpiBaseline(80.0, 12.0),
        "throughput": KpiBaseline(20.0, 3.0),
        "jitter": KpiBaseline(12.0, 3.0),
    },
}

PHYSICAL_RANGES = {
    "packet_loss": (0.0, 1.0),
    "delay": (0.0, np.inf),
    "throughput": (0.0, np.inf),
    "jitter": (0.0, np.inf),
}

MALICIOUS_LOSS = 0.99
MALICIOUS_LOSS_RANGE = (0.98, 0.995)


@dataclass(frozen=True)
class FaultEvent:
    fault_class: str
    targets: tuple
    start: float
    end: float
    intensity: float = 1.0

    def __post_init__(self):
        if self.fault_class not in FAULT_CLASSES:
            raise DomainError(f"unknown fault class '{self.fault_class}' (expected one of {FAULT_CLASSES})")
        if not self.start < self.end:
            raise DomainError(f"fault event needs start < end, got [{self.start}, {self.end})")
        # Zero intensity is accepted as a no-op event
        if not 0.0 <= self.intensity <= 1.0:
            raise DomainError(f"fault intensity must lie in [0, 1], got {self.intensity}")

    def overlaps(self, other):
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class ScenarioConfig:
    classes: tuple = ENTITY_CLASSES
    nodes_per_class: int = 8
    windows_per_node: int = 84
    window_size: int = 32
    window_stride: int = 32
    sample_period: float = 1.0
    fault_rate: float = 0.08
    seed: int = 7
    schedule: tuple = None
    baselines: dict = field(default_factory=lambda: BASELINES)

    def __post_init__(self):
        if self.nodes_per_class < 1:
            raise DomainError("nodes_per_class must be >= 1")
        if self.windows_per_node < 1 or self.window_size < 2 or self.window_stride < 1:
            raise DomainError("need windows_per_node >= 1, window_size >= 2, window_stride >= 1")
        if self.sample_period <= 0:
            raise DomainError("sample_period must be > 0")
        if not 0.0 <= self.fault_rate <= 1.0:
            raise DomainError("fault_rate must lie in [0, 1]")
        for entity_class in self.classes:
            if entity_class not in self.baselines:
                raise DomainError(f"no baseline for entity class '{entity_class}'")
            for kpi, baseline in self.baselines[entity_class].items():
                if baseline.mean < 0 or baseline.scale < 0:
                    raise DomainError(f"{entity_class}/{kpi}: baseline parameters must be >= 0")

    @property
    def samples_per_node(self):
        return (self.windows_per_node - 1) * self.window_stride + self.window_size

    @property
    def entity_ids(self):
        return [f"{c}-{i:02d}" for c in self.classes for i in range(self.nodes_per_class)]

    @classmethod
    def from_config(cls, config, schedule=None):
        sim = config.simulate
        return cls(
            nodes_per_class=int(sim["nodes_per_class"]),
            windows_per_node=int(sim["windows_per_node"]),
            window_size=int(config.window["size"]),
            window_stride=int(config.window["stride"]),
            sample_period=float(sim["sample_period"]),
            fault_rate=float(sim["fault_rate"]),
            seed=config.seed,
            schedule=schedule,
        )


@dataclass(frozen=True, eq=False)
class SimulationResult:
    traces: list
    labels: pd.DataFrame
    events: tuple
    config: ScenarioConfig


def _clamp(kpi, values):
    lower, upper = PHYSICAL_RANGES[kpi]
    return np.clip(values, lower, upper)


def _baseline_samples(entity_class, n, baselines, rng):
    return {
        kpi: _clamp(kpi, baselines[entity_class][kpi].mean + baselines[entity_class][kpi].scale * rng.standard_normal(n))
        for kpi in KPIS
    }


def inject_fault(trace, event, baseline=None, rng=None):
    """
    Apply a fault transform to one trace inside [event.start, event.end).

    Args:
        trace: KpiTrace of a targeted entity
        event: FaultEvent
        baseline: KpiBaseline of the trace (default: class baseline table)
        rng: generator for stochastic parts (malicious loss level)

    Returns:
        KpiTrace: a new trace; samples outside the event are untouched
    """
    t = trace.timestamps
    step = float(t[1] - t[0]) if len(t) > 1 else 0.0
    if event.start < t[0] or event.end > t[-1] + step:
        raise DomainError(
            f"event [{event.start}, {event.end}) outside the span of {trace.entity_id}/{trace.kpi_name}"
        )
    if trace.entity_id not in event.targets or event.intensity == 0:
        return trace

    if baseline is None:
        baseline = BASELINES[trace.entity_class][trace.kpi_name]
    rng = rng if rng is not None else np.random.default_rng(0)
    a = event.intensity
    mask = (t >= event.start) & (t < event.end)
    values = trace.values.copy()
    v = values[mask]
    kpi = trace.kpi_name
    fault = event.fault_class

    if fault == "congestion":
        if kpi == "delay":
            v = v * (1 + a)
        elif kpi == "packet_loss":
            v = v + 0.08 * a
        elif kpi == "jitter":
            v = v * (1 + 0.5 * a)
    elif fault == "node_crash":
        if kpi == "packet_loss":
            v = np.ones_like(v)
        elif kpi == "throughput":
            v = np.zeros_like(v)
    elif fault == "malicious_traffic":
        if kpi == "throughput":
            v = v * (1 + 3 * a)
        elif kpi == "packet_loss":
            v = np.clip(MALICIOUS_LOSS + 0.002 * rng.standard_normal(len(v)), *MALICIOUS_LOSS_RANGE)
    elif fault == "config_error":
        if kpi == "delay":
            v = v + 2 * a * baseline.mean
    elif fault == "interference":
        if kpi == "jitter":
            v = v * (1 + 3 * a)
        elif kpi == "delay":
            v = baseline.mean + (v - baseline.mean) * (1 + 2 * a)

    if kpi in PHYSICAL_RANGES:
        v = _clamp(kpi, v)
    values[mask] = v
    return KpiTrace(trace.entity_id, trace.entity_class, kpi, t.copy(), values)


def check_schedule(events):
    """Overlapping events on one entity are a scenario error."""
    by_entity = {}
    for event in events:
        for target in event.targets:
            by_entity.setdefault(target, []).append(event)
    for entity_id, entity_events in by_entity.items():
        ordered = sorted(entity_events, key=lambda e: e.start)
        for a, b in zip(ordered, ordered[1:]):
            if a.overlaps(b):
                raise ScenarioError(
                    f"overlapping faults on '{entity_id}': {a.fault_class} [{a.start}, {a.end}) "
                    f"and {b.fault_class} [{b.start}, {b.end})"
                )


def random_schedule(cfg, rng):
    """
    Window-aligned events: 1-3 whole windows, at least one clean window between.

    Aligned to the non-overlapping window grid of window_size samples.
    """
    events = []
    T = cfg.window_size
    n_slots = cfg.samples_per_node // T
    for entity_id in cfg.entity_ids:
        slot = 0
        while slot < n_slots:
            if rng.random() < cfg.fault_rate:
                length = int(rng.integers(1, 4))
                fault = FAULT_CLASSES[int(rng.integers(len(FAULT_CLASSES)))]
                intensity = float(rng.uniform(0.5, 1.0))
                if slot + length <= n_slots:
                    events.append(FaultEvent(
                        fault_class=fault,
                        targets=(entity_id,),
                        start=slot * T * cfg.sample_period,
                        end=(slot + length) * T * cfg.sample_period,
                        intensity=intensity,
                    ))
                    slot += length + 1
                    continue
            slot += 1
    return tuple(events)


def label_windows(cfg, events):
    """Ground-truth table: one row per (entity, window)."""
    T, stride, period = cfg.window_size, cfg.window_stride, cfg.sample_period
    rows = []
    for entity_id in cfg.entity_ids:
        entity_events = [e for e in events if entity_id in e.targets and e.intensity > 0]
        for w in range(cfg.windows_per_node):
            times = (w * stride + np.arange(T)) * period
            best, best_count = None, 0
            for event in entity_events:
                count = int(np.count_nonzero((times >= event.start) & (times < event.end)))
                if count > best_count:
                    best, best_count = event, count
            rows.append((entity_id, w, best is not None, best.fault_class if best else "normal"))
    return pd.DataFrame(rows, columns=LABEL_COLUMNS)


def simulate(cfg):
    """
    Generate traces, fault events and window labels.

    Each entity draws from its own generator spawned from the scenario seed,
    so output is identical for a fixed seed regardless of generation order.
    """
    entity_ids = cfg.entity_ids
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(entity_ids) + 1)

    if cfg.schedule is None:
        events = random_schedule(cfg, np.random.default_rng(seeds[-1]))
    else:
        events = tuple(cfg.schedule)
        unknown = {t for e in events for t in e.targets} - set(entity_ids)
        if unknown:
            raise ScenarioError(f"fault targets unknown entities {sorted(unknown)}")
    check_schedule(events)

    n = cfg.samples_per_node
    timestamps = np.arange(n) * cfg.sample_period
    traces = []
    for entity_id, seed in zip(entity_ids, seeds):
        entity_class = entity_id.rsplit("-", 1)[0]
        rng = np.random.default_rng(seed)
        samples = _baseline_samples(entity_class, n, cfg.baselines, rng)
        for kpi in KPIS:
            trace = KpiTrace(entity_id, entity_class, kpi, timestamps.copy(), samples[kpi])
            for event in events:
                if entity_id in event.targets:
                    trace = inject_fault(trace, event, cfg.baselines[entity_class][kpi], rng)
            traces.append(trace)

    labels = label_windows(cfg, events)
    logger.info(
        "simulated %d entities, %d samples each, %d fault events, %d/%d anomalous windows",
        len(entity_ids), n, len(events), int(labels["anomaly"].sum()), len(labels),
    )
    return SimulationResult(traces=traces, labels=labels, events=events, config=cfg)


def write_dataset(result, out_dir, format="csv"):
    """Write traces, labels.csv and events.json into out_dir; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traces_path = out_dir / f"traces.{format}"
    labels_path = out_dir / "labels.csv"
    events_path = out_dir / "events.json"

    save_traces(result.traces, traces_path, format)
    save_labels(result.labels, labels_path)
    with open(events_path, "w", encoding="utf-8") as f:
        json.dump([{**asdict(e), "targets": list(e.targets)} for e in result.events], f, indent=2)
        f.write("\n")
    return traces_path, labels_path, events_path


def load_schedule(path):
    """Read an explicit fault schedule (JSON list of FaultEvent fields)."""
    with open(path, encoding="utf-8") as f:
        entries = json.load(f)
    try:
        return tuple(
            FaultEvent(e["fault_class"], tuple(e["targets"]), float(e["start"]), float(e["end"]),
                       float(e.get("intensity", 1.0)))
            for e in entries
        )
    except KeyError as e:
        raise ScenarioError(f"{path}: fault event is missing {e}") from None


def main():
    parser = argparse.ArgumentParser(description="Simulate labelled heterogeneous-network KPI traces")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--nodes", type=int, default=8, help="Nodes per entity class")
    parser.add_argument("--windows", type=int, default=84, help="Windows per node")
    parser.add_argument("--window", type=int, default=32, help="Window length in samples")
    parser.add_argument("--fault-rate", type=float, default=0.08)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    args = parser.parse_args()

    try:
        cfg = ScenarioConfig(
            nodes_per_class=args.nodes,
            windows_per_node=args.windows,
            window_size=args.window,
            window_stride=args.window,
            fault_rate=args.fault_rate,
            seed=args.seed,
        )
        result = simulate(cfg)
        paths = write_dataset(result, args.out_dir, args.format)
    except MsadmError as e:
        print(f"❌ Error: {e}")
        sys.exit(2)

    print(f"✅ {len(result.traces)} traces, {len(result.events)} fault events")
    for path in paths:
        print(f"   → {path}")


if __name__ == "__main__":
    main()
