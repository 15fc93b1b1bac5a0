#!/usr/bin/env python3
"""
MSADM pipeline command line.

Each subcommand runs one stage, writes its artifact plus a run manifest
(`<artifact>.manifest.json`: command, argv, config, seed, input hashes and
package versions) and removes whatever it wrote if it fails.

Usage:
    python src/msadm.py simulate
    python src/msadm.py import
    python src/msadm.py build-rules
    python src/msadm.py scale
    python src/msadm.py train [--no-mask]
    python src/msadm.py detect
    python src/msadm.py semanticize
    python src/msadm.py report
    python src/msadm.py eval [--candidate a.txt --reference b.txt]

Global flags:
    --config PATH           config file (YAML or JSON)
    --set section.key=val   override one setting (repeatable)
    --seed N                shorthand for --set seed=N

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 LLM backend error.
"""

import argparse
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from config import VERSION, build_config, get_db_path, get_log_dir
from encoder import build_samples
from errors import ConfigError, DataError, MsadmError
from evaluate import (
    classification_accuracy,
    confusion_table,
    detection_metrics,
    format_metrics_table,
    roc_points,
    rouge,
    write_metrics_json,
    write_roc_csv,
)
from ingest import CLASS_NAMES, load_labels, load_traces, window_all
from kpistore import calculate_file_hash, check_quality, import_trace_file, load_traces_from_store
from llmbridge import backend_from_config, build_prompt, parse_report, query_many, save_report
from model import DetectionOutput, ModelConfig, load_params, predict, save_params, train, write_training_log
from rulebase import (
    RuleBaseSettings,
    build_rulebase,
    load_manual_intervals,
    load_rulebase,
    save_rulebase,
    scale_windows,
)
from semtree import generate_descriptions, load_grammar, mapping_from_rulebase, refresh_if_due, write_descriptions
from simnet import ScenarioConfig, load_schedule, simulate, write_dataset

logger = logging.getLogger("msadm")

PACKAGES = ("numpy", "scipy", "pandas", "scikit-learn", "duckdb", "PyYAML", "requests")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


class Run:
    """Artifacts and inputs of one subcommand invocation."""

    def __init__(self, command, argv, config):
        self.command = command
        self.argv = list(argv)
        self.config = config
        self.inputs = {}
        self.outputs = []

    def input(self, path):
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = calculate_file_hash(path)
        return path

    def output(self, path):
        """Register a path this run is about to write."""
        path = Path(path)
        if not path.exists() and path not in self.outputs:
            self.outputs.append(path)
        return path

    def write_manifest(self, artifact):
        """Write `<artifact>.manifest.json` (or `manifest.json` inside a directory)."""
        artifact = Path(artifact)
        target = artifact / "manifest.json" if artifact.is_dir() else Path(f"{artifact}.manifest.json")
        self.output(target)
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "seed": self.config.seed,
            "config": self.config.raw,
            "inputs": dict(sorted(self.inputs.items())),
            "versions": package_versions(),
        }
        with open(target, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True, default=str)
            f.write("\n")

    def cleanup(self):
        """Remove everything this run created (files first, then emptied directories)."""
        for path in sorted(self.outputs, key=lambda p: len(p.parts), reverse=True):
            try:
                if path.is_dir():
                    path.rmdir()
                elif path.exists():
                    path.unlink()
            except OSError as e:
                logger.warning("could not remove partial artifact %s: %s", path, e)


def package_versions():
    versions = {"python": platform.python_version(), "msadm": VERSION}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def split_indices(n, train_fraction, seed):
    """Seeded permutation split; returns sorted (train, test) index arrays."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"model.train_fraction must lie in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(1, int(round(n * train_fraction))), n - 1) if n > 1 else n
    return np.sort(order[:n_train]), np.sort(order[n_train:])


# --- shared loading ----------------------------------------------------------

def _load_traces(config, run):
    if config.data["source"] == "store":
        db_path = run.input(get_db_path(config.raw))
        print(f"📖 Reading traces from store {db_path}")
        return load_traces_from_store(db_path)
    if config.data["source"] != "file":
        raise ConfigError(f"data.source must be 'file' or 'store', got '{config.data['source']}'")
    path = run.input(config.data_file("traces"))
    print(f"📖 Reading {path}")
    return load_traces(path, config.data["format"])


def _load_labels(config, run, required=False):
    path = config.data_file("labels")
    if not path.exists():
        if required:
            raise FileNotFoundError(f"Labels file not found: {path}")
        return None
    return load_labels(run.input(path))


def _windows(config, traces):
    return window_all(traces, int(config.window["size"]), int(config.window["stride"]))


def _load_rulebase(config, run):
    return load_rulebase(run.input(config.path("rulebase", "path")))


def _model_stem(config):
    return config.path("model", "path")


def _samples(config, rb, traces, labels, extra=None):
    extra = extra or {}
    return build_samples(
        traces,
        rb,
        int(config.window["size"]),
        int(config.window["stride"]),
        labels=labels,
        peers=int(extra.get("peers", config.model["peers"])),
        kpis=tuple(extra["kpis"]) if "kpis" in extra else None,
    )


def _model_inputs(samples, extra):
    return samples.recalibrated(extra.get("mask_mode", "baseline"), bool(extra.get("disable_mask", False)))


# --- subcommands -------------------------------------------------------------

def cmd_simulate(config, args, run):
    schedule = load_schedule(run.input(args.schedule)) if args.schedule else None
    cfg = ScenarioConfig.from_config(config, schedule)
    print(f"🛰️  Simulating {len(cfg.classes)} classes × {cfg.nodes_per_class} nodes × {cfg.windows_per_node} windows")
    result = simulate(cfg)

    out_dir = run.output(config.path("data", "dir"))
    fmt = config.data["format"]
    for name in (f"traces.{fmt}", "labels.csv", "events.json"):
        run.output(out_dir / name)
    traces_path, labels_path, events_path = write_dataset(result, out_dir, fmt)
    run.write_manifest(traces_path)

    anomalous = int(result.labels["anomaly"].sum())
    print(f"✅ {len(result.traces)} traces, {len(result.events)} fault events, "
          f"{anomalous}/{len(result.labels)} anomalous windows")
    print(f"   → {traces_path}")
    print(f"   → {labels_path}")
    print(f"   → {events_path}")


def cmd_import(config, args, run):
    db_path = get_db_path(config.raw)
    paths = args.files or [config.data_file("traces")]
    total = 0
    for path in paths:
        path = run.input(path)
        print(f"📖 Reading {path.name}...")
        rows = import_trace_file(db_path, path, config.data["format"])
        if rows:
            print(f"✅ Imported {rows} readings")
        else:
            print("⏭️  Already imported (unchanged)")
        total += rows
    print(f"📊 {total} readings added to {db_path}")
    check_quality(db_path).print_report(verbose=args.verbose)


def cmd_build_rules(config, args, run):
    traces = _load_traces(config, run)
    manual_path = config.rulebase.get("manual_intervals")
    manual = load_manual_intervals(run.input(config.path("rulebase", "manual_intervals"))) if manual_path else []
    settings = RuleBaseSettings.from_config(config)

    windows = _windows(config, traces)
    print(f"🔄 Clustering {len(windows)} windows (k_max={settings.k_max}, seed={settings.seed})")
    rb = build_rulebase(windows, manual, settings)
    if not rb.rule_sets:
        raise DataError("no (entity_class, kpi) group has enough windows to build rules")

    path = run.output(config.path("rulebase", "path"))
    save_rulebase(rb, path)
    run.write_manifest(path)

    print(f"✅ Built {len(rb.rule_sets)} rule set(s) → {path}")
    for (entity_class, kpi), rs in sorted(rb.rule_sets.items()):
        codes = ", ".join(f"{iv.code}:{iv.descriptor}" for iv in rs.intervals)
        print(f"   - {entity_class}/{kpi}: k={rs.cluster_model.k} [{codes}]")
    for message in rb.warnings:
        print(f"⚠️  {message}")


def cmd_scale(config, args, run):
    rb = _load_rulebase(config, run)
    states = scale_windows(_windows(config, _load_traces(config, run)), rb)
    df = pd.DataFrame(
        [
            (s.entity_id, s.entity_class, s.kpi_name, s.window_index, s.code, s.interval.descriptor,
             s.interval.lower, s.interval.upper, s.representative_value)
            for s in states
        ],
        columns=["entity_id", "entity_class", "kpi_name", "window_index", "code", "descriptor",
                 "lower", "upper", "value"],
    )
    path = run.output(config.path("data", "dir") / "lss.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    run.write_manifest(path)

    print(f"✅ Scaled {len(states)} windows → {path}")
    print("📈 State distribution:")
    for (kpi, descriptor), count in df.groupby(["kpi_name", "descriptor"]).size().items():
        print(f"   - {kpi}: {descriptor} × {count}")


def cmd_train(config, args, run):
    rb = _load_rulebase(config, run)
    traces = _load_traces(config, run)
    labels = _load_labels(config, run, required=True)
    samples = _samples(config, rb, traces, labels)

    train_idx, test_idx = split_indices(len(samples), float(config.model["train_fraction"]), config.seed)
    extra = {
        "kpis": list(samples.kpis),
        "class_names": list(CLASS_NAMES),
        "peers": int(config.model["peers"]),
        "mask_mode": "literal" if args.no_mask else config.model["mask_mode"],
        "disable_mask": bool(args.no_mask),
        "train_fraction": float(config.model["train_fraction"]),
        "samples": len(samples),
    }
    model_config = ModelConfig(
        entities=samples.X.shape[1],
        timesteps=samples.X.shape[2],
        channels=samples.X.shape[3],
        proj_dim=int(config.model["proj_dim"]),
        hidden=int(config.model["hidden"]),
        classes=len(CLASS_NAMES),
        kappa=float(config.model["kappa"]),
        learning_rate=float(config.model["learning_rate"]),
        epochs=int(config.model["epochs"]),
        batch_size=int(config.model["batch_size"]),
        seed=config.seed,
    )

    mask_note = " without recalibration mask" if args.no_mask else f" ({extra['mask_mode']} mask)"
    print(f"🧠 Training on {len(train_idx)} of {len(samples)} samples{mask_note}, {model_config.epochs} epochs")
    train_set = samples.subset(train_idx)
    params, history = train(_model_inputs(train_set, extra), train_set.y_d, train_set.y_c, model_config)

    stem = _model_stem(config)
    for path in (stem.with_suffix(".bin"), stem.with_suffix(".json"), Path(f"{stem}.training.csv")):
        run.output(path)
    save_params(params, model_config, stem, extra)
    write_training_log(history, Path(f"{stem}.training.csv"))
    run.write_manifest(stem.with_suffix(".bin"))

    last = history[-1]
    print(f"✅ Model saved → {stem.with_suffix('.bin')}")
    print(f"   final loss {last.loss:.4f} (detection {last.loss_d:.4f}, classification {last.loss_c:.4f})")


def _refresh_rulebase(config, rb, windows):
    """Recluster when the update period has passed; returns (rulebase, mapping, refreshed)."""
    now = max(w.end_time for w in windows)
    period = float(config.semantics["update_period_hours"]) * 3600.0
    rb, mapping, refreshed = refresh_if_due(rb, windows, now, period)
    if refreshed:
        print("🔄 Rule base older than the update period; reclustered on the current traces")
    return rb, mapping, refreshed


def _save_refreshed(config, run, rb):
    path = run.output(config.path("rulebase", "path"))
    save_rulebase(rb, path)
    run.write_manifest(path)
    print(f"💾 Refreshed rule base → {path}")


def _predict_samples(config, run, refresh=False):
    """
    Samples, their split and model output for every (entity, window).

    With refresh the rule base is brought up to date before the samples are
    scaled; the last element of the result says whether that happened.
    """
    rb = _load_rulebase(config, run)
    stem = _model_stem(config)
    run.input(stem.with_suffix(".bin"))
    run.input(stem.with_suffix(".json"))
    params, model_config, extra = load_params(stem)

    traces = _load_traces(config, run)
    refreshed = False
    if refresh:
        rb, _, refreshed = _refresh_rulebase(config, rb, _windows(config, traces))
    samples = _samples(config, rb, traces, _load_labels(config, run), extra)
    if extra.get("samples") not in (None, len(samples)):
        logger.warning("model was trained on %s samples, data now yields %d", extra["samples"], len(samples))
    _, test_idx = split_indices(len(samples), float(extra.get("train_fraction", 0.8)), model_config.seed)
    out = predict(params, _model_inputs(samples, extra))
    return rb, samples, test_idx, out, extra, refreshed


def cmd_detect(config, args, run):
    _, samples, test_idx, out, extra, _ = _predict_samples(config, run)
    class_names = extra.get("class_names", list(CLASS_NAMES))

    split = np.full(len(samples), "train", dtype=object)
    split[test_idx] = "test"
    df = pd.DataFrame({
        "entity_id": [k[0] for k in samples.keys],
        "entity_class": list(samples.entity_classes),
        "window_index": [k[1] for k in samples.keys],
        "split": split,
        "p_anomalous": out.anomaly_score,
        "anomaly_pred": out.is_anomalous.astype(int),
        "fault_pred": [class_names[i] for i in out.predicted_class],
        "anomaly_true": samples.y_d,
        "fault_true": [class_names[i] for i in samples.y_c],
    })
    for i, name in enumerate(class_names):
        df[f"p_{name}"] = out.p_c[:, i]

    path = run.output(config.path("data", "dir") / "predictions.csv")
    df.to_csv(path, index=False, float_format="%.6f")
    run.write_manifest(path)
    print(f"✅ {int(df['anomaly_pred'].sum())}/{len(df)} windows flagged anomalous → {path}")


def _describe(states, tree, mapping, tau):
    return generate_descriptions(list(states), tree, mapping, tau=tau)


def cmd_semanticize(config, args, run):
    rb = _load_rulebase(config, run)
    windows = _windows(config, _load_traces(config, run))
    rb, mapping, refreshed = _refresh_rulebase(config, rb, windows)

    tree = load_grammar(run.input(config.path("semantics", "grammar")), mapping)
    tau = float(config.semantics["tau"])
    by_window = {}
    for state in scale_windows(windows, rb):
        by_window.setdefault((state.entity_id, state.window_index), []).append(state)

    lines = []
    for (entity_id, window_index), states in by_window.items():
        for sentence in _describe(states, tree, mapping, tau):
            lines.append(f"[{entity_id}#{window_index}] {sentence}")

    path = run.output(config.path("semantics", "output"))
    write_descriptions(lines, path)
    run.write_manifest(path)
    if refreshed:
        _save_refreshed(config, run, rb)
    print(f"✅ {len(lines)} sentence(s) for {len(by_window)} windows → {path}")


def _worst_descriptor(states, mapping):
    abnormal = [
        s for s in states
        if s.code != mapping.normal_code(s.entity_class, s.kpi_name)
    ]
    if not abnormal:
        return None
    worst = max(abnormal, key=lambda s: (s.interval.severity, s.code))
    return mapping.describe(worst.entity_class, worst.kpi_name, worst.code)


def cmd_report(config, args, run):
    rb, samples, test_idx, out, extra, refreshed = _predict_samples(config, run, refresh=True)
    mapping = mapping_from_rulebase(rb)
    tree = load_grammar(run.input(config.path("semantics", "grammar")), mapping)
    tau = float(config.semantics["tau"])
    class_names = tuple(extra.get("class_names", CLASS_NAMES))

    chosen = [i for i in test_idx if out.is_anomalous[i]][: int(config.report["max_reports"])]
    if not chosen:
        if refreshed:
            _save_refreshed(config, run, rb)
        print("✨ No anomalous test windows; nothing to report")
        return

    prompts = []
    for i in chosen:
        entity_id, window_index = samples.keys[i]
        states = samples.states[i]
        sentences = _describe(states, tree, mapping, tau)
        prompts.append(build_prompt(
            DetectionOutput(out.p_d[i], out.p_c[i]),
            sentences,
            class_names=class_names,
            entity=(entity_id, samples.entity_classes[i], window_index),
            severity=_worst_descriptor(states, mapping),
        ))

    backend = backend_from_config(config.llm)
    print(f"💬 Querying {backend.name} backend for {len(prompts)} report(s)")
    responses = query_many(prompts, backend, int(config.llm["max_in_flight"]), int(config.llm["token_budget"]))

    report_dir = run.output(config.path("report", "dir"))
    index = []
    for i, prompt, raw in zip(chosen, prompts, responses):
        entity_id, window_index = samples.keys[i]
        report = parse_report(raw, prompt.options, len(prompt.sentences))
        stem = report_dir / f"{entity_id}-w{window_index:04d}"
        run.output(stem.with_suffix(".json"))
        run.output(stem.with_suffix(".txt"))
        save_report(report, stem, prompt)
        index.append((entity_id, window_index, report.fault_type, report.severity, stem.name))
        print(f"   - {entity_id}#{window_index}: {report.fault_type} ({report.severity})")

    index_path = run.output(report_dir / "index.csv")
    pd.DataFrame(index, columns=["entity_id", "window_index", "fault_type", "severity", "report"]).to_csv(
        index_path, index=False
    )
    run.write_manifest(report_dir)
    if refreshed:
        _save_refreshed(config, run, rb)
    print(f"✅ {len(index)} report(s) → {report_dir}")


def cmd_eval(config, args, run):
    path = run.input(config.path("data", "dir") / "predictions.csv")
    if not path.exists():
        raise FileNotFoundError(f"Predictions not found: {path}. Run `msadm detect` first.")
    df = pd.read_csv(path)
    test = df[df["split"] == "test"]
    if test.empty:
        raise DataError(f"{path.name}: no test rows")

    detection = detection_metrics(test["anomaly_pred"].to_numpy(), test["anomaly_true"].to_numpy())
    rows = {"detection": detection}
    metrics = {"detection": detection.to_dict(), "test_samples": len(test)}

    faulty = test[test["anomaly_true"] == 1]
    if len(faulty):
        accuracy = classification_accuracy(faulty["fault_pred"].to_numpy(), faulty["fault_true"].to_numpy())
        rows["classification"] = {"accuracy": accuracy}
        metrics["classification"] = {"accuracy": accuracy, "samples": len(faulty)}
        labels = [c for c in CLASS_NAMES if c in set(faulty["fault_true"]) | set(faulty["fault_pred"])]
        table = confusion_table(faulty["fault_pred"].to_numpy(), faulty["fault_true"].to_numpy(), labels)
        metrics["confusion"] = {
            row: {col: int(v) for col, v in values.items()} for row, values in table.to_dict(orient="index").items()
        }
    else:
        logger.warning("no anomalous test samples; classification accuracy undefined")

    if args.candidate or args.reference:
        if not (args.candidate and args.reference):
            raise ConfigError("--candidate and --reference go together")
        scores = rouge(run.input(args.candidate).read_text(encoding="utf-8"),
                       run.input(args.reference).read_text(encoding="utf-8"))
        metrics["rouge"] = scores
        rows["rouge-1"] = scores["rouge1"]
        rows["rouge-L"] = scores["rougeL"]

    points = roc_points(test["p_anomalous"].to_numpy(), test["anomaly_true"].to_numpy())
    metrics_path = run.output(config.path("data", "dir") / "metrics.json")
    write_metrics_json(metrics, metrics_path)
    if points:
        roc_path = run.output(config.path("data", "dir") / "roc.csv")
        write_roc_csv(points, roc_path)
    run.write_manifest(metrics_path)

    print(f"📊 Test split: {len(test)} windows")
    print(format_metrics_table(rows))
    if "confusion" in metrics:
        print()
        print(table.to_string())
    print(f"✅ Metrics → {metrics_path}")


COMMANDS = {
    "simulate": (cmd_simulate, "Generate labelled KPI traces"),
    "import": (cmd_import, "Import trace files into the DuckDB store"),
    "build-rules": (cmd_build_rules, "Cluster history windows into a rule base"),
    "scale": (cmd_scale, "Dump the list of scaled states"),
    "train": (cmd_train, "Train the detection model"),
    "detect": (cmd_detect, "Predict every window"),
    "semanticize": (cmd_semanticize, "Describe abnormal states in sentences"),
    "report": (cmd_report, "Generate LLM mitigation reports"),
    "eval": (cmd_eval, "Score predictions on the test split"),
}


def build_parser():
    parser = _Parser(prog="msadm", description="Multi-scale network anomaly detection and mitigation")
    parser.add_argument("--config", type=Path, help="Config file (default: config.yaml if present)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    parser.add_argument("--seed", type=int, help="Random seed for every stage")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parsers = {name: sub.add_parser(name, help=text) for name, (_, text) in COMMANDS.items()}
    parsers["simulate"].add_argument("--schedule", type=Path, help="Explicit fault schedule JSON")
    parsers["import"].add_argument("files", nargs="*", type=Path, help="Trace files (default: data.traces)")
    parsers["train"].add_argument("--no-mask", action="store_true", help="Ablation: train with K = 0 (literal mode)")
    parsers["eval"].add_argument("--candidate", type=Path, help="Generated text for ROUGE")
    parsers["eval"].add_argument("--reference", type=Path, help="Reference text for ROUGE")
    return parser


def setup_logging(config, verbose=False):
    log_path = get_log_dir(config.raw) / "msadm.log"
    logging.basicConfig(
        filename=str(log_path),
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    return log_path


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")

    try:
        config = build_config(args.config, overrides)
    except (MsadmError, FileNotFoundError) as e:
        print(f"❌ Config error: {e}", file=sys.stderr)
        return 1

    setup_logging(config, args.verbose)
    logger.info("msadm %s %s", args.command, " ".join(argv))

    handler = COMMANDS[args.command][0]
    run = Run(args.command, argv, config)
    try:
        handler(config, args, run)
    except MsadmError as e:
        run.cleanup()
        logger.error("%s failed: %s", args.command, e)
        print(f"❌ Error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, OSError) as e:
        run.cleanup()
        logger.error("%s failed: %s", args.command, e)
        print(f"❌ Error: {e}", file=sys.stderr)
        return DataError.exit_code
    except BaseException:
        run.cleanup()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
