"""
Desk-scale end-to-end run on the default simulator scenario.

Three entity classes, five fault classes, 2016 windows of 32 samples and an
80/20 split. Marked slow; deselect with `-m "not slow"`.
"""

import numpy as np
import pytest

from conftest import DATA_DIR
from encoder import build_samples
from evaluate import classification_accuracy, detection_metrics
from ingest import CLASS_NAMES, window_all
from model import ModelConfig, predict, train
from msadm import split_indices
from rulebase import RuleBaseSettings, build_rulebase, load_manual_intervals
from simnet import ScenarioConfig, simulate

pytestmark = pytest.mark.slow

SEED = 7


@pytest.fixture(scope="module")
def dataset():
    cfg = ScenarioConfig(seed=SEED)
    result = simulate(cfg)
    windows = window_all(result.traces, cfg.window_size, cfg.window_stride)
    rb = build_rulebase(windows, load_manual_intervals(DATA_DIR / "manual_intervals.json"),
                        RuleBaseSettings(seed=SEED))
    samples = build_samples(result.traces, rb, cfg.window_size, cfg.window_stride, labels=result.labels)
    train_idx, test_idx = split_indices(len(samples), 0.8, SEED)
    return samples, train_idx, test_idx


def fit_and_score(samples, train_idx, test_idx, mode, disable_mask=False):
    config = ModelConfig(
        entities=samples.X.shape[1],
        timesteps=samples.X.shape[2],
        channels=samples.X.shape[3],
        classes=len(CLASS_NAMES),
        learning_rate=0.005,
        epochs=40,
        seed=SEED,
    )
    X = samples.recalibrated(mode, disable_mask)
    params, _ = train(X[train_idx], samples.y_d[train_idx], samples.y_c[train_idx], config)
    out = predict(params, X[test_idx])

    y_d, y_c = samples.y_d[test_idx], samples.y_c[test_idx]
    detection = detection_metrics(out.is_anomalous.astype(int), y_d)
    faulty = y_d == 1
    classification = classification_accuracy(out.predicted_class[faulty], y_c[faulty])
    return detection, classification


def test_scenario_size(dataset):
    samples, train_idx, test_idx = dataset
    assert len(samples) == 3 * 8 * 84
    assert len(test_idx) == round(0.2 * len(samples))
    assert set(samples.y_c[samples.y_d == 1]) <= set(range(1, len(CLASS_NAMES)))
    assert len(set(samples.y_c[samples.y_d == 1])) == len(CLASS_NAMES) - 1


def test_detection_and_mask_ablation(dataset):
    samples, train_idx, test_idx = dataset
    detection, classification = fit_and_score(samples, train_idx, test_idx, "baseline")

    assert detection.accuracy >= 90.0
    assert classification >= 80.0

    _, unmasked = fit_and_score(samples, train_idx, test_idx, "literal", disable_mask=True)
    assert classification - unmasked >= 5.0
    assert np.isfinite(unmasked)
