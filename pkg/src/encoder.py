"""
Recalibrate model inputs with the scaled states of each window.

    r_f = (v_f - L_f) / (U_f - L_f)     relative intensity inside the interval
    K_f = s_f * r_f                     state code times intensity

The mask is applied per (entity, channel) to the normalised input tensor,
either as X * (1 + K) ("baseline", default) or X * K ("literal").

Also assembles labelled sample tensors from traces for training and detection.
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, DataError, DomainError
from ingest import CLASS_NAMES, window_all
from rulebase import scale

logger = logging.getLogger(__name__)

MASK_MODES = ("baseline", "literal")


def relative_intensity(v, interval):
    """Position of v inside its interval in [0, 1]; point intervals give 1."""
    lower, upper = interval.lower, interval.upper
    if upper < lower:
        raise DomainError(f"interval upper {upper} below lower {lower}")
    if lower == upper:
        return 1.0
    v = min(max(v, lower), upper)
    return (v - lower) / (upper - lower)


def recalibration_weight(s, r):
    if s < 0:
        raise DomainError(f"state code must be >= 0, got {s}")
    if not 0.0 <= r <= 1.0:
        raise DomainError(f"relative intensity must lie in [0, 1], got {r}")
    return s * r


def build_mask(entries):
    """Mask K over channels from one window's LSS entries (channel order)."""
    return np.array(
        [recalibration_weight(e.code, relative_intensity(e.representative_value, e.interval)) for e in entries],
        dtype=float,
    )


def apply_mask(X, K, mode="baseline"):
    """
    Recalibrate a feature tensor.

    Args:
        X: [E, T, C] or batched [B, E, T, C]
        K: [E, C] or batched [B, E, C]
        mode: "baseline" → X * (1 + K), "literal" → X * K
    """
    X = np.asarray(X, dtype=float)
    K = np.asarray(K, dtype=float)
    if mode not in MASK_MODES:
        raise DomainError(f"unknown mask mode '{mode}' (expected one of {MASK_MODES})")
    if X.ndim not in (3, 4) or K.ndim != X.ndim - 1:
        raise DomainError(f"mask of shape {K.shape} does not fit tensor of shape {X.shape}")
    expected = X.shape[:-2] + X.shape[-1:]
    if K.shape != expected:
        raise DomainError(f"mask shape {K.shape} does not match tensor {X.shape} (expected {expected})")

    weights = np.expand_dims(K, axis=-2)
    if mode == "baseline":
        return X * (1.0 + weights)
    return X * weights


def normalize_window(values, rule_set):
    """
    Signed log compression of deviations from the normal state.

        z = (v - mu) / sigma,  out = sign(z) * log1p(|z|)

    mu and sigma are the normal centre's mean and jitter, so two classes that
    differ only by a value scale produce the same tensor.
    """
    values = np.asarray(values, dtype=float)
    z = (values - rule_set.normal_level) / rule_set.normal_spread
    return np.sign(z) * np.log1p(np.abs(z))


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Per (entity, window) input tensors, masks and labels."""

    X: np.ndarray
    K: np.ndarray
    y_d: np.ndarray
    y_c: np.ndarray
    keys: tuple
    entity_classes: tuple
    kpis: tuple
    states: tuple

    def __len__(self):
        return len(self.keys)

    def recalibrated(self, mode="baseline", disable_mask=False):
        K = np.zeros_like(self.K) if disable_mask else self.K
        return apply_mask(self.X, K, mode)

    def subset(self, index):
        index = np.asarray(index, dtype=int)
        return SampleSet(
            X=self.X[index],
            K=self.K[index],
            y_d=self.y_d[index],
            y_c=self.y_c[index],
            keys=tuple(self.keys[i] for i in index),
            entity_classes=tuple(self.entity_classes[i] for i in index),
            kpis=self.kpis,
            states=tuple(self.states[i] for i in index),
        )


def _peer_lists(entities, peers):
    """Peers of each entity: the next entities of its class in id order."""
    by_class = {}
    for entity_id, entity_class in entities.items():
        by_class.setdefault(entity_class, []).append(entity_id)

    result = {}
    for entity_class, members in by_class.items():
        members = sorted(members)
        if peers >= len(members):
            raise ConfigError(
                f"model.peers={peers} needs more than {len(members)} entities of class '{entity_class}'"
            )
        for i, entity_id in enumerate(members):
            result[entity_id] = [members[(i + j) % len(members)] for j in range(1, peers + 1)]
    return result


def build_input(entity_windows, kpis, rb):
    """
    Tensor and mask for one sample.

    Args:
        entity_windows: list of {kpi_name: KpiWindow}, target entity first
        kpis: channel order
        rb: RuleBase

    Returns:
        (X [E, T, C], K [E, C], LSS entries of the target entity)
    """
    E = len(entity_windows)
    T = len(next(iter(entity_windows[0].values())).values)
    C = len(kpis)
    X = np.zeros((E, T, C))
    K = np.zeros((E, C))
    target_states = []
    for e, by_kpi in enumerate(entity_windows):
        entries = []
        for c, kpi in enumerate(kpis):
            w = by_kpi[kpi]
            rs = rb.lookup(w.entity_class, kpi)
            X[e, :, c] = normalize_window(w.values, rs)
            entries.append(scale(w, rb))
        K[e] = build_mask(entries)
        if e == 0:
            target_states = entries
    return X, K, target_states


def build_samples(traces, rb, T, stride, labels=None, peers=0, kpis=None):
    """
    Assemble one sample per (entity, window) having every KPI.

    Args:
        traces: list of KpiTrace
        rb: RuleBase covering every (entity_class, kpi) present
        T, stride: windowing
        labels: optional DataFrame (entity_id, window_index, anomaly, fault_class)
        peers: extra same-class entities stacked on the entity axis
        kpis: channel order (default: order of first appearance)

    Returns:
        SampleSet
    """
    windows = window_all(traces, T, stride)
    if not windows:
        raise DataError(f"no trace is long enough for windows of {T} samples")

    if kpis is None:
        kpis = tuple(dict.fromkeys(w.kpi_name for w in windows))
    entities = {w.entity_id: w.entity_class for w in windows}
    peer_of = _peer_lists(entities, peers)

    index = {}
    for w in windows:
        index.setdefault((w.entity_id, w.window_index), {})[w.kpi_name] = w

    label_lookup = None
    if labels is not None:
        label_lookup = {
            (row.entity_id, int(row.window_index)): (bool(row.anomaly), row.fault_class)
            for row in labels.itertuples(index=False)
        }

    X, K, y_d, y_c, keys, classes, states = [], [], [], [], [], [], []
    for (entity_id, window_index), by_kpi in index.items():
        group = [by_kpi] + [index.get((p, window_index), {}) for p in peer_of[entity_id]]
        if any(not all(k in g for k in kpis) for g in group):
            logger.debug("skipping %s#%d: missing KPI windows", entity_id, window_index)
            continue

        x, k, entries = build_input(group, kpis, rb)
        X.append(x)
        K.append(k)
        keys.append((entity_id, window_index))
        classes.append(entities[entity_id])
        states.append(tuple(entries))

        if label_lookup is None:
            y_d.append(0)
            y_c.append(0)
            continue
        try:
            anomaly, fault_class = label_lookup[(entity_id, window_index)]
        except KeyError:
            raise DataError(f"no label for entity '{entity_id}' window {window_index}") from None
        y_d.append(int(anomaly))
        y_c.append(CLASS_NAMES.index(fault_class))

    if not keys:
        raise DataError("no complete (entity, window) sample could be assembled")

    logger.info("assembled %d samples, E=%d T=%d C=%d", len(keys), peers + 1, T, len(kpis))
    return SampleSet(
        X=np.stack(X),
        K=np.stack(K),
        y_d=np.array(y_d, dtype=int),
        y_c=np.array(y_c, dtype=int),
        keys=tuple(keys),
        entity_classes=tuple(classes),
        kpis=tuple(kpis),
        states=tuple(states),
    )
