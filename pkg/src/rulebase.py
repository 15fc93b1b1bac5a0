#!/usr/bin/env python3
"""
Scaling rule base: cluster window features per (entity_class, KPI), rank the
clusters by severity and map them to raw-value state intervals.

Build procedure per group:
    1. Window features (mean, variance, jitter, trend), z-standardised
    2. K-means for k = 1..K_max, k chosen at the WCSS elbow
    3. Largest cluster = normal mode; severity S_j = ||a_j - a_normal||
    4. Cluster raw interval = [min, max] of member means, overlaps split at
       midpoints; manual intervals overlaid (manual wins, the
       clustered range keeps every piece left around it)
    5. Codes by ascending severity from the normal code; descriptors attached

New windows are scaled to a state code: a manual interval containing the
window mean wins, otherwise the nearest cluster centre decides.

Usage:
    python src/rulebase.py traces.csv rulebase.json
    python src/rulebase.py traces.csv rulebase.json --manual data/manual_intervals.json
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from errors import ConfigError, DomainError, GroupLookupError, MsadmError
from features import default_noise_threshold, extract_features, feature_matrix
from ingest import group_windows, load_traces, window_all

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

# Descriptors handed to clustered (non-normal) codes in ascending code order
SEVERITY_LADDER = [
    "slight", "minor", "moderate", "elevated", "considerable",
    "high", "severe", "extreme", "critical", "acute", "grave",
]

NORMAL_DESCRIPTOR = "normal"


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """K-means result in the standardised feature space."""

    centers: np.ndarray
    k: int
    normal_index: int
    seed: int
    counts: np.ndarray
    wcss: float
    n_iter: int = 0
    converged: bool = True
    k_reduced: bool = False
    labels: np.ndarray = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class StateInterval:
    """Raw-value interval with its state code."""

    lower: float
    upper: float
    code: int
    severity: float = 0.0
    descriptor: str = ""
    origin: str = "clustered"

    @property
    def is_point(self):
        return self.lower == self.upper

    def contains(self, v, topmost=False):
        if self.is_point:
            return v == self.lower
        return self.lower <= v < self.upper or (topmost and v == self.upper)


@dataclass(frozen=True)
class ManualInterval:
    """A manually designed interval as read from the manual intervals file."""

    entity_class: str
    kpi_name: str
    lower: float
    upper: float
    descriptor: str
    code: int = None

    @property
    def group(self):
        return (self.entity_class, self.kpi_name)


@dataclass(frozen=True)
class RuleBaseSettings:
    k_max: int = 8
    min_windows_per_cluster: int = 5
    normal_code: int = 1
    n_init: int = 10
    max_iter: int = 300
    subintervals: int = 4
    seed: int = 7

    @classmethod
    def from_config(cls, config):
        """Build settings from a PipelineConfig."""
        rb = config.rulebase
        return cls(
            k_max=int(rb["k_max"]),
            min_windows_per_cluster=int(rb["min_windows_per_cluster"]),
            normal_code=int(rb["normal_code"]),
            n_init=int(rb["n_init"]),
            max_iter=int(rb["max_iter"]),
            subintervals=int(config.features["subintervals"]),
            seed=config.seed,
        )


@dataclass(frozen=True, eq=False)
class RuleSet:
    """Rules for one (entity_class, kpi_name) group."""

    entity_class: str
    kpi_name: str
    cluster_model: ClusterModel
    cluster_codes: tuple
    intervals: tuple
    normal_code: int
    built_at: float
    noise_threshold: float
    subintervals: int
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    normal_level: float
    normal_spread: float

    @property
    def group(self):
        return (self.entity_class, self.kpi_name)

    def pieces(self, code):
        """Every interval carrying `code`, lowest first."""
        return [iv for iv in self.intervals if iv.code == code]

    def interval_for_code(self, code, v=None):
        """
        The interval of `code`.

        A clustered range cut by a manual interval leaves several pieces
        with one code; given v, the piece containing it (else the nearest)
        is returned.
        """
        pieces = self.pieces(code)
        if not pieces:
            return None
        if v is None or len(pieces) == 1:
            return pieces[0]
        top = self.top_interval()
        for iv in pieces:
            if iv.contains(v, topmost=iv is top):
                return iv
        return min(pieces, key=lambda iv: (max(iv.lower - v, v - iv.upper, 0.0), iv.lower))

    def top_interval(self):
        return max(self.intervals, key=lambda iv: (iv.upper, iv.lower))

    def interval_for_value(self, v):
        """The interval containing v (manual first), or None."""
        top = self.top_interval()
        for origin in ("manual", "clustered"):
            for iv in self.intervals:
                if iv.origin == origin and iv.contains(v, topmost=iv is top):
                    return iv
        return None

    def descriptor_map(self):
        return {iv.code: iv.descriptor for iv in self.intervals}

    def standardize(self, features):
        return (np.asarray(features, dtype=float) - self.feature_mean) / self.feature_scale


@dataclass(frozen=True)
class RuleBase:
    """All rule sets plus what is needed to rebuild them."""

    rule_sets: dict
    settings: RuleBaseSettings
    manual: tuple = ()
    warnings: tuple = ()

    @property
    def seed(self):
        return self.settings.seed

    @property
    def built_at(self):
        if not self.rule_sets:
            return float("-inf")
        return max(rs.built_at for rs in self.rule_sets.values())

    def lookup(self, entity_class, kpi_name):
        try:
            return self.rule_sets[(entity_class, kpi_name)]
        except KeyError:
            raise GroupLookupError(
                f"No rule set for entity class '{entity_class}', KPI '{kpi_name}'"
            ) from None

    def manual_for(self, group):
        return [m for m in self.manual if m.group == group]


@dataclass(frozen=True)
class ScaledState:
    """One LSS entry: the state of one KPI in one window."""

    entity_id: str
    entity_class: str
    kpi_name: str
    window_index: int
    code: int
    interval: StateInterval
    representative_value: float
    end_time: float = 0.0


# --- k-means ---------------------------------------------------------------

def _squared_distances(X, C):
    return cdist(X, C, "sqeuclidean")


def _kmeanspp_init(X, k, rng):
    """k-means++ seeding: next centre drawn with probability ∝ D(x)^2."""
    n = len(X)
    first = int(rng.integers(n))
    centers = [X[first]]
    d2 = ((X - X[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        idx = int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def _update_centers(X, labels, centers):
    new = centers.copy()
    for j in range(len(centers)):
        members = X[labels == j]
        if len(members):
            new[j] = members.mean(axis=0)
        else:
            # Empty cluster: move it onto the point worst served by its centre
            d2 = ((X - new[labels]) ** 2).sum(axis=1)
            new[j] = X[int(np.argmax(d2))]
    return new


def _lloyd(X, centers, max_iter):
    labels = _squared_distances(X, centers).argmin(axis=1)
    for iteration in range(1, max_iter + 1):
        centers = _update_centers(X, labels, centers)
        new_labels = _squared_distances(X, centers).argmin(axis=1)
        if np.array_equal(new_labels, labels):
            return centers, labels, iteration, True
        labels = new_labels
    return centers, labels, max_iter, False


def kmeans(points, k, seed, max_iter=300, n_init=1):
    """
    Lloyd's k-means with seeded k-means++ initialisation.

    Iterates until the assignment stops changing (or max_iter), so a
    converged model is a fixed point: every point is nearest its own centre
    and every centre is the mean of its members. With n_init > 1 the restart
    with the lowest WCSS is kept.

    If there are fewer distinct points than k, k is reduced to the distinct
    count and the model is flagged with k_reduced.

    Returns:
        ClusterModel
    """
    X = np.asarray(points, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise DomainError(f"kmeans needs a non-empty 2-D point array, got shape {X.shape}")
    if k < 1 or k > len(X):
        raise DomainError(f"need 1 <= k <= number of points, got k={k}, n={len(X)}")

    k_reduced = False
    distinct = len(np.unique(X, axis=0))
    if distinct < k:
        logger.warning("only %d distinct points, reducing k from %d", distinct, k)
        k = distinct
        k_reduced = True

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers = _kmeanspp_init(X, k, rng)
        centers, labels, n_iter, converged = _lloyd(X, centers, max_iter)
        wcss = float(_squared_distances(X, centers)[np.arange(len(X)), labels].sum())
        if best is None or wcss < best[0]:
            best = (wcss, centers, labels, n_iter, converged)

    wcss, centers, labels, n_iter, converged = best
    counts = np.bincount(labels, minlength=k)
    return ClusterModel(
        centers=centers,
        k=k,
        normal_index=int(np.argmax(counts)),
        seed=seed,
        counts=counts,
        wcss=wcss,
        n_iter=n_iter,
        converged=converged,
        k_reduced=k_reduced,
        labels=labels,
    )


def within_cluster_ss(points, model):
    """WCSS of points against the model's centres (nearest-centre assignment)."""
    X = np.asarray(points, dtype=float)
    return float(_squared_distances(X, model.centers).min(axis=1).sum())


def select_k(wcss):
    """
    Elbow method on a WCSS curve indexed k = 1..K_max.

    The curve is first repaired to be non-increasing. Returns the k in
    2..K_max-1 with the largest second difference (ties → smallest k),
    or 1 when the curve is flat.
    """
    curve = np.minimum.accumulate(np.asarray(wcss, dtype=float))
    if len(curve) < 3:
        raise DomainError(f"elbow needs K_max >= 3, got {len(curve)}")
    if np.all(curve == curve[0]):
        return 1

    second = curve[:-2] - 2 * curve[1:-1] + curve[2:]
    # second[i] belongs to k = i + 2
    return int(np.argmax(second)) + 2


def severity(center, normal_center):
    """Euclidean distance between a cluster centre and the normal centre."""
    return float(np.linalg.norm(np.asarray(center, dtype=float) - np.asarray(normal_center, dtype=float)))


# --- building ----------------------------------------------------------------

def _standardization(F):
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def _cluster_group(Z, settings):
    """Elbow-selected clustering of standardised features."""
    distinct = len(np.unique(Z, axis=0))
    k_cap = min(settings.k_max, len(Z) // settings.min_windows_per_cluster, distinct)
    k_cap = max(k_cap, 1)

    models = [
        kmeans(Z, k, settings.seed, settings.max_iter, settings.n_init)
        for k in range(1, k_cap + 1)
    ]
    if k_cap >= 3:
        chosen = select_k([m.wcss for m in models])
    else:
        chosen = 1
    return models[chosen - 1]


def _split_overlaps(ranges):
    """
    Resolve overlaps between per-cluster [min, max] ranges.

    Ranges are ordered by midpoint; each adjacent boundary moves to the
    midpoint between the upper bound of one and the lower bound of the next,
    which closes gaps and removes overlaps alike.
    """
    order = sorted(ranges, key=lambda r: ((r[1] + r[2]) / 2, r[0]))
    result = {j: [lo, hi] for j, lo, hi in order}
    for (j, _, _), (nxt, _, _) in zip(order, order[1:]):
        boundary = (result[j][1] + result[nxt][0]) / 2
        result[j][1] = boundary
        result[nxt][0] = boundary
    return result


def _subtract(lo, hi, manual):
    """Pieces of [lo, hi] not covered by manual intervals, in ascending order."""
    pieces = [(lo, hi)]
    for m in manual:
        remaining = []
        for a, b in pieces:
            if m.upper <= a and not (m.lower == m.upper == a) or m.lower >= b:
                remaining.append((a, b))
                continue
            if a < m.lower:
                remaining.append((a, min(b, m.lower)))
            if m.upper < b:
                remaining.append((max(a, m.upper), b))
        pieces = remaining
    return sorted((a, b) for a, b in pieces if b > a or (lo == hi and a == b))


def build_rule_set(windows, manual, settings, built_at=None):
    """
    Build the rules of one group.

    Args:
        windows: KpiWindows of a single (entity_class, kpi_name) group
        manual: ManualIntervals of the same group
        settings: RuleBaseSettings

    Returns:
        RuleSet, or None when the group has too few windows
    """
    entity_class, kpi_name = windows[0].group
    if len(windows) < settings.min_windows_per_cluster:
        return None

    n_samples = min(len(w.values) for w in windows)
    m = max(1, min(settings.subintervals, n_samples // 2))

    # Pass one: threshold from all history, largest cluster marks normal
    h_all = default_noise_threshold(windows)
    F = feature_matrix(windows, h_all, m)
    mean, scale = _standardization(F)
    first = _cluster_group((F - mean) / scale, settings)
    normal_windows = [w for w, label in zip(windows, first.labels) if label == first.normal_index]

    # Pass two: threshold from the normal windows only
    h = default_noise_threshold(normal_windows)
    F = feature_matrix(windows, h, m)
    mean, scale = _standardization(F)
    model = _cluster_group((F - mean) / scale, settings)

    normal = model.normal_index
    severities = [severity(c, model.centers[normal]) for c in model.centers]
    raw_centers = model.centers * scale + mean

    ranges = []
    for j in range(model.k):
        members = F[model.labels == j, 0]
        ranges.append((j, float(members.min()), float(members.max())))
    raw_intervals = _split_overlaps(ranges)

    manual = sorted(manual, key=lambda m_: (m_.lower, m_.upper))
    manual_codes = {m_.code for m_ in manual if m_.code is not None}

    # Codes: normal first, the rest by ascending severity, skipping manual codes
    order = sorted(
        (j for j in range(model.k) if j != normal),
        key=lambda j: (severities[j], raw_centers[j][0], j),
    )
    cluster_codes = [None] * model.k
    cluster_codes[normal] = settings.normal_code
    next_code = settings.normal_code + 1
    for j in order:
        while next_code in manual_codes:
            next_code += 1
        cluster_codes[j] = next_code
        next_code += 1

    # Manual intervals without a code are appended after every other code
    manual_resolved = []
    for m_ in manual:
        if m_.code is None:
            while next_code in manual_codes:
                next_code += 1
            manual_resolved.append(replace(m_, code=next_code))
            next_code += 1
        else:
            manual_resolved.append(m_)

    # Clustered ranges are cut around manual intervals; every remaining piece
    # keeps the cluster's code so the observed range stays covered
    intervals = []
    for j in range(model.k):
        lo, hi = raw_intervals[j]
        pieces = _subtract(lo, hi, manual_resolved)
        if not pieces:
            logger.info("%s/%s: cluster %d fully covered by manual intervals", entity_class, kpi_name, j)
            continue
        for a, b in pieces:
            intervals.append(StateInterval(a, b, cluster_codes[j], severities[j], "", "clustered"))

    normal_z = model.centers[normal]
    for m_ in manual_resolved:
        mid_z = ((m_.lower + m_.upper) / 2 - mean[0]) / scale[0]
        intervals.append(StateInterval(
            float(m_.lower), float(m_.upper), int(m_.code),
            abs(mid_z - normal_z[0]), m_.descriptor, "manual",
        ))

    intervals = _finalize_intervals(intervals, settings.normal_code, entity_class, kpi_name)

    if built_at is None:
        built_at = max(w.end_time for w in windows)

    normal_level = float(raw_centers[normal][0])
    normal_spread = float(raw_centers[normal][2])
    if not normal_spread > 0:
        normal_spread = 1e-12 * abs(normal_level) or 1.0

    logger.info("%s/%s: k=%d, h=%.6g, %d intervals", entity_class, kpi_name, model.k, h, len(intervals))

    return RuleSet(
        entity_class=entity_class,
        kpi_name=kpi_name,
        cluster_model=model,
        cluster_codes=tuple(cluster_codes),
        intervals=tuple(intervals),
        normal_code=settings.normal_code,
        built_at=float(built_at),
        noise_threshold=float(h),
        subintervals=m,
        feature_mean=mean,
        feature_scale=scale,
        normal_level=normal_level,
        normal_spread=normal_spread,
    )


def _finalize_intervals(intervals, normal_code, entity_class, kpi_name):
    """
    Monotone severities along code order and one descriptor per code.

    A code owned by a manual interval keeps the manual descriptor on all
    its pieces; the other clustered codes take "normal" or the next ladder
    entry.
    """
    by_code = sorted(intervals, key=lambda iv: (iv.code, iv.origin != "manual", iv.lower))
    descriptors = {iv.code: iv.descriptor for iv in by_code if iv.origin == "manual"}
    used = set(descriptors.values())
    ladder = [d for d in SEVERITY_LADDER if d not in used]

    severities = {}
    running = 0.0
    for code in sorted({iv.code for iv in by_code}):
        raw = max(iv.severity for iv in by_code if iv.code == code)
        severities[code] = 0.0 if code <= normal_code else max(running, raw)
        running = max(running, severities[code])
        if code in descriptors:
            continue
        if code == normal_code and NORMAL_DESCRIPTOR not in used:
            descriptors[code] = NORMAL_DESCRIPTOR
        else:
            if not ladder:
                raise ConfigError(
                    f"{entity_class}/{kpi_name}: ran out of severity descriptors; lower rulebase.k_max"
                )
            descriptors[code] = ladder.pop(0)
        used.add(descriptors[code])

    finalized = [
        replace(iv, severity=float(severities[iv.code]), descriptor=descriptors[iv.code])
        for iv in by_code
    ]

    return tuple(sorted(finalized, key=lambda iv: (iv.lower, iv.upper, iv.code)))


def build_rulebase(history, manual=(), settings=None):
    """
    Build rule sets for every (entity_class, kpi_name) group.

    Args:
        history: list of KpiWindows, or dict group → list of KpiWindows
        manual: ManualIntervals
        settings: RuleBaseSettings

    Returns:
        RuleBase (groups below the minimum size are skipped with a warning)
    """
    settings = settings or RuleBaseSettings()
    groups = history if isinstance(history, dict) else group_windows(history)

    rule_sets = {}
    warnings = []
    for group, windows in groups.items():
        group_manual = [m for m in manual if m.group == group]
        rule_set = build_rule_set(windows, group_manual, settings)
        if rule_set is None:
            message = (
                f"{group[0]}/{group[1]}: {len(windows)} windows is below the minimum "
                f"of {settings.min_windows_per_cluster}; group skipped"
            )
            logger.warning(message)
            warnings.append(message)
            continue
        rule_sets[group] = rule_set

    return RuleBase(rule_sets=rule_sets, settings=settings, manual=tuple(manual), warnings=tuple(warnings))


# --- scaling -----------------------------------------------------------------

def scale(w, rb):
    """
    Map a window to its LSS entry.

    A manual interval containing the window mean decides the code; otherwise
    the nearest cluster centre (ties → lower severity) does.
    """
    rs = rb.lookup(w.entity_class, w.kpi_name)
    m = max(1, min(rs.subintervals, len(w.values) // 2))
    fv = extract_features(w, rs.noise_threshold, m)
    v = fv.f_avg

    manual = [iv for iv in rs.intervals if iv.origin == "manual"]
    top = rs.top_interval()
    for iv in manual:
        if iv.contains(v, topmost=iv is top):
            return _entry(w, iv, v)

    z = rs.standardize(fv.as_array())
    candidates = []
    for j, code in enumerate(rs.cluster_codes):
        iv = rs.interval_for_code(code, v)
        if iv is None:
            continue
        d2 = float(((rs.cluster_model.centers[j] - z) ** 2).sum())
        candidates.append((d2, iv))
    if not candidates:
        raise GroupLookupError(f"{w.entity_class}/{w.kpi_name}: no cluster owns an interval")

    best = min(d2 for d2, _ in candidates)
    tied = [iv for d2, iv in candidates if math.isclose(d2, best, rel_tol=1e-12, abs_tol=1e-300)]
    chosen = min(tied, key=lambda iv: (iv.severity, iv.code))
    return _entry(w, chosen, v)


def _entry(w, interval, v):
    return ScaledState(
        entity_id=w.entity_id,
        entity_class=w.entity_class,
        kpi_name=w.kpi_name,
        window_index=w.window_index,
        code=interval.code,
        interval=interval,
        representative_value=float(v),
        end_time=float(w.end_time),
    )


def scale_windows(windows, rb):
    """LSS entries for a list of windows, in input order."""
    return [scale(w, rb) for w in windows]


def needs_update(rb, now, period):
    """True once `period` seconds have elapsed since the rule base was built."""
    return now - rb.built_at >= period


def recluster(rb, recent, now=None):
    """
    Rebuild the groups that have recent windows; other groups are untouched.

    Args:
        rb: current RuleBase
        recent: list of KpiWindows (or dict group → windows)
        now: build timestamp for rebuilt groups (default: latest window end)

    Returns:
        RuleBase: a new rule base; swapping it in is the caller's job
    """
    groups = recent if isinstance(recent, dict) else group_windows(recent)
    groups = {g: ws for g, ws in groups.items() if ws}
    if not groups:
        raise DomainError("recluster needs recent windows for at least one group")

    rule_sets = dict(rb.rule_sets)
    warnings = list(rb.warnings)
    for group, windows in groups.items():
        built_at = now if now is not None else max(w.end_time for w in windows)
        rule_set = build_rule_set(windows, rb.manual_for(group), rb.settings, built_at=built_at)
        if rule_set is None:
            message = f"{group[0]}/{group[1]}: too few recent windows to recluster; kept previous rules"
            logger.warning(message)
            warnings.append(message)
            continue
        rule_sets[group] = rule_set
        logger.info("reclustered %s/%s", *group)

    return RuleBase(rule_sets=rule_sets, settings=rb.settings, manual=rb.manual, warnings=tuple(warnings))


# --- persistence -------------------------------------------------------------

def _interval_to_dict(iv):
    return {
        "lower": iv.lower,
        "upper": iv.upper,
        "code": iv.code,
        "severity": iv.severity,
        "descriptor": iv.descriptor,
        "origin": iv.origin,
    }


def _manual_to_dict(m):
    return {
        "entity_class": m.entity_class,
        "kpi_name": m.kpi_name,
        "lower": m.lower,
        "upper": m.upper,
        "code": m.code,
        "descriptor": m.descriptor,
    }


def rulebase_to_dict(rb):
    groups = []
    for rs in rb.rule_sets.values():
        cm = rs.cluster_model
        groups.append({
            "entity_class": rs.entity_class,
            "kpi_name": rs.kpi_name,
            "built_at": rs.built_at,
            "normal_code": rs.normal_code,
            "noise_threshold": rs.noise_threshold,
            "subintervals": rs.subintervals,
            "feature_mean": [float(x) for x in rs.feature_mean],
            "feature_scale": [float(x) for x in rs.feature_scale],
            "normal_level": rs.normal_level,
            "normal_spread": rs.normal_spread,
            "cluster": {
                "centers": [[float(x) for x in c] for c in cm.centers],
                "k": cm.k,
                "normal_index": cm.normal_index,
                "seed": cm.seed,
                "counts": [int(c) for c in cm.counts],
                "wcss": cm.wcss,
                "n_iter": cm.n_iter,
                "converged": cm.converged,
                "k_reduced": cm.k_reduced,
            },
            "cluster_codes": list(rs.cluster_codes),
            "intervals": [_interval_to_dict(iv) for iv in rs.intervals],
        })
    return {
        "version": FORMAT_VERSION,
        "seed": rb.seed,
        "built_at": rb.built_at if rb.rule_sets else None,
        "settings": vars(rb.settings).copy(),
        "manual": [_manual_to_dict(m) for m in rb.manual],
        "warnings": list(rb.warnings),
        "groups": groups,
    }


def rulebase_from_dict(doc):
    if doc.get("version") != FORMAT_VERSION:
        raise DomainError(f"Unsupported rule base version {doc.get('version')!r}")
    settings = RuleBaseSettings(**doc["settings"])
    rule_sets = {}
    for g in doc["groups"]:
        c = g["cluster"]
        model = ClusterModel(
            centers=np.array(c["centers"], dtype=float),
            k=c["k"],
            normal_index=c["normal_index"],
            seed=c["seed"],
            counts=np.array(c["counts"], dtype=int),
            wcss=c["wcss"],
            n_iter=c["n_iter"],
            converged=c["converged"],
            k_reduced=c["k_reduced"],
        )
        rs = RuleSet(
            entity_class=g["entity_class"],
            kpi_name=g["kpi_name"],
            cluster_model=model,
            cluster_codes=tuple(g["cluster_codes"]),
            intervals=tuple(StateInterval(**iv) for iv in g["intervals"]),
            normal_code=g["normal_code"],
            built_at=g["built_at"],
            noise_threshold=g["noise_threshold"],
            subintervals=g["subintervals"],
            feature_mean=np.array(g["feature_mean"], dtype=float),
            feature_scale=np.array(g["feature_scale"], dtype=float),
            normal_level=g["normal_level"],
            normal_spread=g["normal_spread"],
        )
        rule_sets[rs.group] = rs
    manual = tuple(ManualInterval(**m) for m in doc.get("manual", []))
    return RuleBase(rule_sets=rule_sets, settings=settings, manual=manual, warnings=tuple(doc.get("warnings", [])))


def save_rulebase(rb, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rulebase_to_dict(rb), f, indent=2)
        f.write("\n")


def load_rulebase(path):
    with open(path, encoding="utf-8") as f:
        return rulebase_from_dict(json.load(f))


def load_manual_intervals(path):
    """
    Read manual intervals.

    The file is a JSON list of objects with entity_class, kpi_name, lower,
    upper, code (optional) and descriptor.
    """
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    entries = doc["intervals"] if isinstance(doc, dict) else doc

    manual = []
    for i, e in enumerate(entries):
        try:
            m = ManualInterval(
                entity_class=e["entity_class"],
                kpi_name=e["kpi_name"],
                lower=float(e["lower"]),
                upper=float(e["upper"]),
                descriptor=e["descriptor"],
                code=None if e.get("code") is None else int(e["code"]),
            )
        except KeyError as exc:
            raise DomainError(f"{path}: entry {i} is missing {exc}") from None
        if m.upper < m.lower:
            raise DomainError(f"{path}: entry {i} has upper < lower")
        manual.append(m)

    # Pairwise disjoint within a group (point intervals may sit on a bound)
    for group in {m.group for m in manual}:
        ordered = sorted((m for m in manual if m.group == group), key=lambda m: (m.lower, m.upper))
        for a, b in zip(ordered, ordered[1:]):
            if b.lower < a.upper:
                raise DomainError(f"{path}: manual intervals overlap in {group[0]}/{group[1]}")
    return manual


def main():
    parser = argparse.ArgumentParser(description="Build a scaling rule base from KPI traces")
    parser.add_argument("traces", type=Path, help="CSV trace file")
    parser.add_argument("output", type=Path, help="Rule base JSON to write")
    parser.add_argument("--manual", type=Path, help="Manual intervals JSON")
    parser.add_argument("--window", type=int, default=32)
    parser.add_argument("--k-max", type=int, default=8)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    try:
        traces = load_traces(args.traces)
        manual = load_manual_intervals(args.manual) if args.manual else []
        settings = RuleBaseSettings(k_max=args.k_max, seed=args.seed)
        rb = build_rulebase(window_all(traces, args.window, args.window), manual, settings)
        save_rulebase(rb, args.output)
    except (MsadmError, FileNotFoundError) as e:
        print(f"❌ Error: {e}")
        sys.exit(2)

    print(f"✅ Built {len(rb.rule_sets)} rule set(s) → {args.output}")
    for message in rb.warnings:
        print(f"⚠️  {message}")


if __name__ == "__main__":
    main()
