"""
Window-level KPI features: mean, variance, jitter and trend.

    f_avg   = (1/n) Σ v_i
    f_var   = (1/n) Σ (v_i - f_avg)^2      population variance
    f_jit   = sqrt(f_var)
    f_trend = number of significant local extrema

An extremum at index i counts when it is a strict local max or min and
differs from both neighbours by more than the noise threshold h. The window
is split into m overlapping subintervals (~50% overlap); only points interior
to some subinterval are candidates and each sample is counted once.
"""

import math
from typing import NamedTuple

import numpy as np

from errors import DomainError

DEFAULT_SUBINTERVALS = 4


class FeatureVector(NamedTuple):
    f_avg: float
    f_var: float
    f_jit: float
    f_trend: int

    def as_array(self):
        return np.array([self.f_avg, self.f_var, self.f_jit, float(self.f_trend)])


def _samples(w):
    values = np.asarray(getattr(w, "values", w), dtype=float)
    if values.ndim != 1 or len(values) < 2:
        raise DomainError(f"need a 1-D window of at least 2 samples, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise DomainError("window contains non-finite samples")
    return values


def subintervals(n, m):
    """
    (start, stop) bounds of m overlapping subintervals covering n samples.

    Length starts at ceil(2n/(m+1)) (50% overlap) and grows until every
    interior sample of the window is interior to at least one subinterval.
    """
    if m < 1 or m > n / 2:
        raise DomainError(f"subinterval count m={m} outside [1, n/2] for n={n}")
    if m == 1:
        return [(0, n)]

    length = max(3, math.ceil(2 * n / (m + 1)))
    while True:
        length = min(length, n)
        starts = np.round(np.linspace(0, n - length, m)).astype(int)
        bounds = [(int(s), int(s) + length) for s in starts]
        covered = np.zeros(n, dtype=bool)
        for start, stop in bounds:
            covered[start + 1:stop - 1] = True
        if covered[1:n - 1].all() or length == n:
            return bounds
        length += 1


def count_extrema(w, h, m=DEFAULT_SUBINTERVALS):
    """
    Count significant local extrema across overlapping subintervals.

    Args:
        w: KpiWindow or 1-D array of samples
        h: noise threshold (>= 0), same units as the samples
        m: number of subintervals, 1 <= m <= n/2

    Returns:
        int: number of distinct sample indices that qualify
    """
    values = _samples(w)
    if h < 0:
        raise DomainError(f"noise threshold must be >= 0, got {h}")
    n = len(values)
    if n < 3:
        return 0

    left = values[1:-1] - values[:-2]
    right = values[1:-1] - values[2:]
    significant = (np.abs(left) > h) & (np.abs(right) > h)
    # Strict max: above both neighbours; strict min: below both
    extremum = ((left > 0) & (right > 0)) | ((left < 0) & (right < 0))
    qualifies = np.zeros(n, dtype=bool)
    qualifies[1:-1] = significant & extremum

    counted = np.zeros(n, dtype=bool)
    for start, stop in subintervals(n, m):
        counted[start + 1:stop - 1] |= qualifies[start + 1:stop - 1]
    return int(counted.sum())


def extract_features(w, h, m=DEFAULT_SUBINTERVALS):
    """
    Compute the feature vector of one window.

    Returns:
        FeatureVector: (f_avg, f_var, f_jit, f_trend)
    """
    values = _samples(w)
    f_avg = float(np.mean(values))
    f_var = float(np.mean((values - f_avg) ** 2))
    return FeatureVector(
        f_avg=f_avg,
        f_var=f_var,
        f_jit=math.sqrt(f_var),
        f_trend=count_extrema(values, h, m),
    )


def feature_matrix(windows, h, m=DEFAULT_SUBINTERVALS):
    """Stack feature vectors of many windows into an [n x 4] array."""
    if not windows:
        return np.zeros((0, 4))
    return np.vstack([extract_features(w, h, m).as_array() for w in windows])


def default_noise_threshold(normal_windows):
    """
    Noise threshold from normal history: sqrt of the mean window variance.

    Square-rooted so the threshold carries the KPI's own units.
    """
    if not normal_windows:
        raise DomainError("need at least one normal window to derive the noise threshold")
    variances = []
    for w in normal_windows:
        values = _samples(w)
        variances.append(float(np.mean((values - values.mean()) ** 2)))
    return math.sqrt(float(np.mean(variances)))
