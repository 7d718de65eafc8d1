"""Paired statistics for per-case metric comparisons.

The paired t-test two-sided p-value comes from the regularized incomplete
beta relation for the t distribution. The Wilcoxon signed-rank test drops
zero differences, ranks |d| with average ranks for ties and reports
W = min(W+, W-); for up to 20 effective pairs the p-value is exact over all
2^n sign assignments (computed by convolving the rank generating function,
which enumerates the same distribution), otherwise a normal approximation
with continuity correction and tie-corrected variance is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.stats import rankdata

EXACT_WILCOXON_MAX_N = 20


@dataclass(frozen=True)
class PairedTestResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str

    def __post_init__(self):
        if not (0.0 <= self.p_value <= 1.0):
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")


def _paired_differences(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"paired samples must be equal-length 1D, got {a.shape}/{b.shape}")
    return a - b


def t_sf_two_sided(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t via the regularized incomplete beta."""
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    x = df / (df + t * t)
    return float(special.betainc(0.5 * df, 0.5, x))


def paired_t_test(a, b) -> PairedTestResult:
    """Two-sided paired Student's t-test on per-case values."""
    d = _paired_differences(a, b)
    n = d.size
    if n < 2:
        raise ValueError(f"paired t-test needs at least 2 pairs, got {n}")
    if np.ptp(d) == 0.0:
        raise ValueError("paired t-test undefined: all differences are identical")
    t = d.mean() / (d.std(ddof=1) / math.sqrt(n))
    return PairedTestResult(statistic=float(t), p_value=t_sf_two_sided(t, n - 1),
                            n_effective=n, method="paired-t")


def _exact_wilcoxon_tail(doubled_ranks: np.ndarray, doubled_w: int) -> float:
    """P(W+ <= w) over all 2^n sign assignments, with ranks doubled so that
    average ranks become integers. Exact integer counting."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for rank in doubled_ranks:
        rank = int(rank)
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[: total + 1 - rank]
        counts = counts + shifted
    tail = int(counts[: doubled_w + 1].sum())
    return 2.0 * tail / float(2 ** len(doubled_ranks))


def wilcoxon_signed_rank(a, b) -> PairedTestResult:
    """Two-sided Wilcoxon signed-rank test on per-case values."""
    d = _paired_differences(a, b)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise ValueError("wilcoxon undefined: all differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p = min(1.0, _exact_wilcoxon_tail(doubled, int(round(2.0 * w))))
        return PairedTestResult(statistic=w, p_value=p, n_effective=n,
                                method="wilcoxon-exact")

    mean = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    variance -= (tie_counts ** 3 - tie_counts).sum() / 48.0
    if variance <= 0:
        raise ValueError("wilcoxon variance degenerate (all |differences| tied)")
    z = (w - mean + 0.5) / math.sqrt(variance)  # W <= mean, correct toward it
    p = min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0)))
    return PairedTestResult(statistic=w, p_value=p, n_effective=n,
                            method="wilcoxon-normal")
