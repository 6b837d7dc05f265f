"""Evaluation battery: normalized bias, two-way mixed-model ICC with the
four-band qualitative scale, exact Wilcoxon signed-rank tests, and the
16-segment regional p-map.

The Wilcoxon p-value is exact: it enumerates the full sign-assignment
distribution of the rank-sum statistic (dynamic programming over the
doubled midranks, identical to summing over all 2^n assignments), so the
unanimous-sign cases give p = 2/2^n exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import f as f_dist

from .errors import ValidationError

ICC_BANDS = ((0.75, "Excellent"), (0.60, "Good"), (0.40, "Fair"))


def normalized_bias(h_ref: float, h_rec: float) -> float:
    """beta = |(h_rec - h_ref) / h_ref|."""
    if h_ref == 0:
        raise ValidationError("normalized bias undefined for h_ref = 0")
    return abs((h_rec - h_ref) / h_ref)


def icc_band(r: float) -> str:
    for threshold, name in ICC_BANDS:
        if r >= threshold:
            return name
    return "Poor"


@dataclass(frozen=True)
class IccResult:
    r: float
    band: str
    ci_low: float
    ci_high: float
    defined: bool = True


def icc_absolute_agreement(pairs: np.ndarray, confidence: float = 0.95) -> IccResult:
    """Single-measure absolute-agreement ICC from a two-way ANOVA.

    ``pairs`` is (n_subjects, k_raters); here k = 2 (reference,
    reconstruction).  r = (MS_R - MS_E) /
    (MS_R + (k-1) MS_E + (k/n)(MS_C - MS_E)).  The confidence interval
    follows the F-distribution bounds for this ICC form; only the point
    estimate drives the qualitative band.
    """
    data = np.asarray(pairs, dtype=float)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValidationError(f"need an (n, k>=2) table, got shape {data.shape}")
    n, k = data.shape
    if n < 3:
        raise ValidationError(f"need >= 3 subjects, got {n}")
    grand = data.mean()
    row_means = data.mean(axis=1)
    col_means = data.mean(axis=0)
    ss_total = float(((data - grand) ** 2).sum())
    ss_rows = float(k * ((row_means - grand) ** 2).sum())
    ss_cols = float(n * ((col_means - grand) ** 2).sum())
    ss_err = ss_total - ss_rows - ss_cols
    if ss_total == 0:
        return IccResult(float("nan"), "Undefined", float("nan"), float("nan"),
                         defined=False)
    ms_r = ss_rows / (n - 1)
    ms_c = ss_cols / (k - 1)
    ms_e = ss_err / ((n - 1) * (k - 1))
    denom = ms_r + (k - 1) * ms_e + (k / n) * (ms_c - ms_e)
    if denom == 0:
        return IccResult(float("nan"), "Undefined", float("nan"), float("nan"),
                         defined=False)
    r = (ms_r - ms_e) / denom

    # McGraw & Wong (1996) interval for ICC(A,1)
    alpha = 1.0 - confidence
    ci_low = ci_high = float("nan")
    if ms_e > 0 and abs(1.0 - r) > 1e-15:
        a = (k * r) / (n * (1.0 - r))
        b = 1.0 + (k * r * (n - 1)) / (n * (1.0 - r))
        v = (a * ms_c + b * ms_e) ** 2 / (
            (a * ms_c) ** 2 / (k - 1) + (b * ms_e) ** 2 / ((n - 1) * (k - 1)))
        f_l = f_dist.ppf(1 - alpha / 2, n - 1, v)
        f_u = f_dist.ppf(1 - alpha / 2, v, n - 1)
        ci_low = (n * (ms_r - f_l * ms_e)
                  / (f_l * (k * ms_c + (k * n - k - n) * ms_e) + n * ms_r))
        ci_high = (n * (f_u * ms_r - ms_e)
                   / (k * ms_c + (k * n - k - n) * ms_e + n * f_u * ms_r))
    return IccResult(float(r), icc_band(float(r)), float(ci_low), float(ci_high))


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with midrank ties."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class WilcoxonResult:
    p: float
    w_plus: float
    n_used: int
    all_zero: bool = False


def wilcoxon_signed_rank(ref: np.ndarray, rec: np.ndarray) -> WilcoxonResult:
    """Exact two-sided Wilcoxon signed-rank test on paired values.

    Zero differences are discarded; ties get midranks.  The two-sided p
    doubles the smaller exact tail of the sign-assignment distribution
    and caps at 1.
    """
    ref = np.asarray(ref, dtype=float)
    rec = np.asarray(rec, dtype=float)
    if ref.shape != rec.shape or ref.ndim != 1 or ref.size < 1:
        raise ValidationError(f"need equal-length 1-D pairs, got {ref.shape}, {rec.shape}")
    diffs = rec - ref
    diffs = diffs[diffs != 0]
    if diffs.size == 0:
        return WilcoxonResult(1.0, 0.0, 0, all_zero=True)
    n = diffs.size
    ranks = _midranks(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())

    # exact distribution over the 2^n sign assignments; midranks are
    # half-integers, so doubled ranks are integers
    ranks2 = np.rint(2 * ranks).astype(np.int64)
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r2 in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r2:] = counts[:len(counts) - r2]
        counts = counts + shifted
    w2 = int(np.rint(2 * w_plus))
    denom = 1 << n
    lower = int(sum(counts[:w2 + 1]))
    upper = int(sum(counts[w2:]))
    p = 2 * Fraction(min(lower, upper), denom)
    return WilcoxonResult(float(min(p, Fraction(1))), w_plus, n)


def regional_pmap(ref_segments: np.ndarray, rec_segments: np.ndarray,
                  alpha: float = 0.05) -> list[tuple[float, bool]]:
    """Per-AHA-segment Wilcoxon across subjects: 16 (p, significant) rows.

    Inputs are (16, n_subjects) tables of regional values.
    """
    ref_segments = np.asarray(ref_segments, dtype=float)
    rec_segments = np.asarray(rec_segments, dtype=float)
    if ref_segments.shape != rec_segments.shape or ref_segments.shape[0] != 16:
        raise ValidationError(
            f"need (16, n_subjects) tables, got {ref_segments.shape}, "
            f"{rec_segments.shape}")
    if not (np.isfinite(ref_segments).all() and np.isfinite(rec_segments).all()):
        raise ValidationError("missing segment data in regional tables")
    out = []
    for s in range(16):
        res = wilcoxon_signed_rank(ref_segments[s], rec_segments[s])
        out.append((res.p, res.p < alpha))
    return out


@dataclass(frozen=True)
class StatsResults:
    """Per-(method, R, metric) summary across subjects."""

    biases: np.ndarray
    bias_mean: float
    bias_std: float
    icc: IccResult
    wilcoxon: WilcoxonResult


def summarize(ref_values: np.ndarray, rec_values: np.ndarray) -> StatsResults:
    ref_values = np.asarray(ref_values, dtype=float)
    rec_values = np.asarray(rec_values, dtype=float)
    biases = np.array([normalized_bias(a, b) for a, b in zip(ref_values, rec_values)])
    icc = icc_absolute_agreement(np.column_stack([ref_values, rec_values]))
    wil = wilcoxon_signed_rank(ref_values, rec_values)
    return StatsResults(biases, float(biases.mean()), float(biases.std(ddof=1))
                        if len(biases) > 1 else 0.0, icc, wil)
