"""Evaluation metrics and paired statistics.

Dice and relative volume difference per tract and subject, plus the paired
Student's t-test and the paired-design Cohen's d used to compare strategies.
The t-distribution tail probability is evaluated through the regularized
incomplete beta function (continued fraction), not a table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import DegenerateTestError, ParameterError, ShapeError, UndefinedMetricError
from .synthdata import SyntheticSubject


def binarize(probs: np.ndarray, threshold: float) -> np.ndarray:
    """Strict thresholding: True where the probability exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    return probs > threshold


def dice(pred: np.ndarray, ref: np.ndarray) -> float:
    """Overlap coefficient 2|A^B| / (|A|+|B|); two empty masks agree perfectly."""
    if pred.shape != ref.shape:
        raise ShapeError(f"dice: shapes differ, {pred.shape} vs {ref.shape}")
    pred = pred.astype(bool)
    ref = ref.astype(bool)
    total = pred.sum() + ref.sum()
    if total == 0:
        return 1.0
    return 2.0 * float((pred & ref).sum()) / float(total)


def rvd(pred: np.ndarray, ref: np.ndarray) -> float:
    """Relative volume difference | |pred| - |ref| | / |ref|."""
    if pred.shape != ref.shape:
        raise ShapeError(f"rvd: shapes differ, {pred.shape} vs {ref.shape}")
    ref_volume = float(ref.astype(bool).sum())
    if ref_volume == 0:
        raise UndefinedMetricError("rvd is undefined for an empty reference mask")
    return abs(float(pred.astype(bool).sum()) - ref_volume) / ref_volume


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) evaluated by continued fraction with the symmetry transform."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise ParameterError(f"degrees of freedom must be >= 1, got {df}")
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


class TTestResult(NamedTuple):
    t: float
    p: float


def _paired_differences(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired samples must be 1-D and equal length, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ParameterError("paired statistics need at least two pairs")
    return a - b


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired Student's t-test on the differences a - b."""
    diffs = _paired_differences(a, b)
    n = diffs.size
    sd = diffs.std(ddof=1)
    if sd == 0.0:
        raise DegenerateTestError("paired t-test undefined: zero variance of differences")
    t = float(diffs.mean() / (sd / math.sqrt(n)))
    return TTestResult(t=t, p=student_t_two_sided_p(t, n - 1))


def cohens_d(a, b) -> float:
    """Paired-design effect size: mean of differences over their sample std."""
    diffs = _paired_differences(a, b)
    sd = diffs.std(ddof=1)
    if sd == 0.0:
        raise DegenerateTestError("cohens_d undefined: zero variance of differences")
    return float(diffs.mean() / sd)


class ComparisonResult(NamedTuple):
    t: float
    p: float
    d: float


def paired_comparison(a, b) -> ComparisonResult:
    test = paired_t_test(a, b)
    return ComparisonResult(t=test.t, p=test.p, d=cohens_d(a, b))


@dataclass
class EvalReport:
    """Per-tract, per-subject Dice and RVD with their aggregate means."""

    subject_ids: list[int]
    dice: np.ndarray  # [T, S]
    rvd: np.ndarray   # [T, S]
    tract_mean_dice: np.ndarray
    tract_mean_rvd: np.ndarray
    mean_dice: float
    mean_rvd: float

    @classmethod
    def from_per_subject(cls, subject_ids: list[int], dice_values: np.ndarray,
                         rvd_values: np.ndarray) -> "EvalReport":
        return cls(
            subject_ids=list(subject_ids),
            dice=dice_values,
            rvd=rvd_values,
            tract_mean_dice=dice_values.mean(axis=1),
            tract_mean_rvd=rvd_values.mean(axis=1),
            mean_dice=float(dice_values.mean()),
            mean_rvd=float(rvd_values.mean()),
        )

    def csv_rows(self, strategy: str) -> list[tuple]:
        rows = []
        for t in range(self.dice.shape[0]):
            for s, subject_id in enumerate(self.subject_ids):
                rows.append((strategy, t, subject_id,
                             float(self.dice[t, s]), float(self.rvd[t, s])))
        return rows


def evaluate_model(model, test: list[SyntheticSubject],
                   threshold: float = 0.5) -> EvalReport:
    """Per-tract Dice and RVD of a model over the test subjects, eval mode.

    ``model`` is anything with ``predict_probs(input) -> [T, H, W]``; a bare
    callable with the same signature also works.  When the model accepts a
    batched ``[B, 9, H, W]`` input, all subjects are predicted in one pass.
    """
    if not test:
        raise ParameterError("evaluate_model needs at least one test subject")
    predict: Callable = getattr(model, "predict_probs", model)
    task = getattr(model, "task", "novel")
    n_tracts = (test[0].existing_labels if task == "existing"
                else test[0].novel_labels).shape[0]
    expected = (len(test), n_tracts, test[0].input.shape[-2], test[0].input.shape[-1])
    try:
        all_probs = np.asarray(predict(np.stack([s.input for s in test])))
        if all_probs.shape != expected:
            raise ValueError
    except Exception:
        all_probs = np.stack([np.asarray(predict(s.input)) for s in test])
    dice_values = np.empty((n_tracts, len(test)))
    rvd_values = np.empty((n_tracts, len(test)))
    for s, subject in enumerate(test):
        refs = subject.existing_labels if task == "existing" else subject.novel_labels
        pred = binarize(all_probs[s], threshold)
        for t in range(n_tracts):
            ref = refs[t] > 0.5
            dice_values[t, s] = dice(pred[t], ref)
            rvd_values[t, s] = rvd(pred[t], ref)
    return EvalReport.from_per_subject([s.id for s in test], dice_values, rvd_values)
