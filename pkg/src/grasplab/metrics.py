"""Evaluation metrics: Wilson interval, binary scores, report rows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Z95 = 1.959963984540054      # two-sided 95 %


def wilson_interval(successes: int, trials: int,
                    z: float = Z95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion.

    Well behaved for small n and rates near 0/1; always contains the point
    estimate and stays inside [0, 1].
    """
    if trials == 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    spread = (z / denom) * math.sqrt(p * (1 - p) / trials
                                     + z * z / (4 * trials * trials))
    return max(0.0, center - spread), min(1.0, center + spread)


def binary_scores(probs: np.ndarray, rewards: np.ndarray,
                  threshold: float = 0.5) -> tuple[float, float]:
    """(accuracy, F1 of the success class) for probability predictions."""
    pred = np.asarray(probs) >= threshold
    truth = np.asarray(rewards) == 1
    accuracy = float((pred == truth).mean()) if truth.size else 0.0
    tp = float((pred & truth).sum())
    fp = float((pred & ~truth).sum())
    fn = float((~pred & truth).sum())
    if tp == 0.0:
        return accuracy, 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return accuracy, 2 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    attempts: int = 0
    loss: float = float("nan")
    accuracy: float = float("nan")
    f1: float = float("nan")
    grasp_rate: float = float("nan")
    wilson_low: float = float("nan")
    wilson_high: float = float("nan")
    pph: float = float("nan")
    n_samples: int = 0

    CSV_HEADER = "attempts,loss,accuracy,f1,grasp_rate"

    def csv_row(self) -> str:
        def fmt(v):
            return "" if isinstance(v, float) and math.isnan(v) else f"{v:.6g}"
        return ",".join([str(self.attempts), fmt(self.loss),
                         fmt(self.accuracy), fmt(self.f1),
                         fmt(self.grasp_rate)])


def grasp_rate_report(successes: int, trials: int, attempts: int,
                      nominal_attempt_s: float = 10.0) -> MetricsReport:
    rate = successes / trials if trials else float("nan")
    lo, hi = wilson_interval(successes, trials)
    pph = 3600.0 / nominal_attempt_s * rate if trials else float("nan")
    return MetricsReport(attempts=attempts, grasp_rate=rate, wilson_low=lo,
                         wilson_high=hi, pph=pph, n_samples=trials)
