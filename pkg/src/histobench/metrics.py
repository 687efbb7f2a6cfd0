"""Scoring and replicate aggregation.

Scores live in raw metric units here: balanced accuracy in [0, 1], mean
Pearson in [-1, 1]. Report tables convert to score points (x100) at the
display boundary, never earlier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embeddings import TokenVariant
from .errors import ContractViolation

METRIC_RANGES = {
    "balanced-accuracy": (0.0, 1.0),
    "pearson-mean": (-1.0, 1.0),
}


def balanced_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-class recall over the classes observed in labels."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ContractViolation(
            f"predictions {predictions.shape} vs labels {labels.shape}"
        )
    if labels.size == 0:
        raise ContractViolation("balanced accuracy of empty input")
    recalls = []
    for c in np.unique(labels):
        mask = labels == c
        recalls.append(float((predictions[mask] == c).mean()))
    return float(np.mean(recalls))


def aggregate_replicates(values) -> tuple[float, float]:
    """Arithmetic mean and sample (n-1) standard deviation; std 0 when n=1."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ContractViolation("need >= 1 replicate value")
    mean = float(values.mean())
    std = 0.0 if values.size == 1 else float(values.std(ddof=1))
    return mean, std


def standard_error(values) -> float:
    """Std of the mean: sample std / sqrt(n)."""
    values = np.asarray(values, dtype=np.float64)
    _, std = aggregate_replicates(values)
    return std / math.sqrt(values.size)


def display_round(x: float) -> float:
    """One-decimal display rounding, round-half-to-even on the double."""
    return round(float(x), 1)


@dataclass(frozen=True)
class RunResult:
    """Aggregated outcome of one (task, model, variant) evaluation."""

    task_id: str
    model_id: str
    variant: TokenVariant
    metric: str
    replicate_values: tuple
    mean: float
    std: float

    def __post_init__(self):
        if self.metric not in METRIC_RANGES:
            raise ContractViolation(f"unknown metric {self.metric!r}")
        lo, hi = METRIC_RANGES[self.metric]
        for v in self.replicate_values:
            if not lo <= v <= hi:
                raise ContractViolation(
                    f"{self.metric} value {v} outside [{lo}, {hi}]"
                )
        mean, std = aggregate_replicates(self.replicate_values)
        if not math.isclose(mean, self.mean, rel_tol=0, abs_tol=1e-12):
            raise ContractViolation(f"mean {self.mean} != aggregate {mean}")
        if not math.isclose(std, self.std, rel_tol=0, abs_tol=1e-12):
            raise ContractViolation(f"std {self.std} != aggregate {std}")

    @classmethod
    def from_values(cls, task_id, model_id, variant, metric, values) -> "RunResult":
        mean, std = aggregate_replicates(values)
        return cls(
            task_id=task_id,
            model_id=model_id,
            variant=TokenVariant(variant),
            metric=metric,
            replicate_values=tuple(float(v) for v in values),
            mean=mean,
            std=std,
        )

    @property
    def stderr(self) -> float:
        return self.std / math.sqrt(len(self.replicate_values))


def select_token_variant(
    cls_result: RunResult, cls_mean_result: RunResult
) -> tuple[RunResult, TokenVariant]:
    """The better of the two token variants by mean; ties go to CLS_MEAN.

    The concatenated variant never discards information, so it is the
    canonical winner when the means are equal.
    """
    if cls_result.variant != TokenVariant.CLS:
        raise ContractViolation(f"first argument must be CLS, got {cls_result.variant.name}")
    if cls_mean_result.variant != TokenVariant.CLS_MEAN:
        raise ContractViolation(
            f"second argument must be CLS_MEAN, got {cls_mean_result.variant.name}"
        )
    if (cls_result.task_id, cls_result.model_id) != (
        cls_mean_result.task_id,
        cls_mean_result.model_id,
    ):
        raise ContractViolation(
            f"task/model mismatch: ({cls_result.task_id}, {cls_result.model_id}) vs "
            f"({cls_mean_result.task_id}, {cls_mean_result.model_id})"
        )
    if cls_result.mean > cls_mean_result.mean:
        return cls_result, TokenVariant.CLS
    return cls_mean_result, TokenVariant.CLS_MEAN
