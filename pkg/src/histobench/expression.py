"""Gene-expression regression protocol.

Each patient fold fits PCA on the training spots only, projects both sides,
fits a multivariate ridge on the projected factors, and scores the held-out
patient with per-gene Pearson correlation. Fold means are aggregated into a
task mean and standard deviation across folds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .embeddings import GENE_COLUMNS, BoundDataset
from .errors import ConfigurationError, ContractViolation
from .metrics import aggregate_replicates
from .numerics import pca_fit, pca_project, pearson_flagged, ridge_fit
from .splits import patient_kfold

N_GENES = len(GENE_COLUMNS)


@dataclass(frozen=True)
class RegressionTask:
    """Configuration for one organ's expression task."""

    task_id: str
    genes: tuple = tuple(GENE_COLUMNS)
    ridge_alpha: float = 1.0
    pca_factors: int = 256
    fit_intercept: bool = True
    whiten: bool = True

    def __post_init__(self):
        if len(self.genes) != N_GENES:
            raise ContractViolation(
                f"{self.task_id}: expected {N_GENES} gene names, got {len(self.genes)}"
            )
        if len(set(self.genes)) != len(self.genes):
            raise ContractViolation(f"{self.task_id}: duplicate gene names")
        if self.ridge_alpha < 0:
            raise ContractViolation(f"ridge_alpha must be >= 0, got {self.ridge_alpha}")
        if self.pca_factors < 1:
            raise ContractViolation(f"pca_factors must be >= 1, got {self.pca_factors}")


class PCARidgeRegressor(BaseEstimator, RegressorMixin):
    """Ridge regression on PCA factors of the input embeddings.

    The factor count is clamped to min(pca_factors, n_rows, n_cols); rank
    deficiency beyond that is absorbed by the PCA zero-padding policy. With
    whiten=True each factor is scaled to unit variance before the ridge,
    so ridge_alpha penalizes every retained direction equally.
    """

    def __init__(
        self,
        pca_factors: int = 256,
        ridge_alpha: float = 1.0,
        fit_intercept: bool = True,
        whiten: bool = True,
    ):
        self.pca_factors = pca_factors
        self.ridge_alpha = ridge_alpha
        self.fit_intercept = fit_intercept
        self.whiten = whiten

    def _factors(self, X: np.ndarray) -> np.ndarray:
        projected = pca_project(X, self.components_, self.mean_)
        return projected / self.factor_scale_

    def fit(self, X: np.ndarray, Y: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2:
            raise ContractViolation("X and Y must be 2-D")
        if X.shape[0] != Y.shape[0]:
            raise ContractViolation(f"X rows {X.shape[0]} != Y rows {Y.shape[0]}")
        if not np.isfinite(X).all() or not np.isfinite(Y).all():
            raise ContractViolation("X and Y must be finite")
        if self.pca_factors < 1:
            raise ContractViolation(f"pca_factors must be >= 1, got {self.pca_factors}")

        k = min(self.pca_factors, X.shape[0], X.shape[1])
        components, mean, variance = pca_fit(X, k)
        self.components_ = components
        self.mean_ = mean
        self.explained_variance_ = variance
        if self.whiten:
            scale = np.sqrt(variance)
            # zero-variance (padded) factors project to zero; avoid 0/0
            scale[scale == 0.0] = 1.0
        else:
            scale = np.ones(k)
        self.factor_scale_ = scale
        self.n_factors_ = k
        self.weights_, self.intercept_ = ridge_fit(
            self._factors(X), Y, self.ridge_alpha, self.fit_intercept
        )
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.components_.shape[1]:
            raise ContractViolation(
                f"expected (n, {self.components_.shape[1]}) input, got {X.shape}"
            )
        return self._factors(X) @ self.weights_ + self.intercept_


@dataclass
class FoldScore:
    """Per-gene Pearson scores for one held-out patient.

    Genes whose measured test column is constant are recorded with the 0.0
    sentinel and listed in `excluded`; mean_r averages the remaining genes.
    """

    fold_id: int
    per_gene_r: np.ndarray
    excluded: tuple
    mean_r: float

    def __post_init__(self):
        self.per_gene_r = np.asarray(self.per_gene_r, dtype=np.float64)
        if np.abs(self.per_gene_r).max(initial=0.0) > 1.0 + 1e-12:
            raise ContractViolation("per-gene r outside [-1, 1]")


def run_hest_fold(
    X_train: np.ndarray,
    Y_train: np.ndarray,
    X_test: np.ndarray,
    Y_test: np.ndarray,
    cfg: RegressionTask,
    fold_id: int = 0,
) -> FoldScore:
    """Fit the fold's regressor on train spots and score the test spots.

    PCA and ridge see training data only. A constant measured gene in the
    test fold is excluded from mean_r (sentinel 0.0 in per_gene_r); a
    constant prediction against a varying measurement counts as 0.0.
    """
    Y_test = np.asarray(Y_test, dtype=np.float64)
    if Y_test.ndim != 2 or Y_test.shape[1] != len(cfg.genes):
        raise ContractViolation(
            f"fold {fold_id}: expected (n, {len(cfg.genes)}) test targets, got {Y_test.shape}"
        )
    if Y_test.shape[0] < 2:
        raise ConfigurationError(
            f"fold {fold_id}: Pearson undefined on {Y_test.shape[0]} test spot(s)"
        )
    model = PCARidgeRegressor(
        pca_factors=cfg.pca_factors,
        ridge_alpha=cfg.ridge_alpha,
        fit_intercept=cfg.fit_intercept,
        whiten=cfg.whiten,
    ).fit(X_train, Y_train)
    predictions = model.predict(X_test)

    per_gene = np.zeros(len(cfg.genes))
    excluded = []
    kept = []
    for g, gene in enumerate(cfg.genes):
        measured = Y_test[:, g]
        if np.ptp(measured) == 0.0:
            excluded.append(gene)
            continue
        r, degenerate = pearson_flagged(predictions[:, g], measured)
        per_gene[g] = 0.0 if degenerate else r
        kept.append(per_gene[g])
    if not kept:
        raise ConfigurationError(f"fold {fold_id}: every measured gene is constant")
    return FoldScore(fold_id, per_gene, tuple(excluded), float(np.mean(kept)))


@dataclass
class HestTaskResult:
    task_id: str
    fold_scores: list
    mean: float
    std: float
    warnings: list = field(default_factory=list)


def run_hest_task(bound: BoundDataset, cfg: RegressionTask) -> HestTaskResult:
    """Leave-one-patient-out evaluation over every fold of the dataset.

    Folds with fewer than 2 test spots, or with every measured gene constant,
    are skipped with a warning. mean/std aggregate fold-level mean_r values.
    """
    if bound.task_kind != "multivariate-regression":
        raise ConfigurationError(
            f"{cfg.task_id}: expected multivariate-regression data, got {bound.task_kind}"
        )
    plan = patient_kfold(bound)
    scores: list[FoldScore] = []
    warnings: list[str] = []
    for fold_id, fold in enumerate(plan.folds):
        if len(fold.test_ids) < 2:
            warnings.append(
                f"fold {fold_id}: skipped, {len(fold.test_ids)} test spot(s), need >= 2"
            )
            continue
        try:
            score = run_hest_fold(
                bound.rows(fold.train_ids),
                bound.target_matrix(fold.train_ids),
                bound.rows(fold.test_ids),
                bound.target_matrix(fold.test_ids),
                cfg,
                fold_id=fold_id,
            )
        except ConfigurationError as exc:
            warnings.append(f"fold {fold_id}: skipped, {exc}")
            continue
        if score.excluded:
            warnings.append(
                f"fold {fold_id}: {len(score.excluded)} constant gene(s) excluded"
            )
        scores.append(score)
    if not scores:
        raise ConfigurationError(f"{cfg.task_id}: every fold was skipped")
    mean, std = aggregate_replicates([s.mean_r for s in scores])
    return HestTaskResult(cfg.task_id, scores, mean, std, warnings)


def export_fold_csv(result: HestTaskResult, cfg: RegressionTask, path) -> None:
    """Write fold_id,gene,r rows plus a final task summary row."""
    lines = ["fold_id,gene,r"]
    for score in result.fold_scores:
        for gene, r in zip(cfg.genes, score.per_gene_r):
            lines.append(f"{score.fold_id},{gene},{float(r)!r}")
    lines.append(f"summary,mean_r,{float(result.mean)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
