"""Patch-level classification protocols over frozen embeddings.

Two trainers share the ProbeModel shape (a single linear layer):

* LinearProbeClassifier: plain SGD with a cosine schedule, fixed iteration
  budget, per-epoch reshuffling, seeded initialization, and an optional
  best-validation checkpoint policy.
* GridSearchLogisticRegression: L2 logistic regression with balanced class
  weights, a 15-point log grid searched by stratified cross-validation, and
  a deterministic quasi-Newton inner fit.

Both are deterministic functions of (data, config, SeedBundle).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import ConfigurationError, ContractViolation, FormatError, NumericError
from .metrics import balanced_accuracy
from .numerics import CosineSchedule, cosine_lr, softmax, softmax_xent_grad
from .splits import SeedBundle, rng_from_seed
from .validation import check_labels, check_matrix

PPRB_MAGIC = b"PPRB"
PPRB_VERSION = 1
_PPRB_HEADER = struct.Struct("<4sIII")

DEFAULT_GRID = tuple(10.0 ** (-8 + 12 * k / 14) for k in range(15))


@dataclass
class ProbeModel:
    """A single linear layer: logits = X @ weights.T + bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ContractViolation(f"weights must be 2-D, got ndim={self.weights.ndim}")
        k = self.weights.shape[0]
        if k < 2:
            raise ContractViolation(f"probe needs >= 2 classes, got {k}")
        if self.bias.shape != (k,):
            raise ContractViolation(f"bias shape {self.bias.shape} != ({k},)")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ContractViolation("non-finite probe parameters")

    @property
    def n_classes(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])


def probe_predict(model: ProbeModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class indices (argmax, ties to the lowest index) and probabilities."""
    X = check_matrix(X, "X")
    if X.shape[1] != model.dim:
        raise ContractViolation(f"dim mismatch: rows have {X.shape[1]}, model has {model.dim}")
    logits = X @ model.weights.T + model.bias
    return np.argmax(logits, axis=1), softmax(logits)


def save_probe(model: ProbeModel, path: str | Path) -> None:
    """Binary container (same family as the embedding format, float64 payload)."""
    with open(Path(path), "wb") as fh:
        fh.write(_PPRB_HEADER.pack(PPRB_MAGIC, PPRB_VERSION, model.n_classes, model.dim))
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.bias, dtype="<f8").tobytes())


def load_probe(path: str | Path) -> ProbeModel:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _PPRB_HEADER.size:
        raise FormatError(f"{path}: shorter than header")
    magic, version, k, dim = _PPRB_HEADER.unpack_from(blob, 0)
    if magic != PPRB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PPRB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    need = _PPRB_HEADER.size + (k * dim + k) * 8
    if len(blob) != need:
        raise FormatError(f"{path}: payload is {len(blob)} bytes, expected {need}")
    weights = np.frombuffer(blob, dtype="<f8", count=k * dim, offset=_PPRB_HEADER.size)
    bias = np.frombuffer(blob, dtype="<f8", count=k, offset=_PPRB_HEADER.size + k * dim * 8)
    try:
        return ProbeModel(weights.reshape(k, dim).copy(), bias.copy())
    except ContractViolation as exc:
        raise FormatError(f"{path}: {exc}") from exc


def balanced_class_weights(labels: np.ndarray) -> np.ndarray:
    """w_c = N / (K * n_c) for contiguous class indices 0..K-1."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractViolation("balanced weights of empty labels")
    k = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=k)
    if (counts == 0).any():
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ContractViolation(f"class {missing} absent from labels")
    return labels.size / (k * counts.astype(np.float64))


def stratified_kfold(labels: np.ndarray, k: int, rng: np.random.Generator):
    """Round-robin per-class deal into k folds; every class in every fold.

    Returns a list of index arrays (the folds). Requires n_c >= k for each
    class; callers shrink k first when a class is too small.
    """
    labels = np.asarray(labels)
    folds = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise ContractViolation(f"class {int(c)} has {idx.size} items < {k} folds")
        idx = idx[rng.permutation(idx.size)]
        for pos, item in enumerate(idx):
            folds[pos % k].append(int(item))
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def _weighted_ce_sum(flat, X, y, k, class_weights, inv_c):
    """Objective sum_i w_{y_i} CE_i + (1/(2C)) ||W||^2 and its gradient.

    The bias (last k entries of flat) is never penalized.
    """
    d = X.shape[1]
    W = flat[: k * d].reshape(k, d)
    b = flat[k * d :]
    logits = X @ W.T + b
    z = logits - logits.max(axis=1, keepdims=True)
    log_prob = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    sample_w = class_weights[y]
    loss = float(-(sample_w * log_prob[np.arange(X.shape[0]), y]).sum())
    g_logits = np.exp(log_prob)
    g_logits[np.arange(X.shape[0]), y] -= 1.0
    g_logits *= sample_w[:, None]
    g_w = g_logits.T @ X
    g_b = g_logits.sum(axis=0)
    loss += 0.5 * inv_c * float((W * W).sum())
    g_w += inv_c * W
    return loss, np.concatenate([g_w.ravel(), g_b])


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    penalty: float,
    class_weights: np.ndarray | None = None,
    tol: float = 1e-6,
    max_iter: int = 1000,
) -> ProbeModel:
    """One L2 logistic regression fit at a fixed grid value.

    The grid value plays the inverse-regularization role: objective =
    sum_i w_{y_i} CE_i + (1/(2*penalty)) ||W||^2, bias unpenalized. Solved
    with L-BFGS-B from a zero start, so the result is deterministic.
    """
    X = check_matrix(X, "X")
    k = int(y.max()) + 1
    if k < 2:
        raise ConfigurationError("logistic regression needs >= 2 classes")
    y = check_labels(y, k, "y")
    if penalty <= 0:
        raise ContractViolation(f"penalty must be > 0, got {penalty}")
    if class_weights is None:
        class_weights = np.ones(k, dtype=np.float64)
    d = X.shape[1]
    x0 = np.zeros(k * d + k, dtype=np.float64)
    result = minimize(
        _weighted_ce_sum,
        x0,
        args=(X, y, k, class_weights, 1.0 / penalty),
        method="L-BFGS-B",
        jac=True,
        tol=None,
        options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-12},
    )
    if not np.isfinite(result.x).all():
        raise NumericError(f"non-finite logistic solution at penalty={penalty}")
    return ProbeModel(result.x[: k * d].reshape(k, d), result.x[k * d :])


class LinearProbeClassifier(BaseEstimator, ClassifierMixin):
    """SGD linear probe with a cosine schedule and a fixed step budget.

    Initialization is uniform in [-1/sqrt(dim), +1/sqrt(dim)] from the
    bundle's init seed; epoch order comes from the shuffle seed. When
    validation data is passed to fit and checkpoint_policy is "best-val",
    the checkpoint with the highest validation balanced accuracy wins,
    ties going to the later checkpoint; otherwise the final iterate is kept.
    """

    def __init__(
        self,
        batch_size: int = 256,
        total_iters: int = 12500,
        base_lr: float = 3e-4,
        final_lr: float = 0.0,
        eval_every: int = 625,
        checkpoint_policy: str = "best-val",
        seeds: SeedBundle | None = None,
    ):
        self.batch_size = batch_size
        self.total_iters = total_iters
        self.base_lr = base_lr
        self.final_lr = final_lr
        self.eval_every = eval_every
        self.checkpoint_policy = checkpoint_policy
        self.seeds = seeds

    def _validate_config(self):
        if self.batch_size <= 0 or self.total_iters <= 0 or self.eval_every <= 0:
            raise ContractViolation("batch_size, total_iters, eval_every must be > 0")
        if self.total_iters % self.eval_every != 0:
            raise ContractViolation(
                f"eval_every {self.eval_every} must divide total_iters {self.total_iters}"
            )
        if self.checkpoint_policy not in ("best-val", "final"):
            raise ContractViolation(f"unknown checkpoint_policy {self.checkpoint_policy!r}")

    def fit(self, X, y, X_val=None, y_val=None):
        self._validate_config()
        X = check_matrix(X, "X")
        y = np.asarray(y)
        classes = np.unique(y)
        if classes.size < 2:
            raise ConfigurationError(f"training set has {classes.size} class(es), need >= 2")
        k = int(y.max()) + 1
        y = check_labels(y, k, "y")
        use_val = (
            X_val is not None and y_val is not None and self.checkpoint_policy == "best-val"
        )
        if use_val:
            X_val = check_matrix(X_val, "X_val")
            y_val = check_labels(np.asarray(y_val), k, "y_val")

        seeds = self.seeds if self.seeds is not None else SeedBundle(0, 0, 0, 0)
        n, d = X.shape
        init_rng = rng_from_seed(seeds.init_seed)
        shuffle_rng = rng_from_seed(seeds.shuffle_seed)
        bound = 1.0 / np.sqrt(d)
        W = init_rng.uniform(-bound, bound, size=(k, d))
        b = np.zeros(k, dtype=np.float64)
        sched = CosineSchedule(self.base_lr, self.total_iters, self.final_lr)

        best = None  # (score, step, W, b)
        history = np.empty(self.total_iters, dtype=np.float64)
        order = shuffle_rng.permutation(n)
        cursor = 0
        for step in range(self.total_iters):
            if cursor >= n:
                order = shuffle_rng.permutation(n)
                cursor = 0
            batch = order[cursor : cursor + self.batch_size]
            cursor += self.batch_size
            Xb, yb = X[batch], y[batch]
            logits = Xb @ W.T + b
            loss, g_logits = softmax_xent_grad(logits, yb)
            history[step] = loss
            lr = cosine_lr(sched, step)
            W = W - lr * (g_logits.T @ Xb)
            b = b - lr * g_logits.sum(axis=0)
            if use_val and (step + 1) % self.eval_every == 0:
                preds = np.argmax(X_val @ W.T + b, axis=1)
                score = balanced_accuracy(preds, y_val)
                if best is None or score >= best[0]:
                    best = (score, step + 1, W.copy(), b.copy())

        if use_val and best is not None:
            self.best_checkpoint_iter_ = best[1]
            self.best_val_score_ = best[0]
            W, b = best[2], best[3]
        else:
            self.best_checkpoint_iter_ = self.total_iters
            self.best_val_score_ = None
        self.model_ = ProbeModel(W, b)
        self.weights_ = self.model_.weights
        self.bias_ = self.model_.bias
        self.classes_ = np.arange(k)
        self.loss_history_ = history
        return self

    def predict(self, X):
        labels, _ = probe_predict(self.model_, X)
        return labels

    def predict_proba(self, X):
        _, probs = probe_predict(self.model_, X)
        return probs


class GridSearchLogisticRegression(BaseEstimator, ClassifierMixin):
    """Cross-validated L2 logistic regression with balanced class weights.

    Each grid value is scored by stratified k-fold cross-validation; the
    best mean score wins, ties going to the smallest grid value (the most
    regularized model). The winner is refit on the full training set.
    Class weights are recomputed on each fitted portion.
    """

    def __init__(
        self,
        grid: tuple = DEFAULT_GRID,
        cv_folds: int = 5,
        tol: float = 1e-6,
        max_iter: int = 1000,
        cv_metric: str = "balanced-accuracy",
        seeds: SeedBundle | None = None,
    ):
        self.grid = grid
        self.cv_folds = cv_folds
        self.tol = tol
        self.max_iter = max_iter
        self.cv_metric = cv_metric
        self.seeds = seeds

    def _validate_config(self):
        grid = tuple(self.grid)
        if len(grid) != 15:
            raise ContractViolation(f"grid must hold 15 values, got {len(grid)}")
        if any(v <= 0 for v in grid):
            raise ContractViolation("grid values must be strictly positive")
        if list(grid) != sorted(grid):
            raise ContractViolation("grid must be sorted ascending")
        if self.cv_folds < 2:
            raise ContractViolation(f"cv_folds must be >= 2, got {self.cv_folds}")
        if self.cv_metric not in ("balanced-accuracy", "accuracy"):
            raise ContractViolation(f"unknown cv_metric {self.cv_metric!r}")
        return grid

    def _score(self, predictions, labels):
        if self.cv_metric == "balanced-accuracy":
            return balanced_accuracy(predictions, labels)
        return float((predictions == labels).mean())

    def fit(self, X, y):
        grid = self._validate_config()
        X = check_matrix(X, "X")
        y = np.asarray(y)
        if np.unique(y).size < 2:
            raise ConfigurationError("logistic regression needs >= 2 classes")
        k = int(y.max()) + 1
        y = check_labels(y, k, "y")

        seeds = self.seeds if self.seeds is not None else SeedBundle(0, 0, 0, 0)
        rng = rng_from_seed(seeds.split_seed)
        counts = np.bincount(y, minlength=k)
        self.fold_warnings_ = []
        n_folds = self.cv_folds
        min_count = int(counts.min())
        if min_count < n_folds:
            if min_count < 2:
                raise ConfigurationError(
                    f"smallest class has {min_count} item(s); stratified CV impossible"
                )
            n_folds = min_count
            self.fold_warnings_.append(
                f"cv folds reduced {self.cv_folds} -> {n_folds}: smallest class has "
                f"{min_count} items"
            )
        folds = stratified_kfold(y, n_folds, rng)

        cv_scores = []
        for penalty in grid:
            scores = []
            for held in range(n_folds):
                test_idx = folds[held]
                train_idx = np.concatenate([folds[i] for i in range(n_folds) if i != held])
                weights = balanced_class_weights(y[train_idx])
                model = fit_logistic(
                    X[train_idx], y[train_idx], penalty,
                    class_weights=weights, tol=self.tol, max_iter=self.max_iter,
                )
                predictions, _ = probe_predict(model, X[test_idx])
                scores.append(self._score(predictions, y[test_idx]))
            cv_scores.append(float(np.mean(scores)))

        best_idx = 0
        for i in range(1, len(grid)):
            if cv_scores[i] > cv_scores[best_idx]:
                best_idx = i
        self.cv_table_ = list(zip(grid, cv_scores))
        self.chosen_penalty_ = grid[best_idx]
        self.n_folds_used_ = n_folds

        final_weights = balanced_class_weights(y)
        self.model_ = fit_logistic(
            X, y, self.chosen_penalty_,
            class_weights=final_weights, tol=self.tol, max_iter=self.max_iter,
        )
        self.weights_ = self.model_.weights
        self.bias_ = self.model_.bias
        self.classes_ = np.arange(k)
        return self

    def predict(self, X):
        labels, _ = probe_predict(self.model_, X)
        return labels

    def predict_proba(self, X):
        _, probs = probe_predict(self.model_, X)
        return probs
