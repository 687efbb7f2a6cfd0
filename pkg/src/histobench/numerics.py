"""Dense numerics shared by every trainer.

Optimizer steps, the cosine learning-rate schedule, the stabilized softmax
cross-entropy loss, PCA, a multivariate ridge solver, Pearson correlation,
and a finite-difference gradient checker. Everything here is a pure function
over float64 arrays; embeddings arrive as float32 and are promoted once at
the call boundary so accumulations never run in single precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericError
from .validation import check_shapes_match

ADAMW_BETA1 = 0.9
ADAMW_BETA2 = 0.999
ADAMW_EPS = 1e-8
ADAMW_WEIGHT_DECAY = 0.01


@dataclass
class CosineSchedule:
    """Half-cosine decay from base_lr to final_lr over total_steps."""

    base_lr: float
    total_steps: int
    final_lr: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractViolation(f"base_lr must be > 0, got {self.base_lr}")
        if self.total_steps <= 0:
            raise ContractViolation(f"total_steps must be > 0, got {self.total_steps}")
        if self.final_lr < 0:
            raise ContractViolation(f"final_lr must be >= 0, got {self.final_lr}")


def cosine_lr(sched: CosineSchedule, step: int) -> float:
    """Learning rate at `step`; exact at both endpoints."""
    if not 0 <= step <= sched.total_steps:
        raise ContractViolation(
            f"step {step} outside [0, {sched.total_steps}]"
        )
    if step == sched.total_steps:
        return sched.final_lr
    span = sched.base_lr - sched.final_lr
    return sched.final_lr + 0.5 * span * (1.0 + math.cos(math.pi * step / sched.total_steps))


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    check_shapes_match(params, grads, "params/grads")
    return params - lr * grads


@dataclass
class AdamWState:
    """Per-parameter AdamW accumulators; mutated only by its owning trainer."""

    shape: tuple
    beta1: float = ADAMW_BETA1
    beta2: float = ADAMW_BETA2
    eps: float = ADAMW_EPS
    weight_decay: float = ADAMW_WEIGHT_DECAY
    step_count: int = 0
    first_moment: np.ndarray = field(init=False)
    second_moment: np.ndarray = field(init=False)

    def __post_init__(self):
        self.first_moment = np.zeros(self.shape, dtype=np.float64)
        self.second_moment = np.zeros(self.shape, dtype=np.float64)


def adamw_step(state: AdamWState, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """One AdamW update: decoupled weight decay, then bias-corrected Adam."""
    check_shapes_match(params, grads, "params/grads")
    if params.shape != state.shape:
        raise ContractViolation(f"state shape {state.shape} != params shape {params.shape}")
    if not np.isfinite(grads).all():
        idx = np.unravel_index(int(np.flatnonzero(~np.isfinite(grads))[0]), grads.shape)
        raise NumericError(
            f"non-finite gradient at parameter index {tuple(int(i) for i in idx)}"
        )
    state.step_count += 1
    t = state.step_count
    params = params * (1.0 - lr * state.weight_decay)
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = state.first_moment / (1.0 - state.beta1 ** t)
    v_hat = state.second_moment / (1.0 - state.beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent_grad(
    logits: np.ndarray,
    labels: np.ndarray,
    class_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted-mean cross-entropy and its gradient w.r.t. the logits.

    Loss = sum_i w_{y_i} * CE_i / sum_i w_{y_i}; the gradient for sample i is
    w_{y_i} * (softmax_i - onehot_i) / sum_i w_{y_i}. With unit weights this
    reduces to the plain batch mean.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ContractViolation(
            f"label index out of range [0, {k}): {int(labels.min())}..{int(labels.max())}"
        )
    if class_weights is None:
        class_weights = np.ones(k, dtype=np.float64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (k,):
        raise ContractViolation(f"class_weights must have length {k}")
    if (class_weights <= 0).any():
        raise ContractViolation("class_weights must be strictly positive")

    z = logits - logits.max(axis=1, keepdims=True)
    log_prob = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    sample_w = class_weights[labels]
    norm = sample_w.sum()
    loss = float(-(sample_w * log_prob[np.arange(n), labels]).sum() / norm)

    grads = np.exp(log_prob)
    grads[np.arange(n), labels] -= 1.0
    grads *= (sample_w / norm)[:, None]
    return loss, grads


def pca_fit(X: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """PCA via SVD of the column-centered matrix.

    Returns (components, mean, explained_variance) where components is k x d
    with orthonormal rows. Deterministic sign convention: the largest-magnitude
    entry of each component is positive. If the effective rank r is below k,
    rows r..k-1 are zero with zero explained variance so downstream shapes
    stay stable.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ContractViolation(f"PCA needs >= 2 rows, got {n}")
    if not 1 <= k <= min(n, d):
        raise ContractViolation(f"k={k} outside [1, min(n, d)={min(n, d)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    explained = s**2 / (n - 1)
    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int((s > tol).sum())

    components = np.zeros((k, d), dtype=np.float64)
    variance = np.zeros(k, dtype=np.float64)
    r = min(rank, k)
    components[:r] = vt[:r]
    variance[:r] = explained[:r]
    for i in range(r):
        j = int(np.abs(components[i]).argmax())
        if components[i, j] < 0:
            components[i] = -components[i]
    return components, mean, variance


def pca_project(X: np.ndarray, components: np.ndarray, mean: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - mean) @ components.T


def ridge_fit(
    X: np.ndarray,
    Y: np.ndarray,
    alpha: float,
    fit_intercept: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Multivariate ridge: solve (X'X + alpha I) W = X'Y on centered data.

    Returns (weights, intercept) with weights of shape (d, m); predictions are
    X @ weights + intercept. With fit_intercept=False the intercept is zero
    and the data is used uncentered.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if alpha < 0:
        raise ContractViolation(f"alpha must be >= 0, got {alpha}")
    if X.shape[0] != Y.shape[0]:
        raise ContractViolation(f"X rows {X.shape[0]} != Y rows {Y.shape[0]}")
    d = X.shape[1]
    if fit_intercept:
        x_mean = X.mean(axis=0)
        y_mean = Y.mean(axis=0)
        Xc, Yc = X - x_mean, Y - y_mean
    else:
        x_mean = np.zeros(d)
        y_mean = np.zeros(Y.shape[1])
        Xc, Yc = X, Y
    gram = Xc.T @ Xc + alpha * np.eye(d)
    try:
        weights = np.linalg.solve(gram, Xc.T @ Yc)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular normal equations at alpha={alpha}") from exc
    if not np.isfinite(weights).all():
        raise NumericError(f"non-finite ridge solution at alpha={alpha}")
    intercept = y_mean - x_mean @ weights
    return weights, intercept


def pearson_flagged(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """Pearson r and a degeneracy flag; (0.0, True) when either variance is 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractViolation(f"pearson needs equal-length vectors, got {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ContractViolation("pearson needs length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        return 0.0, True
    return float(xc @ yc) / (sx * sy), False


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    return pearson_flagged(x, y)[0]


def grad_check(f, params: np.ndarray, step: float = 1e-4) -> float:
    """Max relative error between f's analytic gradient and central differences.

    `f(params) -> (loss, grad)`. The perturbation for entry i is
    step * max(1, |params_i|) so the relative step stays stable across scales.
    """
    params = np.asarray(params, dtype=np.float64)
    _, analytic = f(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    check_shapes_match(params, analytic, "params/grad")
    flat = params.ravel()
    if flat.size == 0:
        return 0.0
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        h = step * max(1.0, abs(flat[i]))
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        f_plus, _ = f(plus.reshape(params.shape))
        f_minus, _ = f(minus.reshape(params.shape))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"non-finite objective at perturbed index {i}")
        numeric[i] = (f_plus - f_minus) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(numeric), np.abs(analytic.ravel())))
    return float(np.max(np.abs(numeric - analytic.ravel()) / denom))
