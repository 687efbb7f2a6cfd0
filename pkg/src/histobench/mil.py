"""Slide-level protocol: bag construction and the attention-based MIL head.

A bag is one slide's sampled patch embeddings. The head scores instances
with a ReLU attention branch (s_i = w . relu(V x_i)), softmaxes the scores,
pools the raw instances with the attention weights, and classifies the
pooled vector with a linear layer. Training is AdamW with a cosine schedule
over a fixed step budget; batches are padded to the longest bag and masked,
so every gradient is a deterministic dense computation.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .embeddings import BoundDataset
from .errors import ConfigurationError, ContractViolation, FormatError
from .metrics import balanced_accuracy
from .numerics import (
    AdamWState,
    CosineSchedule,
    adamw_step,
    cosine_lr,
    softmax,
)
from .splits import SeedBundle, rng_from_seed

PMIL_MAGIC = b"PMIL"
PMIL_VERSION = 1
_PMIL_HEADER = struct.Struct("<4sIIII")


@dataclass
class Bag:
    """One slide's instances, capped by sampling without replacement."""

    slide_id: str
    instances: np.ndarray
    label: int
    sampled_from: int

    def __post_init__(self):
        self.instances = np.asarray(self.instances)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ContractViolation(
                f"bag {self.slide_id!r} needs a non-empty 2-D instance matrix"
            )
        if self.instances.shape[0] > self.sampled_from:
            raise ContractViolation(
                f"bag {self.slide_id!r} holds more instances than it was sampled from"
            )

    @property
    def n_instances(self) -> int:
        return int(self.instances.shape[0])


def build_bags(bound: BoundDataset, cap: int, seed: int) -> list[Bag]:
    """One bag per slide, instances sampled without replacement down to cap.

    Slides are processed in sorted id order so the result is independent of
    manifest row order; sampling consumes one Philox stream in that order.
    """
    if cap <= 0:
        raise ContractViolation(f"cap must be > 0, got {cap}")
    if bound.labels is None:
        raise ContractViolation("bag construction needs class labels")
    rows_of: dict[str, list[int]] = {}
    label_of: dict[str, int] = {}
    for i, (item, slide) in enumerate(zip(bound.item_ids, bound.slide_ids)):
        if not slide:
            raise ContractViolation(f"item {item!r} has empty slide_id")
        label = int(bound.labels[i])
        if slide in label_of and label_of[slide] != label:
            raise ContractViolation(
                f"slide {slide!r} carries conflicting labels "
                f"{label_of[slide]} and {label}"
            )
        label_of[slide] = label
        rows_of.setdefault(slide, []).append(i)

    rng = rng_from_seed(seed)
    bags = []
    for slide in sorted(rows_of):
        rows = rows_of[slide]
        if len(rows) > cap:
            chosen = rng.choice(len(rows), size=cap, replace=False)
            rows = [rows[int(i)] for i in np.sort(chosen)]
        bags.append(
            Bag(
                slide_id=slide,
                instances=bound.X[rows],
                label=label_of[slide],
                sampled_from=len(rows_of[slide]),
            )
        )
    return bags


@dataclass
class ABMILHead:
    """Attention branch (V, w) plus linear classifier over the pooled vector."""

    V: np.ndarray
    w: np.ndarray
    classifier: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        self.classifier = np.asarray(self.classifier, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        h, d = self.V.shape
        if h < 1:
            raise ContractViolation("hidden dim must be >= 1")
        if self.w.shape != (h,):
            raise ContractViolation(f"w shape {self.w.shape} != ({h},)")
        k = self.classifier.shape[0]
        if self.classifier.shape != (k, d):
            raise ContractViolation(
                f"classifier shape {self.classifier.shape} incompatible with dim {d}"
            )
        if self.bias.shape != (k,):
            raise ContractViolation(f"bias shape {self.bias.shape} != ({k},)")
        for name, arr in (("V", self.V), ("w", self.w),
                          ("classifier", self.classifier), ("bias", self.bias)):
            if not np.isfinite(arr).all():
                raise ContractViolation(f"non-finite values in {name}")

    @property
    def dim(self) -> int:
        return int(self.V.shape[1])

    @property
    def hidden_dim(self) -> int:
        return int(self.V.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.classifier.shape[0])


def abmil_forward(head: ABMILHead, bag: Bag) -> tuple[np.ndarray, np.ndarray]:
    """Logits and the attention vector for one bag."""
    X = np.asarray(bag.instances, dtype=np.float64)
    if X.shape[1] != head.dim:
        raise ContractViolation(f"bag dim {X.shape[1]} != head dim {head.dim}")
    scores = np.maximum(X @ head.V.T, 0.0) @ head.w
    attention = softmax(scores[None, :])[0]
    pooled = attention @ X
    logits = head.classifier @ pooled + head.bias
    return logits, attention


def evaluate_slides(head: ABMILHead, bags: list[Bag]) -> np.ndarray:
    """Argmax prediction per bag; ties go to the lowest class index."""
    predictions = np.empty(len(bags), dtype=np.int64)
    for i, bag in enumerate(bags):
        logits, _ = abmil_forward(head, bag)
        predictions[i] = int(np.argmax(logits))
    return predictions


def export_attention_csv(head: ABMILHead, bags: list[Bag], path: str | Path) -> None:
    """Per-instance attention weights for inspection."""
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "instance_index", "attention"])
        for bag in bags:
            _, attention = abmil_forward(head, bag)
            for i, a in enumerate(attention):
                writer.writerow([bag.slide_id, i, repr(float(a))])


def save_mil_head(head: ABMILHead, path: str | Path) -> None:
    with open(Path(path), "wb") as fh:
        fh.write(
            _PMIL_HEADER.pack(
                PMIL_MAGIC, PMIL_VERSION, head.dim, head.hidden_dim, head.n_classes
            )
        )
        for arr in (head.V, head.w, head.classifier, head.bias):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_mil_head(path: str | Path) -> ABMILHead:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _PMIL_HEADER.size:
        raise FormatError(f"{path}: shorter than header")
    magic, version, d, h, k = _PMIL_HEADER.unpack_from(blob, 0)
    if magic != PMIL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PMIL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    counts = (h * d, h, k * d, k)
    need = _PMIL_HEADER.size + sum(counts) * 8
    if len(blob) != need:
        raise FormatError(f"{path}: payload is {len(blob)} bytes, expected {need}")
    offset = _PMIL_HEADER.size
    parts = []
    for count in counts:
        parts.append(np.frombuffer(blob, dtype="<f8", count=count, offset=offset).copy())
        offset += count * 8
    try:
        return ABMILHead(
            parts[0].reshape(h, d), parts[1], parts[2].reshape(k, d), parts[3]
        )
    except ContractViolation as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _pad_batch(bags: list[Bag]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack bags into (B, n_max, d) with a validity mask and labels."""
    n_max = max(bag.n_instances for bag in bags)
    d = bags[0].instances.shape[1]
    X = np.zeros((len(bags), n_max, d), dtype=np.float64)
    mask = np.zeros((len(bags), n_max), dtype=bool)
    labels = np.empty(len(bags), dtype=np.int64)
    for i, bag in enumerate(bags):
        n = bag.n_instances
        X[i, :n] = bag.instances
        mask[i, :n] = True
        labels[i] = bag.label
    return X, mask, labels


def _batch_loss_and_grads(head, X, mask, labels):
    """Mean cross-entropy over the batch and gradients for all four tensors.

    Forward per bag b: H = relu(X V^T); s = H w (masked); a = softmax(s);
    z = a X; logits = C z + bias. Padded positions carry zero attention so
    they contribute nothing to any gradient. relu'(0) is taken as 0.
    """
    B = X.shape[0]
    pre = np.einsum("bnd,hd->bnh", X, head.V)
    H = np.maximum(pre, 0.0)
    scores = H @ head.w
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    expo = np.exp(scores)
    attention = expo / expo.sum(axis=1, keepdims=True)
    z = np.einsum("bn,bnd->bd", attention, X)
    logits = z @ head.classifier.T + head.bias

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_prob = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_prob[np.arange(B), labels].mean())

    d_logits = np.exp(log_prob)
    d_logits[np.arange(B), labels] -= 1.0
    d_logits /= B
    g_classifier = d_logits.T @ z
    g_bias = d_logits.sum(axis=0)
    dz = d_logits @ head.classifier
    d_attention = np.einsum("bd,bnd->bn", dz, X)
    inner = (attention * d_attention).sum(axis=1, keepdims=True)
    d_scores = attention * (d_attention - inner)
    g_w = np.einsum("bn,bnh->h", d_scores, H)
    d_H = d_scores[:, :, None] * head.w
    d_pre = d_H * (pre > 0.0)
    g_V = np.einsum("bnh,bnd->hd", d_pre, X)
    return loss, g_V, g_w, g_classifier, g_bias


class ABMILClassifier(BaseEstimator, ClassifierMixin):
    """AdamW-trained attention MIL head over bags of frozen embeddings.

    Initialization draws V and the classifier uniformly in
    [-1/sqrt(dim), +1/sqrt(dim)] and w in [-1/sqrt(hidden_dim),
    +1/sqrt(hidden_dim)] from the bundle's init seed; biases start at zero.
    Epoch order over slides comes from the shuffle seed. Checkpointing
    follows the probe policy: best validation balanced accuracy when
    val bags are given (ties to the later checkpoint), final iterate
    otherwise.
    """

    def __init__(
        self,
        batch_slides: int = 32,
        total_iters: int = 12500,
        base_lr: float = 1e-3,
        final_lr: float = 0.0,
        hidden_dim: int = 128,
        weight_decay: float = 0.01,
        eval_every: int = 625,
        checkpoint_policy: str = "best-val",
        seeds: SeedBundle | None = None,
    ):
        self.batch_slides = batch_slides
        self.total_iters = total_iters
        self.base_lr = base_lr
        self.final_lr = final_lr
        self.hidden_dim = hidden_dim
        self.weight_decay = weight_decay
        self.eval_every = eval_every
        self.checkpoint_policy = checkpoint_policy
        self.seeds = seeds

    def _validate_config(self):
        if min(self.batch_slides, self.total_iters, self.hidden_dim, self.eval_every) <= 0:
            raise ContractViolation(
                "batch_slides, total_iters, hidden_dim, eval_every must be > 0"
            )
        if self.total_iters % self.eval_every != 0:
            raise ContractViolation(
                f"eval_every {self.eval_every} must divide total_iters {self.total_iters}"
            )
        if self.checkpoint_policy not in ("best-val", "final"):
            raise ContractViolation(f"unknown checkpoint_policy {self.checkpoint_policy!r}")

    def fit(self, bags: list[Bag], val_bags: list[Bag] | None = None):
        self._validate_config()
        if not bags:
            raise ConfigurationError("no bags to train on")
        labels_all = np.array([bag.label for bag in bags])
        classes = np.unique(labels_all)
        if classes.size < 2:
            raise ConfigurationError(f"bags span {classes.size} class(es), need >= 2")
        k = int(labels_all.max()) + 1
        d = bags[0].instances.shape[1]
        for bag in bags:
            if bag.instances.shape[1] != d:
                raise ContractViolation(f"bag {bag.slide_id!r} dim {bag.instances.shape[1]} != {d}")

        seeds = self.seeds if self.seeds is not None else SeedBundle(0, 0, 0, 0)
        init_rng = rng_from_seed(seeds.init_seed)
        shuffle_rng = rng_from_seed(seeds.shuffle_seed)
        h = self.hidden_dim
        head = ABMILHead(
            V=init_rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=(h, d)),
            w=init_rng.uniform(-1 / np.sqrt(h), 1 / np.sqrt(h), size=h),
            classifier=init_rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=(k, d)),
            bias=np.zeros(k),
        )
        states = {
            name: AdamWState(shape=getattr(head, name).shape, weight_decay=self.weight_decay)
            for name in ("V", "w", "classifier", "bias")
        }
        sched = CosineSchedule(self.base_lr, self.total_iters, self.final_lr)
        use_val = val_bags is not None and self.checkpoint_policy == "best-val"
        val_labels = np.array([bag.label for bag in val_bags]) if use_val else None

        history = np.empty(self.total_iters, dtype=np.float64)
        best = None
        order = shuffle_rng.permutation(len(bags))
        cursor = 0
        for step in range(self.total_iters):
            if cursor >= len(bags):
                order = shuffle_rng.permutation(len(bags))
                cursor = 0
            batch_idx = order[cursor : cursor + self.batch_slides]
            cursor += self.batch_slides
            X, mask, yb = _pad_batch([bags[int(i)] for i in batch_idx])
            loss, g_V, g_w, g_c, g_b = _batch_loss_and_grads(head, X, mask, yb)
            history[step] = loss
            lr = cosine_lr(sched, step)
            head = ABMILHead(
                V=adamw_step(states["V"], head.V, g_V, lr),
                w=adamw_step(states["w"], head.w, g_w, lr),
                classifier=adamw_step(states["classifier"], head.classifier, g_c, lr),
                bias=adamw_step(states["bias"], head.bias, g_b, lr),
            )
            if use_val and (step + 1) % self.eval_every == 0:
                score = balanced_accuracy(evaluate_slides(head, val_bags), val_labels)
                if best is None or score >= best[0]:
                    best = (score, step + 1, head)

        if use_val and best is not None:
            self.best_val_score_, self.best_checkpoint_iter_, head = best
        else:
            self.best_val_score_ = None
            self.best_checkpoint_iter_ = self.total_iters
        self.head_ = head
        self.classes_ = np.arange(k)
        self.loss_history_ = history
        return self

    def predict(self, bags: list[Bag]):
        return evaluate_slides(self.head_, bags)
