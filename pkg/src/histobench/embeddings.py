"""On-disk embedding format, dataset manifests, and the id join between them.

Embeddings travel as PEMB files: a little-endian binary layout carrying one
float32 matrix plus the item ids for its rows. Labels never live in the
embedding file; they arrive through a CSV manifest and are bound to rows by
item_id. All loaded objects are immutable by convention and safe to share
across concurrent task runs.
"""

from __future__ import annotations

import csv
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FormatError, JoinError

PEMB_MAGIC = b"PEMB"
PEMB_VERSION = 1
# magic(4) + version u32 + dim u32 + row_count u64 + variant u8 + 7 reserved
_HEADER = struct.Struct("<4sIIQB7x")

GENE_TARGET_COUNT = 50
GENE_COLUMNS = [f"g{i:03d}" for i in range(GENE_TARGET_COUNT)]
CLASSIFICATION_HEADER = ["item_id", "label", "patient_id", "slide_id", "split", "fold_id"]
REGRESSION_HEADER = ["item_id", "patient_id", "slide_id", "fold_id"] + GENE_COLUMNS

TASK_KINDS = ("patch-classification", "slide-classification", "multivariate-regression")
SPLIT_TAGS = ("train", "val", "test", "none")


class TokenVariant(enum.IntEnum):
    """Which token summary a matrix holds; wire values match the file format."""

    CLS = 0
    CLS_MEAN = 1


@dataclass
class EmbeddingMatrix:
    """A validated (items x dim) float32 matrix with one id per row."""

    model_id: str
    dataset_id: str
    variant: TokenVariant
    items: np.ndarray
    item_ids: list[str]

    def __post_init__(self):
        self.items = np.ascontiguousarray(self.items, dtype=np.float32)
        if self.items.ndim != 2:
            raise ContractViolation(f"items must be 2-D, got ndim={self.items.ndim}")
        if self.items.shape[1] == 0:
            raise ContractViolation("embedding dim must be > 0")
        if self.items.shape[0] != len(self.item_ids):
            raise ContractViolation(
                f"{self.items.shape[0]} rows but {len(self.item_ids)} item_ids"
            )
        bad = np.flatnonzero(~np.isfinite(self.items).all(axis=1))
        if bad.size:
            raise ContractViolation(
                f"non-finite embedding row for item_id {self.item_ids[int(bad[0])]!r}"
            )
        if len(set(self.item_ids)) != len(self.item_ids):
            seen, dup = set(), None
            for item in self.item_ids:
                if item in seen:
                    dup = item
                    break
                seen.add(item)
            raise ContractViolation(f"duplicate item_id {dup!r}")
        self.variant = TokenVariant(self.variant)

    @property
    def dim(self) -> int:
        return int(self.items.shape[1])

    @property
    def n_items(self) -> int:
        return int(self.items.shape[0])


def write_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Serialize to the PEMB layout; read_embeddings inverts this bit-exactly."""
    path = Path(path)
    encoded = []
    for item in matrix.item_ids:
        raw = item.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContractViolation(f"item_id longer than 65535 bytes: {item[:40]!r}...")
        encoded.append(raw)
    header = _HEADER.pack(
        PEMB_MAGIC, PEMB_VERSION, matrix.dim, matrix.n_items, int(matrix.variant)
    )
    payload = np.ascontiguousarray(matrix.items, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        for raw in encoded:
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


def read_embeddings(
    path: str | Path, model_id: str = "", dataset_id: str = ""
) -> EmbeddingMatrix:
    """Parse a PEMB file, validating structure before any value is used.

    model_id and dataset_id are not part of the byte format; callers that
    know them (the import layout does) pass them through.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than {_HEADER.size}-byte header")
    magic, version, dim, row_count, variant_tag = _HEADER.unpack_from(blob, 0)
    if magic != PEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != PEMB_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if dim == 0:
        raise FormatError(f"{path}: header declares dim 0")
    try:
        variant = TokenVariant(variant_tag)
    except ValueError:
        raise FormatError(f"{path}: unknown variant tag {variant_tag}") from None

    offset = _HEADER.size
    need = row_count * dim * 4
    if len(blob) - offset < need:
        have_rows = (len(blob) - offset) // (dim * 4)
        raise FormatError(
            f"{path}: truncated payload at row {have_rows} of {row_count} "
            f"(offset {offset + have_rows * dim * 4})"
        )
    values = np.frombuffer(blob, dtype="<f4", count=row_count * dim, offset=offset)
    items = values.reshape(row_count, dim).copy()
    offset += need

    item_ids = []
    for row in range(row_count):
        if len(blob) - offset < 2:
            raise FormatError(f"{path}: id table truncated at row {row} (offset {offset})")
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if len(blob) - offset < id_len:
            raise FormatError(f"{path}: id bytes truncated at row {row} (offset {offset})")
        try:
            item_ids.append(blob[offset : offset + id_len].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: invalid UTF-8 id at row {row}") from exc
        offset += id_len
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after id table")

    try:
        return EmbeddingMatrix(model_id, dataset_id, variant, items, item_ids)
    except ContractViolation as exc:
        raise FormatError(f"{path}: {exc}") from exc


def concat_cls_mean(cls: EmbeddingMatrix, mean: EmbeddingMatrix) -> EmbeddingMatrix:
    """Concatenate per-row [cls | mean] into a CLS_MEAN matrix of doubled dim.

    Both inputs must be single-token (CLS-tagged) exports for the same model
    and dataset with identical item order.
    """
    if cls.model_id != mean.model_id or cls.dataset_id != mean.dataset_id:
        raise ContractViolation(
            f"model/dataset mismatch: ({cls.model_id}, {cls.dataset_id}) vs "
            f"({mean.model_id}, {mean.dataset_id})"
        )
    if cls.variant != TokenVariant.CLS or mean.variant != TokenVariant.CLS:
        raise ContractViolation("concat inputs must both be single-token (CLS-tagged)")
    if cls.dim != mean.dim:
        raise ContractViolation(f"dim mismatch: {cls.dim} vs {mean.dim}")
    if cls.item_ids != mean.item_ids:
        for i, (a, b) in enumerate(zip(cls.item_ids, mean.item_ids)):
            if a != b:
                raise ContractViolation(f"item order diverges at index {i}: {a!r} vs {b!r}")
        raise ContractViolation(
            f"item count mismatch: {len(cls.item_ids)} vs {len(mean.item_ids)}"
        )
    return EmbeddingMatrix(
        model_id=cls.model_id,
        dataset_id=cls.dataset_id,
        variant=TokenVariant.CLS_MEAN,
        items=np.hstack([cls.items, mean.items]),
        item_ids=list(cls.item_ids),
    )


@dataclass
class DatasetManifest:
    """Per-item labels and grouping metadata, joined to embeddings by item_id.

    For classification task kinds `labels` is an int64 vector of class
    indices; for multivariate regression `targets` is an (n, 50) float64
    matrix and `labels` is unused.
    """

    dataset_id: str
    task_kind: str
    item_ids: list[str]
    patient_ids: list[str]
    slide_ids: list[str]
    splits: list[str]
    fold_ids: list
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ContractViolation(f"unknown task_kind {self.task_kind!r}")
        n = len(self.item_ids)
        for name, seq in (
            ("patient_ids", self.patient_ids),
            ("slide_ids", self.slide_ids),
            ("splits", self.splits),
            ("fold_ids", self.fold_ids),
        ):
            if len(seq) != n:
                raise ContractViolation(f"{name} length {len(seq)} != {n} items")
        if len(set(self.item_ids)) != n:
            raise ContractViolation("duplicate item_id in manifest")
        for tag in self.splits:
            if tag not in SPLIT_TAGS:
                raise ContractViolation(f"unknown split tag {tag!r}")
        if self.task_kind == "multivariate-regression":
            if self.targets is None:
                raise ContractViolation("regression manifest requires targets")
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape != (n, GENE_TARGET_COUNT):
                raise ContractViolation(
                    f"targets must be (n, {GENE_TARGET_COUNT}), got {self.targets.shape}"
                )
            if not np.isfinite(self.targets).all():
                raise ContractViolation("non-finite regression target")
        else:
            if self.labels is None:
                raise ContractViolation("classification manifest requires labels")
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ContractViolation(f"labels must be (n,), got {self.labels.shape}")
            if n and self.labels.min() < 0:
                raise ContractViolation(f"negative class index {int(self.labels.min())}")

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_classes(self) -> int:
        if self.labels is None or self.labels.size == 0:
            return 0
        return int(self.labels.max()) + 1


def _parse_fold(text: str, line_no: int, path) -> int | None:
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        raise FormatError(f"{path}: line {line_no}: bad fold_id {text!r}") from None


def read_manifest(
    path: str | Path, dataset_id: str = "", task_kind: str | None = None
) -> DatasetManifest:
    """Load a manifest CSV; the header decides classification vs regression.

    task_kind refines the classification default (patch vs slide); regression
    is implied by the gene-column header.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty manifest") from None
        if header == CLASSIFICATION_HEADER:
            regression = False
        elif header == REGRESSION_HEADER:
            regression = True
        else:
            raise FormatError(f"{path}: unrecognized manifest header {header[:8]}")

        item_ids, patients, slides, splits, folds = [], [], [], [], []
        labels, targets = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: line {line_no}: {len(row)} fields, expected {len(header)}"
                )
            if regression:
                item_id, patient, slide, fold_text = row[0], row[1], row[2], row[3]
                try:
                    targets.append([float(v) for v in row[4:]])
                except ValueError:
                    raise FormatError(
                        f"{path}: line {line_no}: non-numeric gene target"
                    ) from None
                splits.append("none")
            else:
                item_id, label_text, patient, slide, split, fold_text = row
                try:
                    labels.append(int(label_text))
                except ValueError:
                    raise FormatError(
                        f"{path}: line {line_no}: bad label {label_text!r}"
                    ) from None
                splits.append(split if split else "none")
            item_ids.append(item_id)
            patients.append(patient)
            slides.append(slide)
            folds.append(_parse_fold(fold_text, line_no, path))

    if regression:
        kind = "multivariate-regression"
    else:
        kind = task_kind or "patch-classification"
    try:
        return DatasetManifest(
            dataset_id=dataset_id or path.stem,
            task_kind=kind,
            item_ids=item_ids,
            patient_ids=patients,
            slide_ids=slides,
            splits=splits,
            fold_ids=folds,
            labels=np.asarray(labels, dtype=np.int64) if not regression else None,
            targets=np.asarray(targets, dtype=np.float64) if regression else None,
        )
    except ContractViolation as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if manifest.task_kind == "multivariate-regression":
            writer.writerow(REGRESSION_HEADER)
            for i, item in enumerate(manifest.item_ids):
                fold = manifest.fold_ids[i]
                writer.writerow(
                    [
                        item,
                        manifest.patient_ids[i],
                        manifest.slide_ids[i],
                        "" if fold is None else fold,
                    ]
                    + [repr(float(v)) for v in manifest.targets[i]]
                )
        else:
            writer.writerow(CLASSIFICATION_HEADER)
            for i, item in enumerate(manifest.item_ids):
                fold = manifest.fold_ids[i]
                writer.writerow(
                    [
                        item,
                        int(manifest.labels[i]),
                        manifest.patient_ids[i],
                        manifest.slide_ids[i],
                        manifest.splits[i],
                        "" if fold is None else fold,
                    ]
                )


@dataclass
class ModelCard:
    """Registry entry describing one backbone for reporting and figures."""

    model_id: str
    display_name: str
    parameter_count: int
    training_slides: int

    def __post_init__(self):
        if self.parameter_count <= 0:
            raise ContractViolation(f"parameter_count must be > 0: {self.parameter_count}")
        if self.training_slides <= 0:
            raise ContractViolation(f"training_slides must be > 0: {self.training_slides}")


def load_model_cards(path: str | Path) -> dict[str, ModelCard]:
    """Read a JSON document holding one card or a list of cards."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    entries = doc if isinstance(doc, list) else [doc]
    cards = {}
    for entry in entries:
        try:
            card = ModelCard(
                model_id=entry["model_id"],
                display_name=entry["display_name"],
                parameter_count=int(entry["parameter_count"]),
                training_slides=int(entry["training_slides"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad model card entry: {exc}") from exc
        if card.model_id in cards:
            raise FormatError(f"{path}: duplicate model_id {card.model_id!r}")
        cards[card.model_id] = card
    return cards


@dataclass
class BoundDataset:
    """Embedding rows aligned to manifest metadata, in manifest order."""

    model_id: str
    dataset_id: str
    variant: TokenVariant
    task_kind: str
    X: np.ndarray
    item_ids: list[str]
    patient_ids: list[str]
    slide_ids: list[str]
    splits: list[str]
    fold_ids: list
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None
    index: dict = field(init=False)

    def __post_init__(self):
        self.index = {item: i for i, item in enumerate(self.item_ids)}

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])

    @property
    def num_classes(self) -> int:
        if self.labels is None or self.labels.size == 0:
            return 0
        return int(self.labels.max()) + 1

    def rows(self, item_ids) -> np.ndarray:
        return self.X[[self.index[item] for item in item_ids]]

    def label_vector(self, item_ids) -> np.ndarray:
        return self.labels[[self.index[item] for item in item_ids]]

    def target_matrix(self, item_ids) -> np.ndarray:
        return self.targets[[self.index[item] for item in item_ids]]


def join_manifest(matrix: EmbeddingMatrix, manifest: DatasetManifest) -> BoundDataset:
    """Align embedding rows to manifest rows by item_id, in manifest order."""
    have = set(matrix.item_ids)
    want = set(manifest.item_ids)
    if have != want:
        missing = sorted(want - have)
        extra = sorted(have - want)
        parts = []
        if missing:
            parts.append(f"{len(missing)} manifest ids missing from embeddings "
                         f"(first: {missing[:5]})")
        if extra:
            parts.append(f"{len(extra)} embedding ids absent from manifest "
                         f"(first: {extra[:5]})")
        raise JoinError(f"{matrix.dataset_id or manifest.dataset_id}: " + "; ".join(parts))
    row_of = {item: i for i, item in enumerate(matrix.item_ids)}
    order = [row_of[item] for item in manifest.item_ids]
    return BoundDataset(
        model_id=matrix.model_id,
        dataset_id=manifest.dataset_id,
        variant=matrix.variant,
        task_kind=manifest.task_kind,
        X=matrix.items[order],
        item_ids=list(manifest.item_ids),
        patient_ids=list(manifest.patient_ids),
        slide_ids=list(manifest.slide_ids),
        splits=list(manifest.splits),
        fold_ids=list(manifest.fold_ids),
        labels=None if manifest.labels is None else manifest.labels.copy(),
        targets=None if manifest.targets is None else manifest.targets.copy(),
    )
