"""Deterministic synthetic dual-modality data.

Each classification task draws one unit prototype direction per class on the
image side; samples are prototype * separation + unit Gaussian noise, so
`separation` directly controls how learnable the task is. The text side of a
class is a seeded random prototype vector that the frozen text encoder turns
into that class's embedding. Reference sets play the role of broad
pretraining-like data: a mixture over many concept directions with per-pair
noise on both modalities, index-paired image/text.

All generators are pure functions of their arguments; distinct sub-streams
(image sampling, text prototypes, reference mixture) are derived from the
seed with fixed tags so outputs never depend on call order.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import l2_normalize_rows

# Seed-stream tags; changing these changes every generated dataset.
_IMAGE_STREAM = 0
_TEXT_STREAM = 1
_REFERENCE_STREAM = 2

# Reference-set mixture shape. All reference-style sets share one "world":
# a fixed low-dimensional image subspace (the toy analog of the natural-image
# manifold) and a fixed vocabulary of concept pairs - an image direction and
# its text direction. Individual sets differ only in which concepts each pair
# samples and in the per-pair noise, the way reference data and a held-out
# probe differ in the real setting while depicting the same world.
REF_CONCEPTS = 32
REF_SEPARATION = 4.0
REF_TEXT_NOISE = 0.4
REF_SUBSPACE_DIM = 6
_REF_WORLD_SEED = 7_741_309

TRAIN_FRACTION = 0.8


class Split(Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass
class TaskDataset:
    name: str
    images: np.ndarray            # (N, d_image_in)
    labels: np.ndarray            # (N,) ints < C
    class_prototypes: np.ndarray  # (C, d_text_in)
    split: Split

    @property
    def n_classes(self) -> int:
        return self.class_prototypes.shape[0]

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class ReferenceSet:
    images: np.ndarray  # (R, d_image_in)
    texts: np.ndarray   # (R, d_text_in), paired by index

    def __len__(self) -> int:
        return self.images.shape[0]


def make_task(
    seed: int,
    n_classes: int,
    n_per_class: int,
    d_image_in: int,
    d_text_in: int,
    separation: float,
    name: str | None = None,
) -> tuple[TaskDataset, TaskDataset]:
    """Generate one task's train/test pair (80/20 split per class)."""
    if n_classes < 1 or n_per_class < 1 or d_image_in < 1 or d_text_in < 1:
        raise ValueError(
            "n_classes, n_per_class and dims must all be >= 1, got "
            f"({n_classes}, {n_per_class}, {d_image_in}, {d_text_in})"
        )
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    name = name if name is not None else f"task_seed{seed}"

    image_rng = np.random.default_rng([seed, _IMAGE_STREAM])
    text_rng = np.random.default_rng([seed, _TEXT_STREAM])
    prototypes = l2_normalize_rows(image_rng.standard_normal((n_classes, d_image_in)))
    class_prototypes = text_rng.standard_normal((n_classes, d_text_in))

    n_train = max(1, int(round(TRAIN_FRACTION * n_per_class)))
    train_imgs, train_labels, test_imgs, test_labels = [], [], [], []
    for c in range(n_classes):
        samples = separation * prototypes[c] + image_rng.standard_normal(
            (n_per_class, d_image_in)
        )
        train_imgs.append(samples[:n_train])
        train_labels.append(np.full(n_train, c, dtype=np.int64))
        test_imgs.append(samples[n_train:])
        test_labels.append(np.full(n_per_class - n_train, c, dtype=np.int64))

    train = TaskDataset(
        name=name,
        images=np.concatenate(train_imgs),
        labels=np.concatenate(train_labels),
        class_prototypes=class_prototypes,
        split=Split.TRAIN,
    )
    test = TaskDataset(
        name=name,
        images=np.concatenate(test_imgs),
        labels=np.concatenate(test_labels),
        class_prototypes=class_prototypes,
        split=Split.TEST,
    )
    return train, test


def _reference_world(d_image_in: int, d_text_in: int):
    """Shared subspace basis plus the global concept vocabulary.

    Returns (basis d_image_in x k, image prototypes REF_CONCEPTS x k,
    text prototypes REF_CONCEPTS x d_text_in); fixed across seeds.
    """
    k = min(REF_SUBSPACE_DIM, d_image_in)
    rng = np.random.default_rng(_REF_WORLD_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((d_image_in, k)))
    img_protos = l2_normalize_rows(rng.standard_normal((REF_CONCEPTS, k)))
    txt_protos = l2_normalize_rows(rng.standard_normal((REF_CONCEPTS, d_text_in)))
    return q, img_protos, txt_protos


def make_reference_set(
    seed: int, size: int, d_image_in: int, d_text_in: int
) -> ReferenceSet:
    """Index-paired image/text vectors from the shared concept mixture.

    Image vectors are drawn inside the shared subspace around the sampled
    concept's image prototype; the paired text vector sits around the same
    concept's text prototype, so alignment learned from one reference set
    transfers to any other (a held-out probe included).
    """
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    if d_image_in < 1 or d_text_in < 1:
        raise ValueError(f"dims must be >= 1, got ({d_image_in}, {d_text_in})")
    rng = np.random.default_rng([seed, _REFERENCE_STREAM])
    basis, img_protos, txt_protos = _reference_world(d_image_in, d_text_in)
    k = basis.shape[1]
    concept = rng.integers(0, REF_CONCEPTS, size)
    latent = REF_SEPARATION * img_protos[concept] + rng.standard_normal((size, k))
    images = latent @ basis.T
    texts = REF_SEPARATION * txt_protos[concept] + REF_TEXT_NOISE * rng.standard_normal(
        (size, d_text_in)
    )
    return ReferenceSet(images=images, texts=texts)


def split_cil(task: TaskDataset, n_splits: int) -> list[TaskDataset]:
    """Partition a task into class-disjoint sub-tasks.

    Classes are chunked in order; a remainder r spreads one extra class over
    the first r splits (10 classes / 3 splits -> sizes 4, 3, 3). Labels are
    re-indexed within each split and each split carries only its own
    prototype rows; sample order within a class is preserved.
    """
    n_cls = task.n_classes
    if n_splits < 1 or n_splits > n_cls:
        raise ValueError(f"n_splits must be in [1, {n_cls}], got {n_splits}")
    base, rem = divmod(n_cls, n_splits)
    out = []
    start = 0
    for s in range(n_splits):
        width = base + (1 if s < rem else 0)
        class_range = range(start, start + width)
        mask = np.isin(task.labels, list(class_range))
        out.append(
            TaskDataset(
                name=f"{task.name}_cil{s}",
                images=task.images[mask],
                labels=task.labels[mask] - start,
                class_prototypes=task.class_prototypes[start : start + width],
                split=task.split,
            )
        )
        start += width
    return out


def task_to_csv_rows(task: TaskDataset):
    """(index, label, feature_0..feature_{d-1}) rows for CSV export."""
    rows = []
    for i in range(len(task)):
        rows.append((i, int(task.labels[i]), *[float(v) for v in task.images[i]]))
    return rows
