"""Training objectives, each returning a scalar plus exact gradients w.r.t.
the embedding matrices fed in.

All losses work on cosine similarities (embeddings are re-normalized
internally, so callers may pass raw or unit-norm embeddings) scaled by a
temperature:

- classification_loss: mean cross-entropy of image-vs-class-prototype
  softmax over cosine similarities.
- cd_loss: contrastive distillation - row-wise plus column-wise KL between
  the frozen teacher's image/text similarity logits and the student's.
  A sum over the batch, so it scales with B.
- map_loss: modality alignment preservation - symmetric in-batch InfoNCE
  on paired reference embeddings, each direction a mean over the batch.
- total_loss: the weighted combination value = ce + lambda*cd + beta*map.

Gradients w.r.t. text-side embeddings are always reported even when the
consumer keeps its text tower frozen; finite-difference oracles exercise
both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import (
    ShapeMismatchError,
    _log_softmax_rows,
    kl_rows,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    softmax_rows,
)


@dataclass
class LossOutput:
    value: float
    d_image_embeddings: np.ndarray
    d_text_embeddings: np.ndarray


@dataclass
class LossWeights:
    lambda_cd: float = 1.0
    beta_map: float = 0.75

    def __post_init__(self):
        if self.lambda_cd < 0 or self.beta_map < 0:
            raise ValueError(
                f"loss weights must be non-negative, got lambda_cd={self.lambda_cd}, "
                f"beta_map={self.beta_map}"
            )


def _check_2d(name: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _cosine_forward(a: np.ndarray, b: np.ndarray):
    """Unit rows of a and b plus their similarity matrix."""
    u = l2_normalize_rows(a)
    v = l2_normalize_rows(b)
    return u, v, u @ v.T


def _cosine_backward(d_sim, u, v, a, b):
    """Gradients of a similarity-matrix loss back to the raw embeddings."""
    d_a = l2_normalize_rows_backward(d_sim @ v, a)
    d_b = l2_normalize_rows_backward(d_sim.T @ u, b)
    return d_a, d_b


def classification_loss(
    image_emb: np.ndarray,
    class_text_emb: np.ndarray,
    labels,
    temperature: float,
) -> LossOutput:
    """Mean over the batch of -log p(correct class | image).

    p is the softmax over cosine(image, class prototype)/temperature.
    """
    image_emb = _check_2d("image_emb", image_emb)
    class_text_emb = _check_2d("class_text_emb", class_text_emb)
    if image_emb.shape[1] != class_text_emb.shape[1]:
        raise ShapeMismatchError(
            f"embedding dims differ: {image_emb.shape[1]} vs {class_text_emb.shape[1]}"
        )
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    labels = np.asarray(labels, dtype=np.int64)
    batch = image_emb.shape[0]
    n_classes = class_text_emb.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    if labels.shape != (batch,):
        raise ShapeMismatchError(
            f"labels shape {labels.shape} does not match batch size {batch}"
        )
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")

    u, v, sims = _cosine_forward(image_emb, class_text_emb)
    logits = sims / temperature
    log_p = _log_softmax_rows(logits)
    value = float(-np.mean(log_p[np.arange(batch), labels]))

    d_logits = softmax_rows(logits)
    d_logits[np.arange(batch), labels] -= 1.0
    d_sim = d_logits / (batch * temperature)
    d_img, d_txt = _cosine_backward(d_sim, u, v, image_emb, class_text_emb)
    return LossOutput(value, d_img, d_txt)


def cd_loss(
    teacher_img: np.ndarray,
    teacher_txt: np.ndarray,
    student_img: np.ndarray,
    student_txt: np.ndarray,
    temperature: float,
) -> LossOutput:
    """Contrastive distillation: KL(teacher || student) over rows and columns
    of the image-text similarity logits. Teacher embeddings are constants;
    gradients flow only into the student embeddings.
    """
    teacher_img = _check_2d("teacher_img", teacher_img)
    teacher_txt = _check_2d("teacher_txt", teacher_txt)
    student_img = _check_2d("student_img", student_img)
    student_txt = _check_2d("student_txt", student_txt)
    batch = teacher_img.shape[0]
    for name, m in (
        ("teacher_txt", teacher_txt),
        ("student_img", student_img),
        ("student_txt", student_txt),
    ):
        if m.shape[0] != batch:
            raise ShapeMismatchError(
                f"{name} has {m.shape[0]} rows, expected batch size {batch}"
            )
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")

    _, _, teacher_sims = _cosine_forward(teacher_img, teacher_txt)
    u, v, student_sims = _cosine_forward(student_img, student_txt)
    z_teacher = teacher_sims / temperature
    z_student = student_sims / temperature

    value = kl_rows(z_teacher, z_student) + kl_rows(z_teacher.T, z_student.T)

    # d KL(p || softmax(z)) / dz = softmax(z) - p, per row and per column.
    d_z = softmax_rows(z_student) - softmax_rows(z_teacher)
    d_z += (softmax_rows(z_student.T) - softmax_rows(z_teacher.T)).T
    d_sim = d_z / temperature
    d_img, d_txt = _cosine_backward(d_sim, u, v, student_img, student_txt)
    return LossOutput(value, d_img, d_txt)


def map_loss(
    student_img: np.ndarray, student_txt: np.ndarray, temperature: float
) -> LossOutput:
    """Symmetric in-batch InfoNCE on index-paired embeddings; each direction
    is a mean over the batch and the two directions are summed.
    """
    student_img = _check_2d("student_img", student_img)
    student_txt = _check_2d("student_txt", student_txt)
    batch = student_img.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    if student_txt.shape[0] != batch:
        raise ShapeMismatchError(
            f"student_txt has {student_txt.shape[0]} rows, expected {batch}"
        )
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")

    u, v, sims = _cosine_forward(student_img, student_txt)
    z = sims / temperature
    diag = np.arange(batch)
    log_p_rows = _log_softmax_rows(z)
    log_p_cols = _log_softmax_rows(z.T)
    value = float(-np.mean(log_p_rows[diag, diag]) - np.mean(log_p_cols[diag, diag]))

    d_z = softmax_rows(z)
    d_z[diag, diag] -= 1.0
    d_z_cols = softmax_rows(z.T)
    d_z_cols[diag, diag] -= 1.0
    d_sim = (d_z + d_z_cols.T) / (batch * temperature)
    d_img, d_txt = _cosine_backward(d_sim, u, v, student_img, student_txt)
    return LossOutput(value, d_img, d_txt)


def total_loss(
    ce: LossOutput, cd: LossOutput, map_: LossOutput, weights: LossWeights
) -> LossOutput:
    """value = ce + lambda*cd + beta*map, with component gradients scaled by
    their weights.

    Gradients are summed only for components with positive weight, and those
    must share shapes (i.e. the losses were evaluated on the same batch). In
    the training loop CE lives on the task batch while CD/MAP live on the
    reference batch, so the trainer combines at the parameter-gradient level
    instead of calling this with mixed shapes.
    """
    value = ce.value + weights.lambda_cd * cd.value + weights.beta_map * map_.value
    d_img = ce.d_image_embeddings.copy()
    d_txt = ce.d_text_embeddings.copy()
    for weight, part, name in (
        (weights.lambda_cd, cd, "cd"),
        (weights.beta_map, map_, "map"),
    ):
        if weight == 0:
            continue
        if (
            part.d_image_embeddings.shape != d_img.shape
            or part.d_text_embeddings.shape != d_txt.shape
        ):
            raise ShapeMismatchError(
                f"{name} gradients have incompatible shapes; combine at the "
                "parameter-gradient level instead"
            )
        d_img += weight * part.d_image_embeddings
        d_txt += weight * part.d_text_embeddings
    return LossOutput(value, d_img, d_txt)


def modality_gap(image_emb: np.ndarray, text_emb: np.ndarray) -> float:
    """Mean cosine similarity of index-paired image/text embeddings.

    Larger means the modalities sit closer together; the statistic's
    stability over a fine-tuning run is what matters downstream.
    """
    image_emb = _check_2d("image_emb", image_emb)
    text_emb = _check_2d("text_emb", text_emb)
    if image_emb.shape[0] == 0:
        raise ValueError("empty input")
    if image_emb.shape[0] != text_emb.shape[0]:
        raise ShapeMismatchError(
            f"pair counts differ: {image_emb.shape[0]} vs {text_emb.shape[0]}"
        )
    u = l2_normalize_rows(image_emb)
    v = l2_normalize_rows(text_emb)
    return float(np.mean(np.sum(u * v, axis=1)))
