"""Null-space machinery: normalized activation gram matrices, their
accumulation across tasks, and null-space projectors for gradients.

Per layer, a task contributes M = X^T X / ||X^T X||_F built from the input
activations X seen by that layer. Summing these unit-norm grams across tasks
gives an accumulated knowledge matrix whose small-eigenvalue directions form
the (approximate) common null space of all absorbed tasks. Projecting a
weight gradient with P = V2 V2^T keeps updates inside that null space, so
X @ (P @ G) stays ~0 for every absorbed activation matrix when the trailing
ratio is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderStack, Gradients
from .linalg import EigenSpectrum, ShapeMismatchError, frobenius_norm, sym_eig

# Accepted deviation of an incoming per-task gram from unit Frobenius norm.
GRAM_NORM_TOL = 1e-9


class ZeroActivationError(ValueError):
    """Gram normalization is undefined for an all-zero activation matrix."""


@dataclass
class GramAccumulator:
    """Per-layer accumulated gram matrices for the trainable layers.

    layer_indices maps each accumulated matrix back to its position in the
    encoder stack; layer_dims are the corresponding input dimensions.
    """

    per_layer: list[np.ndarray]
    tasks_absorbed: int
    layer_dims: list[int]
    layer_indices: list[int]


@dataclass
class Projector:
    """Per-layer null-space projectors P = V2 V2^T.

    Symmetric, idempotent, eigenvalues in {0, 1}; trace(P_l) equals
    null_dims[l], the number of trailing eigenvectors retained.
    """

    per_layer: list[np.ndarray]
    null_dims: list[int]
    rho_used: float
    layer_indices: list[int]


def empty_accumulator(stack: EncoderStack) -> GramAccumulator:
    """Zero-initialized accumulator over the stack's trainable layers."""
    indices = stack.trainable_indices()
    dims = [stack.layers[i].d_in for i in indices]
    return GramAccumulator(
        per_layer=[np.zeros((d, d)) for d in dims],
        tasks_absorbed=0,
        layer_dims=dims,
        layer_indices=indices,
    )


def gram_from_activations(x: np.ndarray) -> np.ndarray:
    """M = X^T X / ||X^T X||_F; symmetric PSD with unit Frobenius norm."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeMismatchError(f"need a non-empty 2-D activation matrix, got {x.shape}")
    gram = x.T @ x
    norm = frobenius_norm(gram)
    if norm == 0.0:
        raise ZeroActivationError("all-zero activations: gram normalization undefined")
    return gram / norm


def accumulate(acc: GramAccumulator, layer_grams: list[np.ndarray]) -> GramAccumulator:
    """Absorb one task's unit-norm grams; returns a new accumulator."""
    if len(layer_grams) != len(acc.per_layer):
        raise ShapeMismatchError(
            f"got {len(layer_grams)} grams for {len(acc.per_layer)} layers"
        )
    summed = []
    for d, old, gram in zip(acc.layer_dims, acc.per_layer, layer_grams):
        gram = np.asarray(gram, dtype=np.float64)
        if gram.shape != (d, d):
            raise ShapeMismatchError(f"gram shape {gram.shape} does not match dim {d}")
        norm = frobenius_norm(gram)
        if abs(norm - 1.0) > GRAM_NORM_TOL:
            raise ValueError(
                f"per-task gram must have unit Frobenius norm, got {norm!r}"
            )
        summed.append(old + gram)
    return GramAccumulator(
        per_layer=summed,
        tasks_absorbed=acc.tasks_absorbed + 1,
        layer_dims=list(acc.layer_dims),
        layer_indices=list(acc.layer_indices),
    )


def adaptive_split(spectrum: EigenSpectrum, rho: float) -> int:
    """Count of trailing (smallest) eigenvalues whose sum stays within
    rho * total; ties at the boundary are included. A zero total spectrum
    yields the full dimension.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    values = np.asarray(spectrum.values, dtype=np.float64)
    if values.size == 0:
        return 0
    tail_cumsum = np.cumsum(values[::-1])
    total = tail_cumsum[-1]
    if total == 0.0:
        return int(values.size)
    budget = rho * total
    return int(np.searchsorted(tail_cumsum, budget, side="right"))


def build_projector(acc: GramAccumulator, rho: float) -> Projector:
    """Eigendecompose each accumulated gram and project onto the span of its
    trailing-eigenvalue eigenvectors.
    """
    if acc.tasks_absorbed < 1:
        raise ValueError("accumulator has absorbed no tasks")
    per_layer = []
    null_dims = []
    for gram in acc.per_layer:
        spectrum = sym_eig(gram)
        k = adaptive_split(spectrum, rho)
        d = gram.shape[0]
        if k == 0:
            per_layer.append(np.zeros((d, d)))
        else:
            v2 = spectrum.vectors[:, d - k :]
            per_layer.append(v2 @ v2.T)
        null_dims.append(k)
    return Projector(
        per_layer=per_layer,
        null_dims=null_dims,
        rho_used=rho,
        layer_indices=list(acc.layer_indices),
    )


def project_update(p: Projector, grads: Gradients) -> Gradients:
    """Left-multiply each covered layer's gradient by its projector.

    P_l is d_in x d_in and G_l is d_in x d_out, so every column of the update
    lands in the input-space null span. Layers without a projector (frozen
    ones) pass through unchanged.
    """
    out = [g for g in grads.d_weight]
    for proj, idx in zip(p.per_layer, p.layer_indices):
        if idx >= len(out):
            raise ShapeMismatchError(
                f"projector covers layer {idx} but gradients have {len(out)} layers"
            )
        g = out[idx]
        if proj.shape[0] != g.shape[0]:
            raise ShapeMismatchError(
                f"layer {idx}: projector dim {proj.shape[0]} vs gradient rows {g.shape[0]}"
            )
        out[idx] = proj @ g
    return Gradients(d_weight=out)


def spectrum_rows(acc: GramAccumulator, rho: float):
    """(layer, index, eigenvalue, selected) rows for spectrum export.

    selected = 1 marks the trailing eigenvalues that fall inside the
    null-space budget at this rho.
    """
    rows = []
    for layer_idx, gram in zip(acc.layer_indices, acc.per_layer):
        spectrum = sym_eig(gram)
        k = adaptive_split(spectrum, rho)
        d = spectrum.values.size
        for i, value in enumerate(spectrum.values):
            rows.append((layer_idx, i, float(value), int(i >= d - k)))
    return rows
