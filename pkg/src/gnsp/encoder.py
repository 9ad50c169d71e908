"""Small feed-forward encoder stacks with activation capture and exact
manual backpropagation.

A stack is a chain of affine layers (weight d_in x d_out, bias d_out) with
GELU hidden activations and an identity final layer, optionally followed by
row-wise L2 normalization of the output embeddings. Forward passes can record
every layer's input matrix - the activations the null-space machinery needs -
and `backward` produces exact reverse-mode gradients for the trainable
weights. Biases are frozen: no code path ever writes to them after init.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .linalg import (
    ShapeMismatchError,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

# Rows with L2 norm below this are treated as degenerate by the
# normalization backward (their gradient is zero).
NORM_EPS = 1e-12


class Activation(Enum):
    GELU = "gelu"
    IDENTITY = "identity"


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * x * (1.0 + t)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Analytic derivative of the tanh-approximation GELU."""
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    sech2 = 1.0 - t * t
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


def _apply_activation(kind: Activation, x: np.ndarray) -> np.ndarray:
    return gelu(x) if kind is Activation.GELU else x


def _activation_grad(kind: Activation, x: np.ndarray) -> np.ndarray:
    return gelu_grad(x) if kind is Activation.GELU else np.ones_like(x)


@dataclass
class EncoderLayer:
    weight: np.ndarray        # (d_in, d_out)
    bias: np.ndarray          # (d_out,), frozen after init
    activation: Activation
    trainable: bool = True

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class EncoderStack:
    layers: list[EncoderLayer]
    normalize_output: bool = True

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].d_out

    def trainable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.trainable]


@dataclass
class DualEncoder:
    """Image tower (trainable per config) + frozen text tower + temperature."""

    image_encoder: EncoderStack
    text_encoder: EncoderStack
    temperature: float = 0.07

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.image_encoder.output_dim != self.text_encoder.output_dim:
            raise ShapeMismatchError(
                "image and text encoders must share the embedding dimension: "
                f"{self.image_encoder.output_dim} vs {self.text_encoder.output_dim}"
            )


@dataclass
class ForwardTrace:
    """Per-layer input activations and preactivations from a capture forward."""

    layer_inputs: list[np.ndarray]     # X_l fed to each layer, (batch, d_in)
    preactivations: list[np.ndarray]   # X_l W_l + b_l, (batch, d_out)
    pre_norm_output: np.ndarray        # embeddings before L2 normalization


@dataclass
class Gradients:
    """Per-layer weight gradients; frozen layers hold zero blocks."""

    d_weight: list[np.ndarray]

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([factor * g for g in self.d_weight])

    def add(self, other: "Gradients") -> "Gradients":
        if len(self.d_weight) != len(other.d_weight):
            raise ShapeMismatchError("gradient layer counts differ")
        return Gradients([a + b for a, b in zip(self.d_weight, other.d_weight)])


def init_stack(
    dims,
    activation: Activation = Activation.GELU,
    seed: int = 0,
    *,
    trainable: bool = True,
    normalize_output: bool = True,
) -> EncoderStack:
    """Build a stack with Glorot-uniform weights and zero biases.

    dims = (d_0, d_1, ..., d_L) yields L weight matrices; hidden layers use
    `activation`, the final layer is identity. Deterministic for a fixed seed.
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError(f"need at least one layer (two dims), got dims={dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got dims={dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(dims) - 1):
        d_in, d_out = dims[k], dims[k + 1]
        bound = math.sqrt(6.0 / (d_in + d_out))
        weight = rng.uniform(-bound, bound, size=(d_in, d_out))
        act = Activation.IDENTITY if k == len(dims) - 2 else activation
        layers.append(
            EncoderLayer(
                weight=weight,
                bias=np.zeros(d_out),
                activation=act,
                trainable=trainable,
            )
        )
    return EncoderStack(layers=layers, normalize_output=normalize_output)


def forward(
    stack: EncoderStack, batch: np.ndarray, capture: bool = False
) -> tuple[np.ndarray, ForwardTrace | None]:
    """Run the stack on a batch; optionally record per-layer activations."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != stack.input_dim:
        raise ShapeMismatchError(
            f"batch shape {x.shape} does not match stack input dim {stack.input_dim}"
        )
    layer_inputs: list[np.ndarray] = []
    preactivations: list[np.ndarray] = []
    for layer in stack.layers:
        if capture:
            layer_inputs.append(x)
        pre = x @ layer.weight + layer.bias
        if capture:
            preactivations.append(pre)
        x = _apply_activation(layer.activation, pre)
    pre_norm = x
    out = l2_normalize_rows(x, NORM_EPS) if stack.normalize_output else x
    if not capture:
        return out, None
    return out, ForwardTrace(layer_inputs, preactivations, pre_norm)


def backward(
    stack: EncoderStack, trace: ForwardTrace, d_embeddings: np.ndarray
) -> Gradients:
    """Exact gradients of the traced forward pass w.r.t. trainable weights.

    d_embeddings is the upstream gradient on the (possibly normalized)
    embeddings from the same capture forward. Frozen layers receive
    zero-filled gradient blocks; biases produce no gradient at all.
    """
    if len(trace.layer_inputs) != len(stack.layers):
        raise ShapeMismatchError(
            f"trace has {len(trace.layer_inputs)} layers, stack has {len(stack.layers)}"
        )
    d_embeddings = np.asarray(d_embeddings, dtype=np.float64)
    if d_embeddings.shape != trace.pre_norm_output.shape:
        raise ShapeMismatchError(
            f"d_embeddings shape {d_embeddings.shape} does not match "
            f"embeddings shape {trace.pre_norm_output.shape}"
        )
    if stack.normalize_output:
        d_out = l2_normalize_rows_backward(d_embeddings, trace.pre_norm_output, NORM_EPS)
    else:
        d_out = d_embeddings
    d_weight: list[np.ndarray | None] = [None] * len(stack.layers)
    for l in range(len(stack.layers) - 1, -1, -1):
        layer = stack.layers[l]
        d_pre = d_out * _activation_grad(layer.activation, trace.preactivations[l])
        if layer.trainable:
            d_weight[l] = trace.layer_inputs[l].T @ d_pre
        else:
            d_weight[l] = np.zeros_like(layer.weight)
        if l > 0:
            d_out = d_pre @ layer.weight.T
    return Gradients(d_weight=d_weight)


def finite_diff_grad(
    stack: EncoderStack,
    loss_fn: Callable[[EncoderStack], float],
    epsilon: float = 1e-5,
) -> Gradients:
    """Central-difference gradient oracle over every trainable weight entry.

    Perturbs each entry in place by +/- epsilon and restores the original
    value exactly afterwards; frozen layers come back as zero blocks.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    grads = []
    for layer in stack.layers:
        g = np.zeros_like(layer.weight)
        if layer.trainable:
            w = layer.weight
            for idx in np.ndindex(w.shape):
                orig = w[idx]
                w[idx] = orig + epsilon
                up = loss_fn(stack)
                w[idx] = orig - epsilon
                down = loss_fn(stack)
                w[idx] = orig
                g[idx] = (up - down) / (2.0 * epsilon)
        grads.append(g)
    return Gradients(d_weight=grads)
