"""Binary checkpoint format for ContinualState.

Layout: magic b"GNSP", format version (u32 LE), payload length (u64 LE),
payload, CRC-32 of the payload (u32 LE). The payload holds a manifest
(layer counts, dims, flags) followed by raw row-major little-endian float64
matrix data, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .encoder import Activation, DualEncoder, EncoderLayer, EncoderStack
from .projection import GramAccumulator, Projector
from .trainer import ContinualState

MAGIC = b"GNSP"
VERSION = 1

_ACTIVATION_CODES = {Activation.GELU: 0, Activation.IDENTITY: 1}
_ACTIVATION_FROM_CODE = {v: k for k, v in _ACTIVATION_CODES.items()}


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or malformed structure."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not the one this build reads."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared payload and checksum."""


class CheckpointChecksumError(CheckpointError):
    """The payload CRC does not match."""


def _matrix_bytes(m: np.ndarray) -> bytes:
    return np.ascontiguousarray(m, dtype="<f8").tobytes()


def _pack_stack(stack: EncoderStack) -> bytes:
    parts = [struct.pack("<IB", len(stack.layers), int(stack.normalize_output))]
    for layer in stack.layers:
        parts.append(
            struct.pack(
                "<IIBB",
                layer.d_in,
                layer.d_out,
                _ACTIVATION_CODES[layer.activation],
                int(layer.trainable),
            )
        )
    for layer in stack.layers:
        parts.append(_matrix_bytes(layer.weight))
        parts.append(_matrix_bytes(layer.bias.reshape(1, -1)))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise CheckpointTruncatedError(
                f"payload ends at byte {len(self._data)}, needed {self._pos + n}"
            )
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def matrix(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(rows * cols * 8)
        return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)

    def done(self) -> bool:
        return self._pos == len(self._data)


def _read_stack(r: _Reader) -> EncoderStack:
    n_layers, normalize = r.unpack("<IB")
    meta = [r.unpack("<IIBB") for _ in range(n_layers)]
    layers = []
    for d_in, d_out, act_code, trainable in meta:
        if act_code not in _ACTIVATION_FROM_CODE:
            raise CheckpointFormatError(f"unknown activation code {act_code}")
        weight = r.matrix(d_in, d_out)
        bias = r.matrix(1, d_out)[0]
        layers.append(
            EncoderLayer(
                weight=weight,
                bias=bias,
                activation=_ACTIVATION_FROM_CODE[act_code],
                trainable=bool(trainable),
            )
        )
    return EncoderStack(layers=layers, normalize_output=bool(normalize))


def _pack_state(state: ContinualState) -> bytes:
    parts = [
        struct.pack(
            "<Iqdd",
            state.task_index,
            state.seed,
            state.model.temperature,
            state.teacher.temperature,
        ),
        _pack_stack(state.model.image_encoder),
        _pack_stack(state.model.text_encoder),
        _pack_stack(state.teacher.image_encoder),
        _pack_stack(state.teacher.text_encoder),
    ]
    gram = state.gram
    parts.append(struct.pack("<II", len(gram.per_layer), gram.tasks_absorbed))
    for idx, dim in zip(gram.layer_indices, gram.layer_dims):
        parts.append(struct.pack("<II", idx, dim))
    for m in gram.per_layer:
        parts.append(_matrix_bytes(m))
    proj = state.projector
    parts.append(struct.pack("<B", int(proj is not None)))
    if proj is not None:
        parts.append(struct.pack("<dI", proj.rho_used, len(proj.per_layer)))
        for idx, m, null_dim in zip(proj.layer_indices, proj.per_layer, proj.null_dims):
            parts.append(struct.pack("<III", idx, m.shape[0], null_dim))
        for m in proj.per_layer:
            parts.append(_matrix_bytes(m))
    return b"".join(parts)


def save_checkpoint(state: ContinualState, path) -> None:
    payload = _pack_state(state)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> ContinualState:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise CheckpointTruncatedError(f"file has only {len(data)} bytes")
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 16:
        raise CheckpointTruncatedError(f"header ends at byte {len(data)}, needed 16")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointVersionError(
            f"file has format version {version}, this build reads {VERSION}"
        )
    (payload_len,) = struct.unpack("<Q", data[8:16])
    expected = 16 + payload_len + 4
    if len(data) < expected:
        raise CheckpointTruncatedError(
            f"file has {len(data)} bytes, expected {expected}"
        )
    if len(data) > expected:
        raise CheckpointFormatError(f"{len(data) - expected} trailing bytes")
    payload = data[16 : 16 + payload_len]
    (crc,) = struct.unpack("<I", data[16 + payload_len :])
    if zlib.crc32(payload) != crc:
        raise CheckpointChecksumError("payload CRC mismatch")

    r = _Reader(payload)
    task_index, seed, model_temp, teacher_temp = r.unpack("<Iqdd")
    model_image = _read_stack(r)
    model_text = _read_stack(r)
    teacher_image = _read_stack(r)
    teacher_text = _read_stack(r)
    n_gram, tasks_absorbed = r.unpack("<II")
    indices, dims = [], []
    for _ in range(n_gram):
        idx, dim = r.unpack("<II")
        indices.append(idx)
        dims.append(dim)
    per_layer = [r.matrix(d, d) for d in dims]
    gram = GramAccumulator(
        per_layer=per_layer,
        tasks_absorbed=tasks_absorbed,
        layer_dims=dims,
        layer_indices=indices,
    )
    (has_proj,) = r.unpack("<B")
    projector = None
    if has_proj:
        rho_used, n_proj = r.unpack("<dI")
        p_indices, p_dims, null_dims = [], [], []
        for _ in range(n_proj):
            idx, dim, null_dim = r.unpack("<III")
            p_indices.append(idx)
            p_dims.append(dim)
            null_dims.append(null_dim)
        p_layers = [r.matrix(d, d) for d in p_dims]
        projector = Projector(
            per_layer=p_layers,
            null_dims=null_dims,
            rho_used=rho_used,
            layer_indices=p_indices,
        )
    if not r.done():
        raise CheckpointFormatError("payload has unread bytes")
    return ContinualState(
        model=DualEncoder(model_image, model_text, model_temp),
        teacher=DualEncoder(teacher_image, teacher_text, teacher_temp),
        gram=gram,
        projector=projector,
        task_index=task_index,
        seed=seed,
    )


def states_equal(a: ContinualState, b: ContinualState) -> bool:
    """Field-by-field bitwise comparison, used by round-trip tests."""

    def stacks_equal(x: EncoderStack, y: EncoderStack) -> bool:
        if x.normalize_output != y.normalize_output or len(x.layers) != len(y.layers):
            return False
        return all(
            np.array_equal(p.weight, q.weight)
            and np.array_equal(p.bias, q.bias)
            and p.activation is q.activation
            and p.trainable == q.trainable
            for p, q in zip(x.layers, y.layers)
        )

    if a.task_index != b.task_index or a.seed != b.seed:
        return False
    if a.model.temperature != b.model.temperature:
        return False
    if not stacks_equal(a.model.image_encoder, b.model.image_encoder):
        return False
    if not stacks_equal(a.model.text_encoder, b.model.text_encoder):
        return False
    if not stacks_equal(a.teacher.image_encoder, b.teacher.image_encoder):
        return False
    if not stacks_equal(a.teacher.text_encoder, b.teacher.text_encoder):
        return False
    if a.gram.tasks_absorbed != b.gram.tasks_absorbed:
        return False
    if a.gram.layer_indices != b.gram.layer_indices or a.gram.layer_dims != b.gram.layer_dims:
        return False
    if not all(np.array_equal(x, y) for x, y in zip(a.gram.per_layer, b.gram.per_layer)):
        return False
    if (a.projector is None) != (b.projector is None):
        return False
    if a.projector is not None:
        pa, pb = a.projector, b.projector
        if pa.rho_used != pb.rho_used or pa.null_dims != pb.null_dims:
            return False
        if pa.layer_indices != pb.layer_indices:
            return False
        if not all(np.array_equal(x, y) for x, y in zip(pa.per_layer, pb.per_layer)):
            return False
    return True
