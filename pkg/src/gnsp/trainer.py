"""The continual-learning engine: per-task optimization with projected
updates and distillation/alignment regularization, post-task gram
absorption, and the evaluation loop over a task sequence.

Each training step samples a task batch and (when distillation or alignment
is active) a reference batch, backpropagates the weighted objective into
per-layer image-encoder weight gradients, projects the combined gradient
with the current null-space projector when the method calls for it, and
applies a plain SGD step. Biases are never touched. After a task finishes,
its activations are streamed through the final weights to absorb one
unit-norm gram per trainable layer and the projector is rebuilt.

Determinism: every sampling stream is derived from (config seed, task
index), so a full run is a pure function of its configuration, and
checkpoints restore exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .encoder import (
    Activation,
    DualEncoder,
    EncoderStack,
    Gradients,
    backward,
    forward,
    init_stack,
)
from .linalg import frobenius_norm
from .losses import cd_loss, classification_loss, map_loss
from .metrics import AccuracyMatrix, GapSeries, evaluate_accuracy, track_gap
from .projection import (
    GramAccumulator,
    Projector,
    accumulate,
    build_projector,
    empty_accumulator,
    project_update,
)
from .tasks import ReferenceSet, Split, TaskDataset

_TRAIN_STREAM = 3
_PRETRAIN_STREAM = 4
_IMAGE_TOWER_STREAM = 10
_TEXT_TOWER_STREAM = 11

_CAPTURE_CHUNK = 256

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8

DEFAULT_IMAGE_HIDDEN = (64, 64)
DEFAULT_TEXT_HIDDEN = (64,)
DEFAULT_EMBED_DIM = 16
DEFAULT_TEMPERATURE = 0.07


class Method(Enum):
    GNSP_FULL = "GNSP_FULL"          # projection + CD + MAP
    GNSP_ONLY = "GNSP_ONLY"          # projection, no regularizers
    CD_ONLY = "CD_ONLY"              # CD regularizer, no projection
    PLAIN_FINETUNE = "PLAIN_FINETUNE"


class TrainingError(RuntimeError):
    """A training step failed; the message carries the iteration index."""


@dataclass
class TrainerConfig:
    iterations_per_task: int = 500
    batch_size: int = 64
    learning_rate: float = 0.05
    rho: float = 0.15
    lambda_cd: float = 1.0
    beta_map: float = 0.75
    method: Method = Method.GNSP_FULL
    include_reference_gram: bool = False
    seed: int = 0
    capture_cap: int = 10000
    optimizer: str = "sgd"  # "adam" is experimental: projects the final step
    # Per-loss temperature overrides; None means "use the model temperature".
    # The distillation KL is a batch sum, so with an untrained teacher a
    # sharp temperature makes it overwhelmingly stiff; experiment configs
    # soften it the way distillation temperatures are classically softened.
    cd_temperature: float | None = None
    map_temperature: float | None = None

    def validate(self) -> "TrainerConfig":
        if self.iterations_per_task < 0:
            raise ValueError(f"iterations_per_task must be >= 0, got {self.iterations_per_task}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if self.lambda_cd < 0 or self.beta_map < 0:
            raise ValueError("lambda_cd and beta_map must be non-negative")
        if self.capture_cap < 1:
            raise ValueError(f"capture_cap must be >= 1, got {self.capture_cap}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        for name, temp in (("cd_temperature", self.cd_temperature),
                           ("map_temperature", self.map_temperature)):
            if temp is not None and temp <= 0:
                raise ValueError(f"{name} must be positive, got {temp}")
        if not 0 <= self.seed < 2**63:
            raise ValueError(f"seed must fit in a non-negative 64-bit int, got {self.seed}")
        return self


@dataclass
class ContinualState:
    """Everything the continual run carries between tasks.

    The teacher is a frozen copy of the initial model and is never written
    to. The projector is present once at least one gram has been absorbed
    (i.e. after the first task, or immediately when the reference gram is
    included). Sampling streams are re-derived from (seed, task_index), so
    this state round-trips exactly through checkpoints.
    """

    model: DualEncoder
    teacher: DualEncoder
    gram: GramAccumulator
    projector: Projector | None
    task_index: int
    seed: int


def method_flags(cfg: TrainerConfig) -> tuple[bool, float, float]:
    """(use_projection, effective lambda, effective beta) for cfg.method."""
    m = cfg.method
    if m is Method.GNSP_FULL:
        return True, cfg.lambda_cd, cfg.beta_map
    if m is Method.GNSP_ONLY:
        return True, 0.0, 0.0
    if m is Method.CD_ONLY:
        return False, cfg.lambda_cd, 0.0
    return False, 0.0, 0.0


def make_default_dual_encoder(
    d_image_in: int,
    d_text_in: int,
    seed: int,
    *,
    image_hidden=DEFAULT_IMAGE_HIDDEN,
    text_hidden=DEFAULT_TEXT_HIDDEN,
    embed_dim: int = DEFAULT_EMBED_DIM,
    temperature: float = DEFAULT_TEMPERATURE,
) -> DualEncoder:
    """GELU image tower (trainable) + frozen text tower, shared embedding dim."""
    image = init_stack(
        [d_image_in, *image_hidden, embed_dim],
        Activation.GELU,
        [seed, _IMAGE_TOWER_STREAM],
    )
    text = init_stack(
        [d_text_in, *text_hidden, embed_dim],
        Activation.GELU,
        [seed, _TEXT_TOWER_STREAM],
        trainable=False,
    )
    return DualEncoder(image_encoder=image, text_encoder=text, temperature=temperature)


def pretrain_dual_encoder(
    model: DualEncoder,
    reference: ReferenceSet,
    iterations: int,
    *,
    batch_size: int = 64,
    learning_rate: float = 0.05,
    seed: int = 0,
) -> DualEncoder:
    """Align the image tower with the frozen text tower on reference pairs.

    This is the toy stand-in for starting from a contrastively pretrained
    model: plain in-batch InfoNCE on the reference set, image tower only,
    biases untouched. Run it before snapshotting the teacher so the teacher
    actually has a confident similarity structure to distill. Updates the
    model in place and returns it.
    """
    rng = np.random.default_rng([seed, _PRETRAIN_STREAM])
    sampler = _EpochSampler(len(reference), rng)
    image_enc = model.image_encoder
    txt_emb, _ = forward(model.text_encoder, reference.texts)
    for _ in range(iterations):
        idx = sampler.next(batch_size)
        emb, trace = forward(image_enc, reference.images[idx], capture=True)
        out = map_loss(emb, txt_emb[idx], model.temperature)
        grads = backward(image_enc, trace, out.d_image_embeddings)
        for i in image_enc.trainable_indices():
            image_enc.layers[i].weight -= learning_rate * grads.d_weight[i]
    return model


def capture_layer_grams(
    stack: EncoderStack, images: np.ndarray, cap: int
) -> list[np.ndarray]:
    """Stream up to `cap` rows through the stack and return one unit-norm
    gram per trainable layer, accumulating X^T X chunk by chunk so the full
    activation matrix is never materialized.
    """
    rows = images[: min(cap, images.shape[0])]
    indices = stack.trainable_indices()
    sums = [np.zeros((stack.layers[i].d_in, stack.layers[i].d_in)) for i in indices]
    for start in range(0, rows.shape[0], _CAPTURE_CHUNK):
        _, trace = forward(stack, rows[start : start + _CAPTURE_CHUNK], capture=True)
        for j, layer_idx in enumerate(indices):
            x = trace.layer_inputs[layer_idx]
            sums[j] += x.T @ x
    grams = []
    for s in sums:
        norm = frobenius_norm(s)
        if norm == 0.0:
            raise TrainingError("captured activations are all zero; gram undefined")
        grams.append(s / norm)
    return grams


def make_initial_state(
    model: DualEncoder, cfg: TrainerConfig, reference: ReferenceSet | None = None
) -> ContinualState:
    """Freeze the teacher copy and set up an empty (or reference-seeded)
    gram accumulator over the image tower's trainable layers.
    """
    cfg.validate()
    teacher = copy.deepcopy(model)
    gram = empty_accumulator(model.image_encoder)
    projector = None
    if cfg.include_reference_gram:
        if reference is None:
            raise ValueError("include_reference_gram requires a reference set")
        grams = capture_layer_grams(model.image_encoder, reference.images, cfg.capture_cap)
        gram = accumulate(gram, grams)
        projector = build_projector(gram, cfg.rho)
    return ContinualState(
        model=model,
        teacher=teacher,
        gram=gram,
        projector=projector,
        task_index=0,
        seed=cfg.seed,
    )


class _EpochSampler:
    """Without-replacement batches; reshuffles when an epoch is exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self._n = n
        self._rng = rng
        self._pool = rng.permutation(n)
        self._pos = 0

    def next(self, batch_size: int) -> np.ndarray:
        out = []
        need = batch_size
        while need > 0:
            available = self._n - self._pos
            take = min(need, available)
            out.append(self._pool[self._pos : self._pos + take])
            self._pos += take
            need -= take
            if self._pos == self._n:
                self._pool = self._rng.permutation(self._n)
                self._pos = 0
        return np.concatenate(out)


class _AdamState:
    def __init__(self, stack: EncoderStack):
        self.m = {i: np.zeros_like(stack.layers[i].weight) for i in stack.trainable_indices()}
        self.v = {i: np.zeros_like(stack.layers[i].weight) for i in stack.trainable_indices()}
        self.t = 0

    def step(self, grads: Gradients, lr: float) -> Gradients:
        """Raw parameter deltas (before projection) for this gradient."""
        self.t += 1
        deltas = [np.zeros_like(g) for g in grads.d_weight]
        for i in self.m:
            g = grads.d_weight[i]
            self.m[i] = _ADAM_BETA1 * self.m[i] + (1 - _ADAM_BETA1) * g
            self.v[i] = _ADAM_BETA2 * self.v[i] + (1 - _ADAM_BETA2) * g * g
            m_hat = self.m[i] / (1 - _ADAM_BETA1**self.t)
            v_hat = self.v[i] / (1 - _ADAM_BETA2**self.t)
            deltas[i] = lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        return Gradients(d_weight=deltas)


def train_task(
    state: ContinualState,
    task: TaskDataset,
    reference: ReferenceSet,
    cfg: TrainerConfig,
) -> ContinualState:
    """Run one task's optimization, then absorb its grams and rebuild the
    projector. Returns the advanced state (the model object is updated in
    place; the input state should be considered consumed).
    """
    cfg.validate()
    if task.split is not Split.TRAIN:
        raise ValueError(f"train_task needs a TRAIN split, got {task.split}")
    if len(task) == 0:
        raise ValueError("empty task")

    model = state.model
    image_enc = model.image_encoder
    use_projection, lam, beta = method_flags(cfg)
    needs_reference = lam > 0 or beta > 0

    rng = np.random.default_rng([cfg.seed, state.task_index, _TRAIN_STREAM])
    task_sampler = _EpochSampler(len(task), rng)
    ref_sampler = _EpochSampler(len(reference), rng) if needs_reference else None

    # The text tower is frozen, so every text embedding (class prototypes,
    # reference texts) and the teacher's image embeddings are constants.
    class_text_emb, _ = forward(model.text_encoder, task.class_prototypes)
    if needs_reference:
        ref_txt_emb, _ = forward(model.text_encoder, reference.texts)
        teacher_img_emb, _ = forward(state.teacher.image_encoder, reference.images)

    adam = _AdamState(image_enc) if cfg.optimizer == "adam" else None
    projector = state.projector if use_projection else None
    cd_temp = cfg.cd_temperature if cfg.cd_temperature is not None else model.temperature
    map_temp = cfg.map_temperature if cfg.map_temperature is not None else model.temperature

    for it in range(cfg.iterations_per_task):
        try:
            idx = task_sampler.next(cfg.batch_size)
            emb, trace = forward(image_enc, task.images[idx], capture=True)
            ce = classification_loss(
                emb, class_text_emb, task.labels[idx], model.temperature
            )
            if not np.isfinite(ce.value):
                raise TrainingError(f"non-finite classification loss: {ce.value}")
            grads = backward(image_enc, trace, ce.d_image_embeddings)

            if needs_reference:
                ridx = ref_sampler.next(cfg.batch_size)
                ref_emb, ref_trace = forward(
                    image_enc, reference.images[ridx], capture=True
                )
                txt = ref_txt_emb[ridx]
                d_ref = np.zeros_like(ref_emb)
                if lam > 0:
                    cd = cd_loss(teacher_img_emb[ridx], txt, ref_emb, txt, cd_temp)
                    if not np.isfinite(cd.value):
                        raise TrainingError(f"non-finite distillation loss: {cd.value}")
                    d_ref += lam * cd.d_image_embeddings
                if beta > 0:
                    mp = map_loss(ref_emb, txt, map_temp)
                    if not np.isfinite(mp.value):
                        raise TrainingError(f"non-finite alignment loss: {mp.value}")
                    d_ref += beta * mp.d_image_embeddings
                grads = grads.add(backward(image_enc, ref_trace, d_ref))

            if adam is not None:
                delta = adam.step(grads, cfg.learning_rate)
                if projector is not None:
                    delta = project_update(projector, delta)
                for i in image_enc.trainable_indices():
                    image_enc.layers[i].weight -= delta.d_weight[i]
            else:
                if projector is not None:
                    grads = project_update(projector, grads)
                for i in image_enc.trainable_indices():
                    image_enc.layers[i].weight -= cfg.learning_rate * grads.d_weight[i]
        except TrainingError:
            raise
        except Exception as exc:
            raise TrainingError(f"iteration {it} failed: {exc}") from exc

    grams = capture_layer_grams(image_enc, task.images, cfg.capture_cap)
    new_gram = accumulate(state.gram, grams)
    new_projector = build_projector(new_gram, cfg.rho)
    return ContinualState(
        model=model,
        teacher=state.teacher,
        gram=new_gram,
        projector=new_projector,
        task_index=state.task_index + 1,
        seed=state.seed,
    )


def run_sequence(
    task_pairs: list[tuple[TaskDataset, TaskDataset]],
    reference: ReferenceSet,
    cfg: TrainerConfig,
    *,
    probes: list[tuple[str, ReferenceSet]] | None = None,
    encoder: DualEncoder | None = None,
) -> tuple[ContinualState, AccuracyMatrix, GapSeries]:
    """Train the task sequence, evaluating the full test grid and the
    modality gap on every probe after each task (plus the initial model).
    """
    cfg.validate()
    if not task_pairs:
        raise ValueError("need at least one task")
    if encoder is None:
        d_image_in = task_pairs[0][0].images.shape[1]
        d_text_in = task_pairs[0][0].class_prototypes.shape[1]
        encoder = make_default_dual_encoder(d_image_in, d_text_in, cfg.seed)
    if probes is None:
        probes = [("reference", reference)]

    state = make_initial_state(encoder, cfg, reference=reference)
    n_tasks = len(task_pairs)
    grid = np.zeros((n_tasks + 1, n_tasks))
    names = [train.name for train, _ in task_pairs]

    for j, (_, test) in enumerate(task_pairs):
        grid[0, j] = evaluate_accuracy(state.model, test)
    gaps = track_gap(state.model, probes, 0, GapSeries())

    for t, (train, _) in enumerate(task_pairs, start=1):
        state = train_task(state, train, reference, cfg)
        for j, (_, test) in enumerate(task_pairs):
            grid[t, j] = evaluate_accuracy(state.model, test)
        gaps = track_gap(state.model, probes, t, gaps)

    return state, AccuracyMatrix(grid=grid, task_names=names), gaps
