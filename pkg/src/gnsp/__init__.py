"""Continual learning for dual-encoder contrastive models.

Gradient null-space projection keeps per-task updates orthogonal to the
activations of everything learned so far; contrastive distillation and a
modality-alignment loss on reference data keep the shared image/text
embedding space from drifting. Every mathematical guarantee (projector
algebra, null-space exactness, output invariance) is exposed as a testable
invariant; `gnsp.cli` provides the experiment commands.
"""

from .encoder import (
    Activation,
    DualEncoder,
    EncoderLayer,
    EncoderStack,
    ForwardTrace,
    Gradients,
    backward,
    finite_diff_grad,
    forward,
    init_stack,
)
from .linalg import (
    EigenSpectrum,
    ShapeMismatchError,
    cosine_sim_matrix,
    frobenius_norm,
    kl_rows,
    l2_normalize_rows,
    matmul,
    softmax_rows,
    sym_eig,
)
from .losses import (
    LossOutput,
    LossWeights,
    cd_loss,
    classification_loss,
    map_loss,
    modality_gap,
    total_loss,
)
from .metrics import (
    AccuracyMatrix,
    GapSeries,
    evaluate_accuracy,
    retrieval_recall_at_k,
    summarize,
    track_gap,
)
from .projection import (
    GramAccumulator,
    Projector,
    accumulate,
    adaptive_split,
    build_projector,
    empty_accumulator,
    gram_from_activations,
    project_update,
)
from .tasks import (
    ReferenceSet,
    Split,
    TaskDataset,
    make_reference_set,
    make_task,
    split_cil,
)
from .trainer import (
    ContinualState,
    Method,
    TrainerConfig,
    make_default_dual_encoder,
    make_initial_state,
    run_sequence,
    train_task,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
