"""Evaluation: the (T+1) x T accuracy grid with Transfer/Last/Average
summaries, modality-gap tracking, and image-to-text retrieval recall@k.

Summary conventions (fixed here, since benchmark scripts differ):
- Last     = mean over tasks j of A[T][j] (final row).
- Transfer = mean over tasks j >= 2 of the mean of A[i][j] for all rows
  i < j, i.e. every evaluation made before task j was trained, zero-shot
  row included. Task 1 is excluded because only the pure zero-shot row
  precedes it; with fewer than two tasks Transfer is reported as absent.
- Average  = mean over tasks j of the mean of A[i][j] for rows i = 1..T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import DualEncoder, forward
from .linalg import cosine_sim_matrix
from .losses import modality_gap
from .tasks import ReferenceSet, Split, TaskDataset


@dataclass
class AccuracyMatrix:
    grid: np.ndarray  # (T+1, T); row 0 = initial model, row i = after task i
    task_names: list[str]

    @property
    def n_tasks(self) -> int:
        return self.grid.shape[1]


@dataclass
class GapRecord:
    checkpoint: int
    probe: str
    gap: float


@dataclass
class GapSeries:
    records: list[GapRecord] = field(default_factory=list)

    def values_for(self, probe: str) -> np.ndarray:
        return np.array([r.gap for r in self.records if r.probe == probe])


def evaluate_accuracy(model: DualEncoder, task: TaskDataset) -> float:
    """Fraction of test samples whose highest-cosine class prototype matches
    the label; ties break toward the lowest class index.
    """
    if task.split is not Split.TEST:
        raise ValueError(f"evaluate_accuracy needs a TEST split, got {task.split}")
    if len(task) == 0:
        raise ValueError("empty test set")
    img_emb, _ = forward(model.image_encoder, task.images)
    txt_emb, _ = forward(model.text_encoder, task.class_prototypes)
    sims = cosine_sim_matrix(img_emb, txt_emb)
    preds = np.argmax(sims, axis=1)  # first max -> lowest index on ties
    return float(np.mean(preds == task.labels))


def summarize(matrix: AccuracyMatrix) -> tuple[float | None, float, float]:
    """(transfer, last, average) for the grid; transfer is None when T < 2."""
    grid = matrix.grid
    n_tasks = matrix.n_tasks
    if grid.shape != (n_tasks + 1, n_tasks):
        raise ValueError(f"grid shape {grid.shape} is not (T+1, T)")
    last = float(np.mean(grid[n_tasks, :]))
    average = float(np.mean([np.mean(grid[1:, j]) for j in range(n_tasks)]))
    if n_tasks < 2:
        return None, last, average
    transfer = float(np.mean([np.mean(grid[: j + 1, j]) for j in range(1, n_tasks)]))
    return transfer, last, average


def retrieval_recall_at_k(model: DualEncoder, probe: ReferenceSet, k: int) -> float:
    """Fraction of probe images whose paired text ranks in the cosine top-k
    among all probe texts; ties rank by text index.
    """
    size = len(probe)
    if size == 0:
        raise ValueError("empty probe")
    if k < 1 or k > size:
        raise ValueError(f"k must be in [1, {size}], got {k}")
    img_emb, _ = forward(model.image_encoder, probe.images)
    txt_emb, _ = forward(model.text_encoder, probe.texts)
    sims = cosine_sim_matrix(img_emb, txt_emb)
    own = sims[np.arange(size), np.arange(size)][:, None]
    better = np.sum(sims > own, axis=1)
    tied_earlier = np.sum((sims == own) & (np.arange(size)[None, :] < np.arange(size)[:, None]), axis=1)
    ranks = better + tied_earlier
    return float(np.mean(ranks < k))


def track_gap(
    model: DualEncoder,
    probes: list[tuple[str, ReferenceSet]],
    checkpoint: int,
    series: GapSeries,
) -> GapSeries:
    """Append the modality gap of each named probe at this checkpoint.

    Pure append: the input series is left untouched.
    """
    if series.records and checkpoint < series.records[-1].checkpoint:
        raise ValueError(
            f"checkpoint {checkpoint} is older than the last recorded "
            f"{series.records[-1].checkpoint}"
        )
    seen = {(r.checkpoint, r.probe) for r in series.records}
    new_records = list(series.records)
    for name, probe in probes:
        if (checkpoint, name) in seen:
            raise ValueError(f"duplicate gap record for checkpoint {checkpoint}, probe {name!r}")
        img_emb, _ = forward(model.image_encoder, probe.images)
        txt_emb, _ = forward(model.text_encoder, probe.texts)
        new_records.append(GapRecord(checkpoint, name, modality_gap(img_emb, txt_emb)))
    return GapSeries(records=new_records)


def accuracy_matrix_csv(matrix: AccuracyMatrix) -> str:
    lines = ["after_task," + ",".join(matrix.task_names)]
    for i in range(matrix.grid.shape[0]):
        lines.append(f"{i}," + ",".join(repr(float(v)) for v in matrix.grid[i]))
    return "\n".join(lines) + "\n"


def summary_csv(matrix: AccuracyMatrix) -> str:
    transfer, last, average = summarize(matrix)
    transfer_field = "" if transfer is None else repr(transfer)
    return f"transfer,last,average\n{transfer_field},{last!r},{average!r}\n"


def gap_csv(series: GapSeries) -> str:
    lines = ["checkpoint,probe,gap"]
    for r in series.records:
        lines.append(f"{r.checkpoint},{r.probe},{r.gap!r}")
    return "\n".join(lines) + "\n"


def recall_csv(recalls: list[tuple[int, float]]) -> str:
    lines = ["k,recall"]
    for k, value in recalls:
        lines.append(f"{k},{value!r}")
    return "\n".join(lines) + "\n"
