"""
Downstream task evaluation and reporting.

Metrics are computed over masked state cells only: accuracy, recall range
(max minus min per-class recall over classes with support) and bias ratio
(predicted over actual frequency of the majority class).
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
from joblib import Parallel, delayed

from config import MaskParams
from errors import EmptyDataset, NoSamples
from ingest import StopDataset, check_vocab, dataset_windows
from logging_config import log_performance_metrics, log_task_result
from masking import EVAL_TASKS, TaskKind, make_plan
from model import Checkpoint, EncodedWindows, TrajectoryModel, encode_windows, make_batch
from utils import atomic_write_text, dumps_jsonl

logger = logging.getLogger(__name__)

TASK_TITLES = {
    TaskKind.INVERSE_DYNAMICS: 'ID',
    TaskKind.FORWARD_DYNAMICS: 'FD',
    TaskKind.RANDOM: 'Random',
    TaskKind.GOAL: 'Goal',
}

LABEL_WIDTH = 12
METRIC_WIDTH = 7
TASK_WIDTH = 3 * METRIC_WIDTH


def _as_pair(preds, labels) -> Tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if len(preds) != len(labels):
        raise ValueError(f"preds and labels differ in length: {len(preds)} vs {len(labels)}")
    if len(labels) == 0:
        raise NoSamples("no masked state cells to score")
    return preds, labels


def accuracy(preds, labels) -> float:
    """Share of masked state cells whose category was predicted correctly."""
    preds, labels = _as_pair(preds, labels)
    return int((preds == labels).sum()) / len(labels)


def per_class_recall(preds, labels) -> Dict[int, float]:
    """Recall of every class that has at least one true instance."""
    preds, labels = _as_pair(preds, labels)
    support = np.bincount(labels)
    correct = np.bincount(labels[preds == labels], minlength=len(support))
    return {k: int(correct[k]) / int(support[k]) for k in np.flatnonzero(support).tolist()}


def recall_range(preds, labels) -> float:
    """Spread between the best and worst recalled class; 0.0 means every class is recalled equally."""
    recalls = list(per_class_recall(preds, labels).values())
    return max(recalls) - min(recalls)


def bias_ratio(preds, labels) -> float:
    """
    Predicted frequency of the majority class over its true frequency.

    The majority class is the most frequent label; ties go to the lowest
    class index.
    """
    preds, labels = _as_pair(preds, labels)
    majority = int(np.argmax(np.bincount(labels)))
    return int((preds == majority).sum()) / int((labels == majority).sum())


@dataclass
class TaskResult:
    """One report row."""
    task: TaskKind
    accuracy: float
    recall_range: float
    bias_ratio: float
    per_class_recall: Dict[str, float] = field(default_factory=dict)
    n_masked_state: int = 0
    n_masked_action: int = 0
    mse: float = 0.0

    def to_record(self) -> Dict:
        return {
            'task': self.task.value,
            'accuracy': self.accuracy,
            'recall_range': self.recall_range,
            'bias_ratio': self.bias_ratio,
            'per_class_recall': dict(self.per_class_recall),
            'n_masked_state': self.n_masked_state,
            'n_masked_action': self.n_masked_action,
            'mse': self.mse,
        }


def _infer_chunk(
    model: TrajectoryModel,
    encoded: EncodedWindows,
    indices: np.ndarray,
    plans: Sequence
) -> Tuple[np.ndarray, np.ndarray, float, int]:
    batch = make_batch(encoded, indices, plans)
    with torch.no_grad():
        output = model(batch, mode='eval')
    preds = output.logits[batch.state_mask].argmax(dim=-1)
    labels = batch.target_categories[batch.state_mask]
    diff = output.detail_preds[batch.action_mask] - batch.target_details[batch.action_mask]
    return (
        preds.numpy(),
        labels.numpy(),
        float((diff.double() ** 2).sum()),
        int(batch.action_mask.sum()),
    )


def run_task(
    checkpoint: Checkpoint,
    dataset: StopDataset,
    kind: TaskKind,
    seed: int = 0,
    batch_size: int = 64,
    mask_params: MaskParams = MaskParams(),
    workers: int = 1
) -> TaskResult:
    """
    Evaluate one downstream task over every window of a dataset.

    Details are normalized with the checkpoint's stats. Plans are built in
    window order from a generator seeded with seed, so the result does not
    depend on batch_size or workers.

    Args:
        checkpoint: Loaded model, config, vocabulary and stats
        dataset: Stops to evaluate on; its vocabulary must match the checkpoint's
        kind: Task to run
        seed: Seed for the Random task's plans
        batch_size: Windows per forward pass
        mask_params: Ratios and split fraction
        workers: Parallel threads for inference

    Returns:
        TaskResult: Metrics aggregated over all masked cells
    """
    start_time = time.time()
    kind = TaskKind(kind)
    check_vocab(checkpoint.vocab, dataset.vocab)

    max_len = checkpoint.config.max_len
    windows = dataset_windows(dataset, max_len)
    if not windows:
        raise EmptyDataset("dataset produced no evaluation windows")
    encoded = encode_windows(windows, checkpoint.vocab, checkpoint.stats, max_len)

    rng = np.random.default_rng(seed)
    plans = [make_plan(kind, int(n), max_len, mask_params, rng) for n in encoded.valid_len]

    model = checkpoint.model
    model.eval()
    chunks = [np.arange(k, min(k + batch_size, len(encoded))) for k in range(0, len(encoded), batch_size)]
    results = Parallel(n_jobs=workers, backend='threading')(
        delayed(_infer_chunk)(model, encoded, idx, [plans[i] for i in idx]) for idx in chunks
    )

    preds = np.concatenate([r[0] for r in results])
    labels = np.concatenate([r[1] for r in results])
    squared_error = sum(r[2] for r in results)
    n_action = sum(r[3] for r in results)

    recalls = per_class_recall(preds, labels)
    result = TaskResult(
        task=kind,
        accuracy=accuracy(preds, labels),
        recall_range=recall_range(preds, labels),
        bias_ratio=bias_ratio(preds, labels),
        per_class_recall={checkpoint.vocab.category(k): v for k, v in recalls.items()},
        n_masked_state=len(labels),
        n_masked_action=n_action,
        mse=squared_error / n_action if n_action else 0.0,
    )
    log_task_result(logger, result.to_record())
    log_performance_metrics(logger, start_time, time.time(), f"Task {kind.value}")
    return result


def _ordered(rows: Sequence[TaskResult]) -> List[TaskResult]:
    order = {task: k for k, task in enumerate(EVAL_TASKS)}
    return sorted(rows, key=lambda row: order.get(row.task, len(order)))


ReportGroup = Tuple[str, Sequence[TaskResult]]


def render_grouped_report(groups: Sequence[ReportGroup]) -> Tuple[str, str]:
    """
    Render labeled groups of task rows as one fixed-width table.

    Each group (a dataset or sub-task scenario) becomes one data line, in
    the order given. Tasks appear in the order ID, FD, Random, Goal, each with
    Acc., Rec. and Bias columns rounded to two decimals; every group must
    cover the same tasks. The JSON lines keep full precision and carry the
    group label under 'dataset'.

    Args:
        groups: (label, rows) pairs

    Returns:
        Tuple[str, str]: Table text and JSON-lines text

    Raises:
        ValueError: If there are no groups, a group is empty, or groups
            cover different tasks
    """
    if not groups:
        raise ValueError("cannot render a report without task rows")
    ordered = []
    for label, rows in groups:
        if not rows:
            raise ValueError(f"no task rows for '{label}'")
        ordered.append((label, _ordered(rows)))
    tasks = [row.task for row in ordered[0][1]]
    for label, rows in ordered[1:]:
        if [row.task for row in rows] != tasks:
            raise ValueError(f"'{label}' covers different tasks than '{ordered[0][0]}'")

    label_width = max(LABEL_WIDTH, max(len(label) for label, _ in ordered) + 2)
    titles = ''.join(f"{TASK_TITLES.get(task, task.value):^{TASK_WIDTH}}" for task in tasks)
    metrics = ''.join(
        f"{'Acc.':>{METRIC_WIDTH}}{'Rec.':>{METRIC_WIDTH}}{'Bias':>{METRIC_WIDTH}}" for _ in tasks
    )
    lines = [
        (' ' * label_width + titles).rstrip(),
        ' ' * label_width + metrics,
        '-' * (label_width + TASK_WIDTH * len(tasks)),
    ]
    records = []
    for label, rows in ordered:
        values = ''.join(
            f"{row.accuracy:>{METRIC_WIDTH}.2f}{row.recall_range:>{METRIC_WIDTH}.2f}{row.bias_ratio:>{METRIC_WIDTH}.2f}"
            for row in rows
        )
        lines.append(f"{label:<{label_width}}" + values)
        records.extend({'dataset': label, **row.to_record()} for row in rows)
    return '\n'.join(lines) + '\n', dumps_jsonl(records)


def render_report(rows: Sequence[TaskResult], dataset_name: str = 'dataset') -> Tuple[str, str]:
    """Render the rows of a single dataset; see render_grouped_report."""
    return render_grouped_report([(dataset_name, rows)])


def write_report(groups: Sequence[ReportGroup], table_path: str, jsonl_path: str) -> str:
    table, jsonl = render_grouped_report(groups)
    atomic_write_text(table_path, table)
    atomic_write_text(jsonl_path, jsonl)
    logger.info(f"Wrote report for {len(groups)} dataset(s) to {table_path} and {jsonl_path}")
    return table


def run_tasks(
    checkpoint: Checkpoint,
    dataset: StopDataset,
    tasks: Sequence[TaskKind],
    seed: int = 0,
    batch_size: int = 64,
    mask_params: MaskParams = MaskParams(),
    workers: int = 1
) -> List[TaskResult]:
    return [run_task(checkpoint, dataset, task, seed, batch_size, mask_params, workers) for task in tasks]
