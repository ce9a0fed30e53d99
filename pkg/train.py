import logging
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from config import BaseConfig, LossConfig, MaskParams, ModelConfig, TrainConfig
from core_types import NormStats, PoiVocab
from errors import EmptyDataset, NoMaskedCells, NumericalError
from logging_config import log_performance_metrics, log_training_step
from masking import TaskKind, make_plan
from model import EncodedWindows, ModelOutput, TrajectoryBatch, TrajectoryModel, build_model, loss_gradients, make_batch, save_checkpoint
from utils import write_jsonl

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

# Parameters without weight decay: embeddings and normalization scale/offset
NO_DECAY_NAMES = ('category_embedding.', 'positional', 'modality_state', 'modality_action', 'mask_state', 'mask_action')


def focal_loss(probs_of_true_class: Union[torch.Tensor, Sequence[float]], cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """
    Focal loss summed over masked state cells.

    Computes sum of -alpha * (1 - p)^gamma * log(p), with p floored at
    PROB_FLOOR inside the log.
    """
    probs = torch.as_tensor(probs_of_true_class, dtype=torch.float64) if not torch.is_tensor(probs_of_true_class) else probs_of_true_class
    if probs.numel() == 0:
        raise NoMaskedCells("focal loss over zero masked state cells")
    return -(cfg.alpha * (1.0 - probs) ** cfg.gamma * torch.log(probs.clamp_min(PROB_FLOOR))).sum()


def mse_loss(pred_details: torch.Tensor, true_details: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean error summed over masked action cells."""
    pred_details = torch.as_tensor(pred_details)
    true_details = torch.as_tensor(true_details, dtype=pred_details.dtype)
    if pred_details.shape != true_details.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_details.shape)} vs {tuple(true_details.shape)}")
    if pred_details.numel() == 0:
        raise NoMaskedCells("mse over zero masked action cells")
    return ((pred_details - true_details) ** 2).sum()


def composite_loss(cls: torch.Tensor, reg: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Classification loss plus the regression loss weighted by cfg.lam."""
    return cls + cfg.lam * reg


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor
    n_state: int
    n_action: int

    def record(self, step: int) -> Dict:
        loss_cls = float(self.cls)
        loss_reg = float(self.reg)
        return {
            'step': step,
            'loss_cls': loss_cls,
            'loss_reg': loss_reg,
            'loss_total': float(self.total),
            'masked_state_cells': self.n_state,
            'masked_action_cells': self.n_action,
            'mean_cls': loss_cls / self.n_state if self.n_state else 0.0,
            'mean_reg': loss_reg / self.n_action if self.n_action else 0.0,
        }


def masked_losses(output: ModelOutput, batch: TrajectoryBatch, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """
    Composite loss over the masked cells of a batch.

    A modality with no masked cells contributes zero; a batch with no masked
    cell at all is an error.
    """
    n_state = int(batch.state_mask.sum())
    n_action = int(batch.action_mask.sum())
    if n_state == 0 and n_action == 0:
        raise NoMaskedCells("batch has no masked cells")

    if n_state:
        logits = output.logits[batch.state_mask]
        targets = batch.target_categories[batch.state_mask]
        probs = torch.softmax(logits, dim=-1).gather(1, targets[:, None]).squeeze(1)
        cls = focal_loss(probs, cfg)
    else:
        cls = output.logits.sum() * 0.0

    if n_action:
        reg = mse_loss(output.detail_preds[batch.action_mask], batch.target_details[batch.action_mask])
    else:
        reg = output.detail_preds.sum() * 0.0

    return LossBreakdown(cls, reg, composite_loss(cls, reg, cfg), n_state, n_action)


def is_decay_exempt(name: str) -> bool:
    return name.startswith(NO_DECAY_NAMES) or '_norm.' in name


def build_optimizer(named_params: Mapping[str, nn.Parameter], cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with embeddings and norm parameters exempt from weight decay."""
    decay = [p for name, p in named_params.items() if not is_decay_exempt(name)]
    no_decay = [p for name, p in named_params.items() if is_decay_exempt(name)]
    groups = []
    if decay:
        groups.append({'params': decay, 'weight_decay': cfg.weight_decay})
    if no_decay:
        groups.append({'params': no_decay, 'weight_decay': 0.0})
    return torch.optim.AdamW(
        groups,
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        foreach=False,
    )


def adamw_step(
    named_params: Mapping[str, nn.Parameter],
    grads: Mapping[str, torch.Tensor],
    optimizer: torch.optim.Optimizer
) -> None:
    """
    Apply one AdamW update from a gradient map.

    Decoupled decay (theta <- theta - lr * wd * theta) precedes the
    bias-corrected moment update. The optimizer state holds the moments and
    per-parameter step counters.
    """
    for name, grad in grads.items():
        if not bool(torch.isfinite(grad).all()):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
    for name, param in named_params.items():
        param.grad = grads[name].detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def optimizer_step_count(optimizer: torch.optim.Optimizer) -> int:
    steps = [int(state['step']) for state in optimizer.state.values() if 'step' in state]
    return max(steps, default=0)


def train_step(
    model: TrajectoryModel,
    optimizer: torch.optim.Optimizer,
    batch: TrajectoryBatch,
    loss_cfg: LossConfig,
    generator: torch.Generator
) -> LossBreakdown:
    output = model(batch, mode='train', generator=generator)
    losses = masked_losses(output, batch, loss_cfg)
    grads = loss_gradients(model, losses.total)
    adamw_step(dict(model.named_parameters()), grads, optimizer)
    return LossBreakdown(losses.cls.detach(), losses.reg.detach(), losses.total.detach(), losses.n_state, losses.n_action)


def split_agents(agent_ids: Sequence[str], holdout_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    """
    Deterministic train / held-out partition of agents.

    Returns:
        Tuple[List[str], List[str]]: Sorted train ids and sorted held-out ids
    """
    ids = sorted(agent_ids)
    n_holdout = int(round(len(ids) * holdout_fraction))
    order = np.random.default_rng(seed).permutation(len(ids))
    heldout = sorted(ids[k] for k in order[:n_holdout])
    held = set(heldout)
    return [a for a in ids if a not in held], heldout


@dataclass
class PretrainResult:
    model: TrajectoryModel
    trace: List[Dict] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)


def pretrain(
    encoded: EncodedWindows,
    vocab: PoiVocab,
    stats: NormStats,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    mask_params: MaskParams = MaskParams(),
    output_dir: Optional[str] = None
) -> PretrainResult:
    """
    Masked pretraining loop.

    Each step samples a batch with replacement, draws a random pretraining
    plan per window, and applies one AdamW update. Batch sampling and plans
    come from a numpy generator and dropout from a torch generator, both
    seeded from train_cfg.seed, so a run is reproducible from its seed,
    configs and data.

    Args:
        encoded: Padded training windows
        vocab: Vocabulary saved into checkpoints
        stats: Normalization stats saved into checkpoints
        model_cfg, loss_cfg, train_cfg, mask_params: Run configuration
        output_dir: When given, receives checkpoints and the loss trace

    Returns:
        PretrainResult: Trained model, loss trace and written checkpoint paths
    """
    if len(encoded) == 0:
        raise EmptyDataset("no training windows")
    start_time = time.time()

    model = build_model(model_cfg, seed=train_cfg.seed)
    optimizer = build_optimizer(dict(model.named_parameters()), train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    generator = torch.Generator().manual_seed(train_cfg.seed)
    result = PretrainResult(model)

    for step in range(1, train_cfg.steps + 1):
        indices = rng.integers(len(encoded), size=train_cfg.batch_size)
        plans = [
            make_plan(TaskKind.PRETRAIN_RANDOM, int(encoded.valid_len[i]), encoded.max_len, mask_params, rng)
            for i in indices
        ]
        batch = make_batch(encoded, indices, plans)
        record = train_step(model, optimizer, batch, loss_cfg, generator).record(step)
        result.trace.append(record)

        if step == 1 or step % train_cfg.log_every == 0 or step == train_cfg.steps:
            log_training_step(logger, record)
        if output_dir and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            path = os.path.join(output_dir, f"checkpoint_step{step:06d}.gmtm")
            save_checkpoint(model, vocab, stats, path)
            result.checkpoints.append(path)

    if output_dir:
        final_path = os.path.join(output_dir, BaseConfig.CHECKPOINT_NAME)
        save_checkpoint(model, vocab, stats, final_path)
        result.checkpoints.append(final_path)
        write_jsonl(os.path.join(output_dir, BaseConfig.LOSS_TRACE_NAME), result.trace)

    log_performance_metrics(logger, start_time, time.time(), f"Pretraining ({train_cfg.steps} steps)")
    return result
