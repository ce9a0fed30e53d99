"""
Bi-directional masked trajectory encoder.

Each stop contributes two tokens sharing a position index: a state token
(POI category) and an action token (detail vector). Tokens are interleaved
as state_0, action_0, state_1, action_1, ... and run through pre-norm
Transformer blocks. The classification head reads state tokens, the
regression head reads action tokens.

The checkpoint format is a small binary container:

    b'GMTM' | version (uint32 LE) | header length (uint32 LE) | JSON header | float32 LE payloads

The header holds the model config, vocabulary, normalization stats and a
tensor manifest (name, shape, byte offset) in payload order.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from config import ModelConfig, config_from_dict
from core_types import D_DETAIL, NormStats, PoiVocab, StopPoint, normalize_stops
from errors import ConfigError, FormatError, NumericalError, StateError, TrajmaskError, ValidationError, VocabError
from masking import MaskPlan
from utils import atomic_write_bytes, file_sha256

logger = logging.getLogger(__name__)

MAGIC = b'GMTM'
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct('<4sII')


@dataclass
class EncodedWindows:
    """Windows converted to padded arrays, ready to be sliced into batches."""
    category_ids: np.ndarray   # (N, L) int64
    details: np.ndarray        # (N, L, 5) float64
    valid_len: np.ndarray      # (N,) int64

    def __len__(self) -> int:
        return len(self.valid_len)

    @property
    def max_len(self) -> int:
        return self.category_ids.shape[1]


@dataclass
class TrajectoryBatch:
    category_ids: torch.Tensor       # (B, L) long
    detail_vecs: torch.Tensor        # (B, L, 5)
    valid_mask: torch.Tensor         # (B, L) bool
    state_mask: torch.Tensor         # (B, L) bool
    action_mask: torch.Tensor        # (B, L) bool
    target_categories: torch.Tensor  # (B, L) long
    target_details: torch.Tensor     # (B, L, 5)
    plans: List[MaskPlan]

    @property
    def batch_size(self) -> int:
        return self.category_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.category_ids.shape[1]

    def to(self, dtype: torch.dtype) -> 'TrajectoryBatch':
        return TrajectoryBatch(
            self.category_ids, self.detail_vecs.to(dtype), self.valid_mask,
            self.state_mask, self.action_mask, self.target_categories,
            self.target_details.to(dtype), self.plans,
        )


@dataclass
class ModelOutput:
    logits: torch.Tensor          # (B, L, n_classes)
    detail_preds: torch.Tensor    # (B, L, 5)
    attentions: Optional[List[torch.Tensor]] = None


def encode_windows(
    windows: Sequence[Sequence[StopPoint]],
    vocab: PoiVocab,
    stats: NormStats,
    max_len: int
) -> EncodedWindows:
    """
    Pad windows to max_len and normalize their details.

    PAD cells get the PAD category and zeroed details.
    """
    n = len(windows)
    category_ids = np.full((n, max_len), vocab.pad_index, dtype=np.int64)
    details = np.zeros((n, max_len, D_DETAIL), dtype=np.float64)
    valid_len = np.zeros(n, dtype=np.int64)
    for row, window in enumerate(windows):
        if len(window) > max_len:
            raise ConfigError(f"window of {len(window)} stops exceeds max_len {max_len}")
        ids = [stop.category for stop in window]
        if any(not 0 <= c < vocab.n_real for c in ids):
            raise VocabError(f"window {row} holds a category outside the vocabulary")
        category_ids[row, :len(window)] = ids
        details[row, :len(window)] = normalize_stops(window, stats)
        valid_len[row] = len(window)
    return EncodedWindows(category_ids, details, valid_len)


def make_batch(
    encoded: EncodedWindows,
    indices: Sequence[int],
    plans: Sequence[MaskPlan],
    dtype: torch.dtype = torch.float32
) -> TrajectoryBatch:
    """Select windows by index and attach their mask plans."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(plans) != len(indices):
        raise ValueError("one mask plan per selected window is required")
    category_ids = torch.from_numpy(encoded.category_ids[indices].copy())
    details = torch.from_numpy(encoded.details[indices].copy()).to(dtype)
    positions = np.arange(encoded.max_len)
    valid = torch.from_numpy(positions[None, :] < encoded.valid_len[indices][:, None])
    state = torch.from_numpy(np.stack([p.state_mask for p in plans]))
    action = torch.from_numpy(np.stack([p.action_mask for p in plans]))
    if bool((state & ~valid).any()) or bool((action & ~valid).any()):
        raise ValidationError("mask plan covers a PAD cell")
    return TrajectoryBatch(
        category_ids=category_ids,
        detail_vecs=details,
        valid_mask=valid,
        state_mask=state,
        action_mask=action,
        target_categories=category_ids.clone(),
        target_details=details.clone(),
        plans=list(plans),
    )


def _dropout(x: torch.Tensor, p: float, generator: Optional[torch.Generator], training: bool) -> torch.Tensor:
    """Inverted dropout drawing its mask from an explicit generator."""
    if not training or p == 0.0:
        return x
    if generator is None:
        raise StateError("train-mode forward needs a torch.Generator for dropout")
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class EncoderBlock(nn.Module):
    """Pre-norm self-attention and GELU feed-forward, each with a residual."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.attn_norm = nn.LayerNorm(cfg.d_model, eps=cfg.layer_norm_eps)
        self.q_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.k_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.v_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.o_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ff_norm = nn.LayerNorm(cfg.d_model, eps=cfg.layer_norm_eps)
        self.ff_in = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff_out = nn.Linear(cfg.d_ff, cfg.d_model)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, tokens, _ = x.shape
        return x.view(batch, tokens, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        pad_tokens: torch.Tensor,
        dropout_p: float,
        generator: Optional[torch.Generator],
        training: bool
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        batch, tokens, d_model = x.shape
        h = self.attn_norm(x)
        q = self._split_heads(self.q_proj(h))
        k = self._split_heads(self.k_proj(h))
        v = self._split_heads(self.v_proj(h))

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(pad_tokens[:, None, None, :], float('-inf'))
        attn = torch.softmax(scores, dim=-1)
        context = (attn @ v).transpose(1, 2).reshape(batch, tokens, d_model)
        x = x + _dropout(self.o_proj(context), dropout_p, generator, training)

        h = self.ff_norm(x)
        x = x + _dropout(self.ff_out(F.gelu(self.ff_in(h))), dropout_p, generator, training)
        return x, attn


class TrajectoryModel(nn.Module):
    """Embeddings, encoder blocks and the two prediction heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        d = cfg.d_model
        self.category_embedding = nn.Embedding(cfg.vocab_size, d)
        self.detail_projection = nn.Linear(cfg.d_detail, d)
        self.modality_state = nn.Parameter(torch.zeros(d))
        self.modality_action = nn.Parameter(torch.zeros(d))
        self.positional = nn.Parameter(torch.zeros(cfg.max_len, d))
        self.mask_state = nn.Parameter(torch.zeros(d))
        self.mask_action = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList([EncoderBlock(cfg) for _ in range(cfg.n_layers)])
        self.classification_head = nn.Linear(d, cfg.n_classes)
        self.regression_head = nn.Linear(d, cfg.d_detail)

    def init_parameters(self, generator: torch.Generator) -> None:
        """Normal(0, init_std) weights, zero biases, unit norm scales."""
        with torch.no_grad():
            for name, param in self.named_parameters():
                if '_norm.' in name:
                    param.fill_(1.0 if name.endswith('weight') else 0.0)
                elif name.endswith('.bias'):
                    param.zero_()
                else:
                    param.normal_(0.0, self.config.init_std, generator=generator)

    def embed(self, batch: TrajectoryBatch) -> torch.Tensor:
        """
        Build the interleaved (B, 2L, d_model) token tensor.

        Masked cells use their modality's MASK embedding in place of the
        content term.
        """
        ids = batch.category_ids
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise VocabError(
                f"category index out of range [0, {self.config.vocab_size}): "
                f"min {int(ids.min())}, max {int(ids.max())}"
            )
        batch_size, seq_len = ids.shape
        if seq_len > self.config.max_len:
            raise ConfigError(f"sequence length {seq_len} exceeds max_len {self.config.max_len}")

        category = self.category_embedding(ids)
        detail = self.detail_projection(batch.detail_vecs)
        category = torch.where(batch.state_mask[..., None], self.mask_state, category)
        detail = torch.where(batch.action_mask[..., None], self.mask_action, detail)

        position = self.positional[:seq_len]
        state_tokens = category + position + self.modality_state
        action_tokens = detail + position + self.modality_action
        return torch.stack([state_tokens, action_tokens], dim=2).reshape(batch_size, 2 * seq_len, -1)

    def forward(
        self,
        batch: TrajectoryBatch,
        mode: str = 'eval',
        generator: Optional[torch.Generator] = None,
        return_attention: bool = False
    ) -> ModelOutput:
        if mode not in ('train', 'eval'):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == 'train'
        x = self.embed(batch)
        batch_size, seq_len = batch.valid_mask.shape
        pad_tokens = (~batch.valid_mask)[:, :, None].expand(batch_size, seq_len, 2).reshape(batch_size, 2 * seq_len)

        attentions = []
        for layer, block in enumerate(self.blocks):
            x, attn = block(x, pad_tokens, self.config.dropout_p, generator, training)
            if not bool(torch.isfinite(x).all()):
                raise NumericalError("non-finite activations", layer=layer)
            if return_attention:
                attentions.append(attn)

        logits = self.classification_head(x[:, 0::2])
        detail_preds = self.regression_head(x[:, 1::2])
        return ModelOutput(logits, detail_preds, attentions if return_attention else None)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> TrajectoryModel:
    """
    Create a model with seeded parameter initialization.

    The same config and seed always produce identical weights, independent
    of the global torch RNG state.
    """
    model = TrajectoryModel(cfg)
    model.init_parameters(torch.Generator().manual_seed(seed))
    return model.to(dtype)


def _gradient_map(
    model: nn.Module,
    outputs: Sequence[torch.Tensor],
    grad_outputs: Optional[Sequence[torch.Tensor]],
    retain_graph: bool
) -> Dict[str, torch.Tensor]:
    if any(o.grad_fn is None for o in outputs):
        raise StateError("no activation cache: run forward in train mode with gradients enabled")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(
        outputs, params, grad_outputs=grad_outputs, retain_graph=retain_graph, allow_unused=True,
    )
    return {
        name: torch.zeros_like(param) if grad is None else grad
        for name, param, grad in zip(names, params, grads)
    }


def backward(
    model: TrajectoryModel,
    output: ModelOutput,
    loss_grads: Tuple[torch.Tensor, torch.Tensor],
    retain_graph: bool = False
) -> Dict[str, torch.Tensor]:
    """
    Reverse-mode gradients of every parameter given output gradients.

    Args:
        model: Model that produced output
        output: Result of a forward pass with gradients enabled
        loss_grads: dLoss/dlogits and dLoss/ddetail_preds
        retain_graph: Keep the activation graph for another backward

    Returns:
        Dict[str, Tensor]: One gradient per named parameter, zero where no path exists
    """
    return _gradient_map(model, [output.logits, output.detail_preds], list(loss_grads), retain_graph)


def loss_gradients(model: TrajectoryModel, loss: torch.Tensor, retain_graph: bool = False) -> Dict[str, torch.Tensor]:
    """Gradients of a scalar loss with respect to every named parameter."""
    return _gradient_map(model, [loss], None, retain_graph)


@dataclass
class Checkpoint:
    model: TrajectoryModel
    config: ModelConfig
    vocab: PoiVocab
    stats: NormStats


def save_checkpoint(model: TrajectoryModel, vocab: PoiVocab, stats: NormStats, path: str) -> None:
    """Write model tensors and metadata atomically to path."""
    cfg = model.config
    if vocab.size != cfg.vocab_size:
        raise VocabError(f"vocabulary size {vocab.size} does not match model vocab_size {cfg.vocab_size}")
    manifest = []
    payloads = []
    offset = 0
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().numpy().astype('<f4')
        manifest.append({'name': name, 'shape': list(array.shape), 'offset': offset})
        payloads.append(array.tobytes())
        offset += array.nbytes
    header = json.dumps({
        'model_config': asdict(cfg),
        'vocab': vocab.to_dict(),
        'norm_stats': stats.to_dict(),
        'tensors': manifest,
    }, sort_keys=True).encode('utf-8')
    blob = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b''.join(payloads)
    atomic_write_bytes(path, blob)
    logger.info(f"Saved checkpoint with {len(manifest)} tensors to {path}")


def read_checkpoint_header(data: bytes) -> Tuple[Dict, int]:
    """Parse and check the preamble and JSON header; return (header, payload start)."""
    if len(data) < _PREAMBLE.size:
        raise FormatError("file too short for a checkpoint preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    start = _PREAMBLE.size + header_len
    if start > len(data):
        raise FormatError("header extends past end of file")
    try:
        header = json.loads(data[_PREAMBLE.size:start].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt header: {e}") from e
    for key in ('model_config', 'vocab', 'norm_stats', 'tensors'):
        if not isinstance(header, dict) or key not in header:
            raise FormatError(f"header lacks '{key}'")
    _check_tensor_table(header['tensors'])
    return header, start


def _check_tensor_table(tensors) -> None:
    if not isinstance(tensors, list):
        raise FormatError("header 'tensors' must be a list")
    for k, entry in enumerate(tensors):
        if not isinstance(entry, dict):
            raise FormatError(f"tensor table entry {k} is not an object")
        name = entry.get('name')
        if not isinstance(name, str):
            raise FormatError(f"tensor table entry {k} has no string 'name'")
        shape = entry.get('shape')
        if not isinstance(shape, list) or not all(_is_count(dim) for dim in shape):
            raise FormatError("'shape' must be a list of non-negative integers", tensor=name)
        if not _is_count(entry.get('offset')):
            raise FormatError("'offset' must be a non-negative integer", tensor=name)


def _is_count(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Every tensor is checked against the shapes implied by the header's model
    config before any model is returned.
    """
    with open(path, 'rb') as f:
        data = f.read()
    header, start = read_checkpoint_header(data)
    try:
        cfg = config_from_dict(ModelConfig, header['model_config'])
        vocab = PoiVocab.from_dict(header['vocab'])
        stats = NormStats.from_dict(header['norm_stats'])
    except (TrajmaskError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"invalid header metadata: {e}") from e
    if vocab.size != cfg.vocab_size:
        raise FormatError(f"header vocabulary has size {vocab.size} but model_config says {cfg.vocab_size}")

    model = TrajectoryModel(cfg)
    expected = {name: tuple(t.shape) for name, t in model.state_dict().items()}
    manifest = header['tensors']
    if sorted(entry.get('name') for entry in manifest) != sorted(expected):
        raise FormatError("tensor manifest does not match the model layout")

    state = {}
    offset = 0
    payload = data[start:]
    for entry in manifest:
        name, shape = entry['name'], tuple(entry['shape'])
        if shape != expected[name]:
            raise FormatError(f"shape {shape} does not match expected {expected[name]}", tensor=name)
        if entry['offset'] != offset:
            raise FormatError(f"offset {entry['offset']} out of sequence (expected {offset})", tensor=name)
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise FormatError("payload truncated", tensor=name)
        array = np.frombuffer(payload, dtype='<f4', count=nbytes // 4, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(array.astype(np.float32))
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes after the last tensor")

    model.load_state_dict(state)
    return Checkpoint(model, cfg, vocab, stats)


def checkpoint_digest(path: str) -> str:
    """Hex SHA-256 of the checkpoint file bytes, as recorded in run manifests."""
    return file_sha256(path)
