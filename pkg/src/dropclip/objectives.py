"""Training objectives, configuration, and the learning-rate schedule.

The contrastive loss is a symmetric InfoNCE over in-batch pairs: cosine
similarities divided by a learnable temperature, cross-entropy against the
diagonal in both directions, averaged. The masked-LM loss is mean cross
entropy over exactly the masked positions; positions that were not masked
contribute nothing. An empty target set is an error rather than a silent
zero, which would hide a broken masking pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, add, exp, l2_normalize, log_softmax, matmul,
                     mean_axis, mul, scale, select_positions, gather_rows,
                     reshape, transpose)

TAU_MIN = 0.01
TAU_MAX = 100.0
NORM_TOL = 1e-5


@dataclass
class DualEmbedding:
    """Matched unit-norm embeddings plus the learnable logit scale.

    The temperature is tau = 1 / exp(logit_scale); similarities are divided
    by tau inside the loss.
    """
    video: Tensor        # (B, P), unit rows
    text: Tensor         # (B, P), unit rows
    logit_scale: Tensor  # scalar


@dataclass(frozen=True)
class LossBreakdown:
    l_con: float
    l_mask: float
    total: float


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the paper-scale values are batch 1024, lr 1e-5,
    50k steps with 4k warmup (same decay, betas, eps, ratios)."""
    steps: int = 2000
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    warmup: int = 100
    drop_ratio: float = 0.9
    mask_ratio: float = 0.15
    lam: float = 1.0            # weight of the masked-LM term
    seed: int = 0
    freeze_text: bool = False
    epoch_steps: int = 100      # snapshot cadence for checkpoint series
    wise_enabled: bool = False
    wise_k: int = 10
    wise_l: int = 3

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.epoch_steps < 1:
            raise ValueError("steps, batch_size and epoch_steps must be >= 1")
        if not 0.0 <= self.drop_ratio < 1.0:
            raise ValueError(f"drop_ratio must be in [0, 1), got {self.drop_ratio}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if self.lam < 0 or self.weight_decay < 0:
            raise ValueError("lam and weight_decay must be non-negative")
        if self.warmup < 0 or self.warmup >= self.steps:
            raise ValueError(f"warmup {self.warmup} outside [0, steps)")

    @property
    def mlm_enabled(self) -> bool:
        return self.lam > 0.0 and self.mask_ratio > 0.0


def embed_pair(video_pooled: Tensor, text_pooled: Tensor,
               logit_scale: Tensor) -> DualEmbedding:
    """Normalize pooled encoder outputs into a DualEmbedding."""
    if video_pooled.shape != text_pooled.shape:
        raise ValueError(f"embedding shapes differ: {video_pooled.shape} "
                         f"vs {text_pooled.shape}")
    return DualEmbedding(video=l2_normalize(video_pooled, axis=-1),
                         text=l2_normalize(text_pooled, axis=-1),
                         logit_scale=logit_scale)


def info_nce(emb: DualEmbedding) -> Tensor:
    """Symmetric contrastive loss over the in-batch similarity matrix."""
    for side, t in (("video", emb.video), ("text", emb.text)):
        norms = np.linalg.norm(t.data, axis=-1)
        if np.abs(norms - 1.0).max() > NORM_TOL:
            raise ValueError(f"{side} rows are not unit-norm (max dev "
                             f"{np.abs(norms - 1.0).max():.3g})")
    b = emb.video.shape[0]
    logits = mul(matmul(emb.video, transpose(emb.text)), exp(emb.logit_scale))
    diag = np.arange(b)
    v2t = scale(mean_axis(select_positions(log_softmax(logits, axis=1), diag)), -1.0)
    t2v = scale(mean_axis(select_positions(log_softmax(logits, axis=0), diag)), -1.0)
    return scale(add(v2t, t2v), 0.5)


def mlm_loss(logits: Tensor, positions: list[np.ndarray],
             targets: list[np.ndarray]) -> Tensor:
    """Mean cross entropy at the masked positions of each row.

    positions[b] and targets[b] come from row b's MaskedText; the mean is
    over all masked positions pooled across the batch.
    """
    b, l, v = logits.shape
    if len(positions) != b or len(targets) != b:
        raise ValueError("need positions and targets for every batch row")
    flat_pos, flat_tgt = [], []
    for row, (pos, tgt) in enumerate(zip(positions, targets)):
        pos, tgt = np.asarray(pos), np.asarray(tgt)
        if pos.shape != tgt.shape:
            raise ValueError(f"row {row}: {len(pos)} positions but {len(tgt)} targets")
        flat_pos.append(row * l + pos)
        flat_tgt.append(tgt)
    flat_pos = np.concatenate(flat_pos).astype(np.int64)
    flat_tgt = np.concatenate(flat_tgt).astype(np.int64)
    if flat_pos.size == 0:
        raise ValueError("no masked positions in the batch")
    picked = gather_rows(reshape(logits, (b * l, v)), flat_pos)
    logp = log_softmax(picked, axis=-1)
    return scale(mean_axis(select_positions(logp, flat_tgt)), -1.0)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr at cfg.warmup, cosine decay to 0 at cfg.steps."""
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup) / span))
