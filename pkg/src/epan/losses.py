"""Training losses: label-smoothed cross entropy and batch-hard triplet.

The smoothed cross entropy uses the standard smoothed-target form

    q_i = (1 - eps) * [i == target] + eps / C,   loss = -sum_i q_i * log p_i

with the softmax probabilities clamped at 1e-12 before the log. A variant
that instead puts eps/C inside the log of the target probability alone,
``-log(p_target + eps/C)``, is available behind ``epsilon_inside_log`` for
fidelity experiments; it is not the named regularizer and is off by default.

The triplet term mines, per anchor, the farthest same-label and the nearest
different-label embedding in the batch and penalizes
``max(d_pos^2 - d_neg^2 + margin, 0)`` (squared Euclidean distances by
default; ``squared_distances=False`` switches to plain distances).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import (
    Tensor,
    as_tensor,
    log,
    matmul,
    maximum,
    mean,
    mul,
    reshape,
    sqrt,
    take,
    tensor_sum,
    transpose,
)
from .errors import DimensionError, TripletMiningError, UsageError

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    epsilon: float = 0.1
    margin: float = 0.3
    lambda_triplet: float = 1.0
    label_smooth_enabled: bool = True
    epsilon_inside_log: bool = False
    squared_distances: bool = True

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise UsageError("label smoothing rate must be in [0, 1)")
        if self.margin < 0.0:
            raise UsageError("triplet margin must be >= 0")
        if self.lambda_triplet < 0.0:
            raise UsageError("triplet weight must be >= 0")

    @property
    def effective_epsilon(self) -> float:
        return self.epsilon if self.label_smooth_enabled else 0.0


def lsr_cross_entropy(
    logits: Tensor,
    targets,
    epsilon: float = 0.1,
    epsilon_inside_log: bool = False,
) -> Tensor:
    """Batch-mean smoothed cross entropy of ``logits [B,C]`` vs class indices."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B,C], got {logits.shape}")
    if not 0.0 <= epsilon < 1.0:
        raise UsageError("epsilon must be in [0, 1)")
    targets = np.asarray(targets, dtype=np.intp)
    batch, nclass = logits.shape
    if targets.shape != (batch,):
        raise DimensionError(f"targets must have shape ({batch},), got {targets.shape}")
    if targets.min() < 0 or targets.max() >= nclass:
        raise UsageError(f"targets must lie in [0, {nclass})")

    probs = ops.softmax(logits, axis=1)
    if epsilon_inside_log:
        picked = take(probs, np.arange(batch) * nclass + targets)
        return -mean(log(picked + epsilon / nclass))
    smoothed = np.full((batch, nclass), epsilon / nclass, dtype=logits.dtype)
    smoothed[np.arange(batch), targets] += 1.0 - epsilon
    logp = log(ops.clamp_min(probs, PROB_FLOOR))
    return -tensor_sum(mul(as_tensor(smoothed), logp)) / float(batch)


def _pairwise_sq_dists(embeddings: Tensor) -> Tensor:
    sq = tensor_sum(embeddings * embeddings, axis=1, keepdims=True)  # [B,1]
    cross = matmul(embeddings, transpose(embeddings))
    d2 = sq + transpose(sq) - 2.0 * cross
    return ops.clamp_min(d2, 0.0)  # guard tiny negative round-off


def batch_hard_triplet(
    embeddings: Tensor,
    labels,
    margin: float = 0.3,
    squared_distances: bool = True,
) -> Tensor:
    """Batch-hard mined triplet loss over ``embeddings [B,D]``.

    Per anchor: d_pos is the max distance to a same-label sample, d_neg the
    min distance to a different-label one; the per-anchor hinge terms are
    averaged. Requires at least two labels in the batch.
    """
    if embeddings.ndim != 2:
        raise DimensionError(f"embeddings must be [B,D], got {embeddings.shape}")
    labels = np.asarray(labels)
    batch = embeddings.shape[0]
    if labels.shape != (batch,):
        raise DimensionError(f"labels must have shape ({batch},)")
    same = labels[:, None] == labels[None, :]
    if same.all():
        raise TripletMiningError("batch holds a single label; no negatives to mine")

    d2 = _pairwise_sq_dists(embeddings)
    dvals = d2.data
    pos_masked = np.where(same, dvals, -np.inf)
    neg_masked = np.where(~same, dvals, np.inf)
    pos_idx = pos_masked.argmax(axis=1)
    neg_idx = neg_masked.argmin(axis=1)

    rows = np.arange(batch)
    d_pos = take(d2, rows * batch + pos_idx)
    d_neg = take(d2, rows * batch + neg_idx)
    if not squared_distances:
        # sqrt(0) has no finite slope; the tiny floor keeps gradients finite
        d_pos = sqrt(ops.clamp_min(d_pos, 1e-16))
        d_neg = sqrt(ops.clamp_min(d_neg, 1e-16))
    hinge = maximum(d_pos - d_neg + margin, 0.0)
    return mean(hinge)


def total_loss(
    base_logits: Tensor,
    align_logits: Tensor,
    fused_embed: Tensor,
    targets,
    cfg: LossConfig,
) -> Tensor:
    """Sum of both branch cross entropies plus the weighted triplet term."""
    eps = cfg.effective_epsilon
    loss = lsr_cross_entropy(base_logits, targets, eps, cfg.epsilon_inside_log)
    loss = loss + lsr_cross_entropy(align_logits, targets, eps, cfg.epsilon_inside_log)
    if cfg.lambda_triplet > 0.0:
        trip = batch_hard_triplet(fused_embed, targets, cfg.margin,
                                  cfg.squared_distances)
        loss = loss + cfg.lambda_triplet * trip
    return loss
