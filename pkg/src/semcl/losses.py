"""Differentiable training objectives.

All losses reduce over the batch with a mean, so the trade-off weights are
batch-size independent. Softmaxes are computed via log-softmax for stability;
KL divergences follow the written order D_KL(prediction || target), with the
reverse direction available for ablation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .semantics import DistillTargetMatrix, SoftLabelMatrix


@dataclass(frozen=True)
class LossWeights:
    """Trade-off scalars: lambda1 for soft-label supervision, lambda2 for
    distillation, mu for the semantic term inside the distillation loss."""

    lambda1: float = 0.5
    lambda2: float = 0.1
    mu: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class LogitMatrix:
    """Scaled cosine scores between N image features and K text embeddings."""

    values: torch.Tensor
    scale_beta: float


def _require_unit_rows(x: torch.Tensor, name: str) -> None:
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {tuple(x.shape)}")
    if x.shape[0] == 0:
        return
    norms = torch.linalg.vector_norm(x, dim=1)
    worst = torch.max(torch.abs(norms - 1.0)).item()
    if worst > 1e-4:
        raise ValueError(f"{name} rows must be unit norm (worst deviation {worst:.3g})")


def clip_logits(image_features: torch.Tensor, text_features: torch.Tensor, beta: float) -> LogitMatrix:
    """Cosine similarities scaled by ``beta``: P[i, j] = beta * <I_i, T_j>."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    _require_unit_rows(image_features, "image features")
    _require_unit_rows(text_features, "text features")
    return LogitMatrix(beta * (image_features @ text_features.T), float(beta))


def contrastive_loss(logits: torch.Tensor | LogitMatrix, labels: torch.Tensor | None = None) -> torch.Tensor:
    """Symmetric image/text InfoNCE over a square matched-pair logit matrix.

    Diagonal entries are the positives. When ``labels`` are given, off-diagonal
    entries whose classes coincide are removed from both softmax denominators:
    a duplicated class in the batch is not a genuine negative.
    """
    p = logits.values if isinstance(logits, LogitMatrix) else logits
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"contrastive pairing needs a square logit matrix, got {tuple(p.shape)}")
    n = p.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if labels is not None:
        same = labels.view(-1, 1) == labels.view(1, -1)
        off_diag_dup = same & ~torch.eye(n, dtype=torch.bool, device=p.device)
        p = p.masked_fill(off_diag_dup, float("-inf"))
    diag = torch.arange(n, device=p.device)
    image_loss = -F.log_softmax(p, dim=1)[diag, diag].mean()
    text_loss = -F.log_softmax(p, dim=0)[diag, diag].mean()
    return (image_loss + text_loss) / 2


def _kl_rows(log_p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    """Mean over rows of sum_j p_j * (log p_j - log q_j)."""
    p = torch.exp(log_p)
    return (p * (log_p - log_q)).sum(dim=1).mean()


def sg_rl_loss(
    task_logits: torch.Tensor,
    labels: torch.Tensor,
    targets: SoftLabelMatrix,
    reverse_kl: bool = False,
) -> torch.Tensor:
    """KL between the per-sample prediction and its class's softened target row."""
    k = targets.num_classes
    if task_logits.shape[1] != k:
        raise ValueError(
            f"logit width {task_logits.shape[1]} does not match {k} soft-label classes"
        )
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("labels out of range for the soft-label matrix")
    log_pred = F.log_softmax(task_logits, dim=1)
    target_rows = torch.tensor(
        targets.values, dtype=task_logits.dtype, device=task_logits.device
    )[labels]
    log_target = torch.log(target_rows)
    if reverse_kl:
        return _kl_rows(log_target, log_pred)
    return _kl_rows(log_pred, log_target)


def naive_kd_loss(
    cur_old_logits: torch.Tensor,
    prev_old_logits: torch.Tensor,
    reverse_kl: bool = False,
) -> torch.Tensor:
    """Distill old-class predictions toward the previous model's, as written:
    mean KL(softmax(current row) || softmax(previous row))."""
    if cur_old_logits.shape != prev_old_logits.shape:
        raise ValueError("current and previous logits must have identical shapes")
    if cur_old_logits.shape[1] == 0:
        raise ValueError("no old classes; skip distillation on the first task")
    log_cur = F.log_softmax(cur_old_logits, dim=1)
    log_prev = F.log_softmax(prev_old_logits, dim=1)
    if reverse_kl:
        return _kl_rows(log_prev, log_cur)
    return _kl_rows(log_cur, log_prev)


def sg_kd_loss(
    cur_old_logits: torch.Tensor,
    prev_old_logits: torch.Tensor,
    target_rows: torch.Tensor | np.ndarray,
    mu: float,
    reverse_kl: bool = False,
) -> torch.Tensor:
    """Distillation with a semantic prior: the previous-model term plus
    mu * KL(current predictions || per-sample semantic target rows).

    ``target_rows`` holds one distribution over old classes per sample,
    selected from a :class:`DistillTargetMatrix` by the sample's class.
    """
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    base = naive_kd_loss(cur_old_logits, prev_old_logits, reverse_kl=reverse_kl)
    if mu == 0:
        return base
    if isinstance(target_rows, np.ndarray):
        rows = torch.tensor(
            np.ascontiguousarray(target_rows),
            dtype=cur_old_logits.dtype,
            device=cur_old_logits.device,
        )
    else:
        rows = target_rows.to(dtype=cur_old_logits.dtype, device=cur_old_logits.device)
    if rows.shape != cur_old_logits.shape:
        raise ValueError("need one target row per sample with one entry per old class")
    log_cur = F.log_softmax(cur_old_logits, dim=1)
    log_target = torch.log(rows)
    if reverse_kl:
        semantic = _kl_rows(log_target, log_cur)
    else:
        semantic = _kl_rows(log_cur, log_target)
    return base + mu * semantic


def select_target_rows(targets: DistillTargetMatrix, class_indices: torch.Tensor) -> np.ndarray:
    """Pick the distillation target distribution for each sample's class."""
    return targets.values[class_indices.cpu().numpy()]


def total_loss(
    contrastive: torch.Tensor | float,
    sg_rl: torch.Tensor | float,
    sg_kd: torch.Tensor | float,
    weights: LossWeights,
    first_task: bool,
) -> torch.Tensor:
    """Weighted objective; the distillation term is forced to zero on the first task."""
    for name, value in (("contrastive", contrastive), ("sg_rl", sg_rl), ("sg_kd", sg_kd)):
        v = float(value.detach() if isinstance(value, torch.Tensor) else value)
        if v < -1e-6:
            raise ValueError(f"{name} component is negative ({v:.3g})")
    total = contrastive + weights.lambda1 * sg_rl
    if not first_task:
        total = total + weights.lambda2 * sg_kd
    if isinstance(total, torch.Tensor):
        return total
    return torch.as_tensor(total, dtype=torch.float64)
