"""Two-stream MIL scoring, the two stage losses and refined-box selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .features import xavier_init
from .geometry import BoundingBox, as_boxes, weighted_merge

EPS = 1e-7


@dataclass
class BagScores:
    """Scores for one or more bags; leading dims ``(..., P, K)``."""

    o_cls: torch.Tensor
    o_ins: torch.Tensor
    s_cls: torch.Tensor
    s_ins: torch.Tensor
    s: torch.Tensor
    s_bag: torch.Tensor  # (..., K)


@dataclass
class StageOutput:
    refined_box: BoundingBox
    bag_score_of_gt_class: float
    selected_indices: np.ndarray
    selected_weights: np.ndarray


class MILHead(nn.Module):
    """Classification and instance-selection branches on top of bag features."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.cls = nn.Linear(dim, num_classes)
        self.ins = nn.Linear(dim, num_classes)
        xavier_init(self)

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.cls(feats), self.ins(feats)


def scores_from_logits(o_cls: torch.Tensor, o_ins: torch.Tensor, stage: int = 1) -> BagScores:
    """Stage 1 softmaxes the class logits over K, stage 2 applies a sigmoid.

    The instance logits are always softmaxed over the proposal axis (dim -2).
    """
    if stage == 1:
        s_cls = torch.softmax(o_cls, dim=-1)
    elif stage == 2:
        s_cls = torch.sigmoid(o_cls)
    else:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    s_ins = torch.softmax(o_ins, dim=-2)
    s = s_cls * s_ins
    return BagScores(o_cls, o_ins, s_cls, s_ins, s, s.sum(dim=-2))


def score_bag(feats: torch.Tensor, head: MILHead, stage: int = 1) -> BagScores:
    o_cls, o_ins = head(feats)
    return scores_from_logits(o_cls, o_ins, stage)


def stage1_loss(s_bag: torch.Tensor, c: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Binary cross-entropy between bag scores and the one-hot label, summed over classes.

    Batched inputs ``(M, K)`` give the mean over bags.
    """
    p = s_bag.clamp(eps, 1 - eps)
    per_bag = -(c * torch.log(p) + (1 - c) * torch.log(1 - p)).sum(dim=-1)
    return per_bag.mean()


def focal_loss(p: torch.Tensor, y: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25,
               eps: float = EPS) -> torch.Tensor:
    """Elementwise focal loss on probabilities."""
    p = torch.as_tensor(p).clamp(eps, 1 - eps)
    y = torch.as_tensor(y, dtype=p.dtype)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p ** gamma * torch.log(1 - p)
    return y * pos + (1 - y) * neg


def stage2_loss(
    s_bag: torch.Tensor,
    c: torch.Tensor,
    stage1_gt_score: torch.Tensor,
    beta,
    negative_scores: torch.Tensor | None = None,
    gamma: float = 2.0,
    alpha: float = 0.25,
) -> torch.Tensor:
    """Stage-I-weighted focal loss on bag scores plus the beta-weighted background term.

    ``s_bag`` and ``c`` are ``(M, K)``, ``stage1_gt_score`` is ``(M,)`` and
    ``negative_scores`` is ``(N, K)`` sigmoid class scores of negative boxes.
    Returns the sum over bags and negatives; callers normalize.
    """
    s_bag = s_bag.reshape(-1, s_bag.shape[-1])
    c = c.reshape(s_bag.shape)
    w = torch.as_tensor(stage1_gt_score, dtype=s_bag.dtype).reshape(-1)
    pos = (w * focal_loss(s_bag, c, gamma, alpha).sum(dim=-1)).sum()
    if negative_scores is None or negative_scores.numel() == 0:
        return pos
    neg = focal_loss(negative_scores, torch.zeros_like(negative_scores), gamma, alpha).sum()
    return pos + beta * neg


def select_refined_box(bag, per_proposal_scores, k: int, bag_score_of_gt_class: float = float("nan")) -> StageOutput:
    """Merge the top-``k`` proposals of one bag by their gt-class scores."""
    boxes = as_boxes(bag)
    scores = np.asarray(per_proposal_scores, dtype=np.float64).reshape(-1)
    box, idx, w = weighted_merge(boxes, scores, k)
    return StageOutput(box, float(bag_score_of_gt_class), idx, w)
