"""Spatial identity self-distillation: object-relative IoU prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .features import xavier_init
from .geometry import as_boxes, pairwise_iou

ORE_MODES = ("add", "subtract", "concatenate", "none")


@dataclass
class IdentityPrediction:
    u: torch.Tensor
    u_prime: torch.Tensor


@dataclass
class IdentityTarget:
    t: torch.Tensor
    t_prime: torch.Tensor


def ore(feats: torch.Tensor, mode: str = "add") -> torch.Tensor:
    """Fuse the bag-mean feature into every proposal row.

    ``feats`` is ``(..., P, D)``; the mean runs over the proposal axis.
    """
    if mode == "none":
        return feats
    mean = feats.mean(dim=-2, keepdim=True).expand_as(feats)
    if mode == "add":
        return feats + mean
    if mode == "subtract":
        return feats - mean
    if mode == "concatenate":
        return torch.cat([feats, mean], dim=-1)
    raise ValueError(f"unknown ORE mode {mode!r}; expected one of {ORE_MODES}")


class IdentityHead(nn.Module):
    def __init__(self, dim: int, ore_mode: str = "add"):
        super().__init__()
        in_dim = 2 * dim if ore_mode == "concatenate" else dim
        self.fc = nn.Linear(in_dim, 1)
        xavier_init(self)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc(feats).squeeze(-1)


def normalize_confidence(u: torch.Tensor) -> torch.Tensor:
    return ((u + 1) / 2).clamp(0.0, 1.0)


def predict_identity(f_star: torch.Tensor, head: IdentityHead) -> IdentityPrediction:
    u = head(f_star)
    return IdentityPrediction(u, normalize_confidence(u))


def identity_targets(bag_boxes, b_hat_star, dtype=torch.float64) -> IdentityTarget:
    """IoU of each proposal with the stage-I merged box and its (-1, 1) rescaling.

    Accepts one bag ``(P, 4)`` with a single box, or ``(M, P, 4)`` with ``(M, 4)``.
    """
    bags = np.asarray(bag_boxes, dtype=np.float64)
    ref = np.asarray(b_hat_star, dtype=np.float64)
    if bags.ndim == 2:
        t = pairwise_iou(bags, as_boxes(ref))[:, 0]
    else:
        t = np.stack([pairwise_iou(b, r[None])[:, 0] for b, r in zip(bags, ref.reshape(-1, 4))])
    t = torch.as_tensor(t, dtype=dtype)
    return IdentityTarget(t, (t - 0.5) / 0.5)


def smooth_l1(x: torch.Tensor, y: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    d = (x - y).abs()
    return torch.where(d < beta, 0.5 * d ** 2 / beta, d - 0.5 * beta)


def sisd_loss(pred: IdentityPrediction | torch.Tensor, bag_boxes, b_hat_star) -> torch.Tensor:
    u = pred.u if isinstance(pred, IdentityPrediction) else pred
    target = identity_targets(bag_boxes, b_hat_star, dtype=u.dtype)
    return smooth_l1(u, target.t_prime.reshape(u.shape)).mean()


def combine_scores(u_prime, s_gt_column):
    """Spatial confidence times class score, elementwise."""
    if isinstance(u_prime, torch.Tensor) or isinstance(s_gt_column, torch.Tensor):
        return torch.as_tensor(u_prime) * torch.as_tensor(s_gt_column)
    u, s = np.asarray(u_prime, dtype=np.float64), np.asarray(s_gt_column, dtype=np.float64)
    if u.shape != s.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {s.shape}")
    return u * s
