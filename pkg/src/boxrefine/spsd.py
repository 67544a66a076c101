"""Spatial position self-distillation: bag regression heads and their loss.

The per-scene orchestration (``interactive_refine``) lives here as well; the
heavy lifting for a whole mini-batch is in :mod:`boxrefine.model`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import as_boxes, clip_boxes, sample_negatives


@dataclass
class RegressedBag:
    boxes: np.ndarray  # (P, 4)
    deltas: torch.Tensor  # (P, 4)
    source_bag_id: int = 0
    stage: str = "I"


class RegressionHead(nn.Module):
    """Linear layer predicting ``(dx, dy, dw, dh)`` per proposal."""

    def __init__(self, dim: int, init_gain: float = 0.01):
        super().__init__()
        self.fc = nn.Linear(dim, 4)
        nn.init.xavier_uniform_(self.fc.weight, gain=init_gain)
        nn.init.zeros_(self.fc.bias)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc(feats)

    def zero_(self) -> "RegressionHead":
        with torch.no_grad():
            self.fc.weight.zero_()
            self.fc.bias.zero_()
        return self


def encode_boxes(src, tgt):
    """Deltas taking ``src`` onto ``tgt``; works on numpy arrays or tensors of shape ``(..., 4)``."""
    lib = torch if isinstance(src, torch.Tensor) else np
    scx = src[..., 0] + src[..., 2] / 2
    scy = src[..., 1] + src[..., 3] / 2
    tcx = tgt[..., 0] + tgt[..., 2] / 2
    tcy = tgt[..., 1] + tgt[..., 3] / 2
    return lib.stack(
        [
            (tcx - scx) / src[..., 2],
            (tcy - scy) / src[..., 3],
            lib.log(tgt[..., 2] / src[..., 2]),
            lib.log(tgt[..., 3] / src[..., 3]),
        ],
        -1,
    )


def decode_boxes(src, deltas):
    """Inverse of :func:`encode_boxes`; zero deltas return ``src`` bit-exactly."""
    lib = torch if isinstance(deltas, torch.Tensor) else np
    if lib is torch and not isinstance(src, torch.Tensor):
        src = torch.as_tensor(src, dtype=deltas.dtype)
    w, h = src[..., 2], src[..., 3]
    nw = w * lib.exp(deltas[..., 2])
    nh = h * lib.exp(deltas[..., 3])
    nx = src[..., 0] + deltas[..., 0] * w + (w - nw) / 2
    ny = src[..., 1] + deltas[..., 1] * h + (h - nh) / 2
    return lib.stack([nx, ny, nw, nh], -1)


def regress_bag(feats: torch.Tensor, source_boxes, head: RegressionHead,
                image_size: tuple[int, int] | None = None, stage: str = "I",
                source_bag_id: int = 0) -> RegressedBag:
    src = as_boxes(source_boxes)
    deltas = head(feats)
    boxes = decode_boxes(src, deltas.detach().double().numpy())
    if image_size is not None:
        boxes = clip_boxes(boxes, image_size)
    return RegressedBag(boxes, deltas, source_bag_id, stage)


def l1_distill(deltas: torch.Tensor, source_boxes, target) -> torch.Tensor:
    """Per-bag L1 between predicted deltas and the encoded target, averaged over proposals.

    ``deltas`` is ``(..., P, 4)``; ``target`` broadcasts against ``source_boxes``
    (``(..., 4)`` per bag). The target never carries gradient.
    """
    src = torch.as_tensor(np.asarray(source_boxes, dtype=np.float64), dtype=deltas.dtype)
    tgt = torch.as_tensor(np.asarray(target, dtype=np.float64), dtype=deltas.dtype)
    if tgt.ndim == src.ndim - 1:
        tgt = tgt.unsqueeze(-2)
    enc = encode_boxes(src, tgt.expand_as(src))
    return (deltas - enc).abs().sum(dim=-1).mean(dim=-1)


def spsd_loss(stage1_deltas, stage1_sources, b_star, stage2_deltas=None, stage2_sources=None,
              b_hat_star=None) -> torch.Tensor:
    """Self-distillation loss of both regression stages.

    Stage I regresses towards the annotation ``b_star``, stage II towards the
    stage-I merged box ``b_hat_star``. With batched ``(M, P, 4)`` inputs the
    result is the mean over bags.
    """
    loss = l1_distill(stage1_deltas, stage1_sources, b_star)
    if stage2_deltas is not None:
        loss = loss + l1_distill(stage2_deltas, stage2_sources, b_hat_star)
    return loss.mean()


def adaptive_negative_bag(regressed_bags, image_size: tuple[int, int], rng: np.random.Generator,
                          count: int = 500, iou_max: float = 0.3) -> np.ndarray:
    """Negatives for one image, kept away from every proposal of every bag in it."""
    bags = [as_boxes(b.boxes if isinstance(b, RegressedBag) else b) for b in regressed_bags]
    if not bags:
        raise ValueError("need at least one bag to sample negatives against")
    return sample_negatives(np.concatenate(bags), image_size, count, iou_max, rng)


@dataclass
class InstanceRefinement:
    instance_id: int
    stage1: "object"
    stage2: "object"
    refined_box: object
    sampled_bag: np.ndarray
    stage1_bag: np.ndarray
    stage2_bag: np.ndarray


def interactive_refine(scene, instances, model, config) -> list[InstanceRefinement]:
    """Run the two-stage SPSD/MIL pipeline on one scene in inference mode.

    ``instances`` supply ``noisy_box`` and ``category``; clean boxes are not read.
    """
    from .model import refine_batch

    if not instances:
        return []
    out = refine_batch(model, [scene.image], [instances], config)
    return out[0]
