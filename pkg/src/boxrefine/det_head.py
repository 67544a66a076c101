"""Minimal per-proposal detection head trained on refined boxes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .features import Trunk, roi_align, xavier_init
from .geometry import BoundingBox, as_boxes, clip_boxes, pairwise_iou
from .sisd import smooth_l1
from .spsd import decode_boxes, encode_boxes


@dataclass
class DetPrediction:
    class_logits: torch.Tensor  # (P, K + 1), last column is background
    box_deltas: torch.Tensor  # (P, 4)


@dataclass
class Detection:
    box: BoundingBox
    category: int
    score: float


class DetHead(nn.Module):
    def __init__(self, in_features: int, num_classes: int, dim: int = 64):
        super().__init__()
        self.trunk = Trunk(in_features, dim)
        self.cls = nn.Linear(dim, num_classes + 1)
        self.reg = nn.Linear(dim, 4)
        xavier_init(self.cls)
        nn.init.xavier_uniform_(self.reg.weight, gain=0.01)
        nn.init.zeros_(self.reg.bias)

    def forward(self, pooled: torch.Tensor) -> DetPrediction:
        h = self.trunk(pooled)
        return DetPrediction(self.cls(h), self.reg(h))


def assign_targets(proposals, target_boxes, target_labels, num_classes: int, iou_thresh: float = 0.5):
    """Label each proposal with the class of its best-overlapping target, or background."""
    props = as_boxes(proposals)
    labels = np.full(len(props), num_classes, dtype=np.int64)
    matched = np.zeros_like(props)
    tgt = as_boxes(target_boxes)
    if len(tgt) == 0 or len(props) == 0:
        return labels, matched
    iou = pairwise_iou(props, tgt)
    best = iou.argmax(axis=1)
    pos = iou[np.arange(len(props)), best] >= iou_thresh
    labels[pos] = np.asarray(target_labels, dtype=np.int64)[best[pos]]
    matched = tgt[best]
    return labels, matched


def det_loss(proposals, preds: DetPrediction, target_boxes, target_labels, num_classes: int,
             iou_thresh: float = 0.5, proposal_image=None, target_image=None) -> torch.Tensor:
    """Cross-entropy over K+1 classes plus smooth-L1 on the encoded deltas of positives.

    Both terms are averaged over all proposals. With ``proposal_image`` and
    ``target_image`` given, proposals are only matched to targets of their own image.
    """
    tgt = as_boxes(target_boxes)
    if len(tgt) == 0:
        return preds.class_logits.sum() * 0.0
    props = as_boxes(proposals)
    if proposal_image is None:
        labels, matched = assign_targets(props, tgt, target_labels, num_classes, iou_thresh)
    else:
        proposal_image = np.asarray(proposal_image)
        target_image = np.asarray(target_image)
        target_labels = np.asarray(target_labels)
        labels = np.full(len(props), num_classes, dtype=np.int64)
        matched = np.zeros_like(props)
        for b in np.unique(proposal_image):
            pi = proposal_image == b
            ti = target_image == b
            labels[pi], matched[pi] = assign_targets(props[pi], tgt[ti], target_labels[ti], num_classes, iou_thresh)
    labels_t = torch.as_tensor(labels)
    ce = F.cross_entropy(preds.class_logits, labels_t, reduction="sum")
    pos = labels < num_classes
    reg = preds.box_deltas.sum() * 0.0
    if pos.any():
        enc = torch.as_tensor(encode_boxes(props[pos], matched[pos]), dtype=preds.box_deltas.dtype)
        reg = smooth_l1(preds.box_deltas[torch.as_tensor(pos)], enc).sum()
    return (ce + reg) / len(props)


def nms(boxes, scores, iou_thresh: float = 0.5) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    iou = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_thresh
    return np.asarray(keep, dtype=np.int64)


def dense_proposals(image_size: tuple[int, int], sizes=(12, 16, 24, 32, 48, 64),
                    ratios=(0.5, 1.0, 2.0), stride: int = 8) -> np.ndarray:
    """Sliding-window boxes centered on a regular grid, clipped to the image."""
    W, H = image_size
    cx, cy = np.meshgrid(np.arange(stride / 2, W, stride), np.arange(stride / 2, H, stride))
    shapes = np.array([(s * np.sqrt(r), s / np.sqrt(r)) for s in sizes for r in ratios])
    cen = np.concatenate(
        [
            np.repeat(np.stack([cx.ravel(), cy.ravel()], 1), len(shapes), axis=0),
            np.tile(shapes, (cx.size, 1)),
        ],
        axis=1,
    )
    boxes = np.concatenate([cen[:, :2] - cen[:, 2:] / 2, cen[:, 2:]], axis=1)
    return clip_boxes(boxes, image_size)


@torch.no_grad()
def detect(image, model, score_thresh: float = 0.5, nms_iou: float = 0.5,
           proposals: np.ndarray | None = None) -> list[Detection]:
    """Score dense proposals with the detection head and apply per-class NMS."""
    from .features import images_to_tensor

    img = images_to_tensor(image, dtype=next(model.parameters()).dtype)
    H, W = img.shape[-2:]
    props = dense_proposals((W, H)) if proposals is None else as_boxes(proposals)
    fmap = model.backbone(img)
    pooled = roi_align(fmap, props, stride=model.backbone.stride, output_size=model.cfg.pool_size)
    pred = model.det(pooled)
    probs = torch.softmax(pred.class_logits, dim=-1).numpy()
    boxes = clip_boxes(decode_boxes(props, pred.box_deltas.double().numpy()), (W, H))
    cls = probs[:, :-1].argmax(axis=1)
    score = probs[np.arange(len(probs)), cls]
    out = []
    for k in np.unique(cls):
        sel = np.flatnonzero((cls == k) & (score >= score_thresh))
        if len(sel) == 0:
            continue
        for i in sel[nms(boxes[sel], score[sel], nms_iou)]:
            out.append(Detection(BoundingBox.from_array(boxes[i]), int(k), float(score[i])))
    out.sort(key=lambda d: -d.score)
    return out


def detections_to_instances(detections: list[Detection], first_id: int = 0):
    """Wrap detections as annotation instances so they can be saved with ``save_annotations``."""
    from .dataset import AnnotatedInstance

    return [AnnotatedInstance(first_id + i, d.category, d.box, score=d.score) for i, d in enumerate(detections)]
