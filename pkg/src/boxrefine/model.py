"""The full refiner network and its batched forward pass.

One call to :func:`forward_batch` runs, for every annotated object of every
image in the batch: neighborhood sampling around the annotation, stage-I
regression and MIL selection, stage-II regression, MIL scoring with optional
identity confidence, and final top-k merging. :func:`compute_losses` turns the
result into the weighted training objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig
from .det_head import DetHead, DetPrediction, det_loss
from .features import Backbone, Trunk, images_to_tensor, load_checkpoint, roi_align, save_checkpoint
from .geometry import BoundingBox, UnselectableBagError, clip_boxes, sample_neighborhood, weighted_merge_batch
from .mil import BagScores, MILHead, StageOutput, score_bag, stage1_loss, stage2_loss
from .sisd import IdentityHead, IdentityPrediction, combine_scores, ore, predict_identity, sisd_loss
from .spsd import InstanceRefinement, RegressionHead, adaptive_negative_bag, decode_boxes, spsd_loss


class CheckpointError(ValueError):
    pass


class RefinerModel(nn.Module):
    """Backbone plus every head. Refiner/SPSD share ``trunk``; SISD owns ``sisd_trunk``."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(3, cfg.backbone_channels)
        in_features = self.backbone.out_channels * cfg.pool_size ** 2
        D, K = cfg.feature_dim, cfg.num_classes
        self.trunk = Trunk(in_features, D)
        self.sisd_trunk = Trunk(in_features, D)
        self.mil1 = MILHead(D, K)
        self.mil2 = MILHead(D, K)
        self.reg1 = RegressionHead(D)
        self.reg2 = RegressionHead(D)
        self.identity = IdentityHead(D, cfg.ore_mode)
        self.det = DetHead(in_features, K, D)

    def zero_spsd_(self) -> "RefinerModel":
        self.reg1.zero_()
        self.reg2.zero_()
        return self


def build_model(cfg: TrainConfig, dtype=torch.float32) -> RefinerModel:
    torch.manual_seed(cfg.seed)
    return RefinerModel(cfg).to(dtype)


def save_model(path, model: RefinerModel) -> None:
    save_checkpoint(path, model, {"format": "boxrefine-checkpoint", "version": 1, "config": model.cfg.to_dict()})


def load_model(path) -> RefinerModel:
    state, meta = load_checkpoint(path)
    if meta.get("format") != "boxrefine-checkpoint" or "config" not in meta:
        raise CheckpointError(f"{path}: not a refiner checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    model = RefinerModel(cfg)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config ({exc})") from None
    return model.to(next(iter(state.values())).dtype)


@dataclass
class BatchOutput:
    image_index: np.ndarray  # (M,)
    labels: np.ndarray  # (M,)
    noisy: np.ndarray  # (M, 4)
    sampled: np.ndarray  # (M, P, 4)
    bag1: np.ndarray
    source2: np.ndarray
    bag2: np.ndarray
    deltas1: torch.Tensor | None
    deltas2: torch.Tensor | None
    scores1: BagScores
    scores2: BagScores
    stage1_box: np.ndarray  # (M, 4)
    stage1_idx: np.ndarray
    stage1_w: np.ndarray
    selection2: np.ndarray  # (M, P) scores used for the final merge
    final_box: np.ndarray
    final_idx: np.ndarray
    final_w: np.ndarray
    identity: IdentityPrediction | None = None
    negatives: np.ndarray | None = None
    negative_image: np.ndarray | None = None
    negative_scores: torch.Tensor | None = None
    det_proposals: np.ndarray | None = None
    det_image: np.ndarray | None = None
    det_pred: DetPrediction | None = None


def _gather_objects(objects):
    boxes, labels, image_index = [], [], []
    for b, (bx, lab) in enumerate(objects):
        bx = np.asarray(bx, dtype=np.float64).reshape(-1, 4)
        boxes.append(bx)
        labels.append(np.asarray(lab, dtype=np.int64).reshape(-1))
        image_index.append(np.full(len(bx), b, dtype=np.int64))
    return np.concatenate(boxes), np.concatenate(labels), np.concatenate(image_index)


def forward_batch(model: RefinerModel, images, objects, cfg: TrainConfig | None = None,
                  rng: np.random.Generator | None = None) -> BatchOutput:
    """Run the two-stage pipeline on a batch.

    ``objects`` holds one ``(noisy_boxes (n, 4), labels (n,))`` pair per image.
    Negatives and detection-head outputs are produced only when ``rng`` is given.
    """
    cfg = cfg or model.cfg
    dtype = next(model.parameters()).dtype
    x = images_to_tensor(np.stack(images), dtype)
    H, W = x.shape[-2:]
    size = (W, H)
    noisy, labels, img_idx = _gather_objects(objects)
    M, P = len(noisy), cfg.grid.size
    if M == 0:
        raise ValueError("batch has no annotated objects")
    fmap = model.backbone(x)
    stride = model.backbone.stride
    D = cfg.feature_dim
    prop_img = np.repeat(img_idx, P)

    def pool(boxes):
        return roi_align(fmap, boxes.reshape(-1, 4), prop_img, stride, cfg.pool_size, cfg.sampling_ratio)

    sampled = clip_boxes(sample_neighborhood(noisy, cfg.grid), size)
    pooled_s = pool(sampled)
    feat_s = model.trunk(pooled_s).view(M, P, D)

    deltas1 = None
    bag1, pooled1, feat1 = sampled, pooled_s, feat_s
    if cfg.use_spsd:
        deltas1 = model.reg1(feat_s)
        bag1 = clip_boxes(decode_boxes(sampled, deltas1.detach().double().numpy()), size)
        pooled1 = pool(bag1)
        feat1 = model.trunk(pooled1).view(M, P, D)

    rows = np.arange(M)
    lab_t = torch.as_tensor(labels)
    scores1 = score_bag(feat1, model.mil1, stage=1)
    gt1 = scores1.s[torch.as_tensor(rows), :, lab_t]
    stage1_box, stage1_idx, stage1_w = weighted_merge_batch(bag1, gt1.detach().double().numpy(), cfg.k_stage1)

    if cfg.stage2_bag_source == "noisy":
        source2, pooled_src, feat_src = sampled, pooled_s, feat_s
    elif cfg.stage2_bag_source == "stage1":
        source2, pooled_src, feat_src = bag1, pooled1, feat1
    else:
        source2 = clip_boxes(sample_neighborhood(stage1_box, cfg.grid), size)
        pooled_src = pool(source2)
        feat_src = model.trunk(pooled_src).view(M, P, D)

    deltas2 = None
    bag2, pooled2, feat2 = source2, pooled_src, feat_src
    if cfg.use_spsd:
        deltas2 = model.reg2(feat_src)
        bag2 = clip_boxes(decode_boxes(source2, deltas2.detach().double().numpy()), size)
        pooled2 = pool(bag2)
        feat2 = model.trunk(pooled2).view(M, P, D)

    scores2 = score_bag(feat2, model.mil2, stage=2)
    gt2 = scores2.s[torch.as_tensor(rows), :, lab_t].detach().double().numpy()
    identity = None
    selection = gt2
    if cfg.use_sisd:
        f_sisd = model.sisd_trunk(pooled2).view(M, P, D)
        identity = predict_identity(ore(f_sisd, cfg.ore_mode), model.identity)
        combined = combine_scores(identity.u_prime.detach().double().numpy(), gt2)
        # a bag the identity head vetoes entirely falls back to class scores
        dead = ~(combined > 0).any(axis=1)
        selection = np.where(dead[:, None], gt2, combined)
    final_box, final_idx, final_w = weighted_merge_batch(bag2, selection, cfg.k_stage2)

    out = BatchOutput(img_idx, labels, noisy, sampled, bag1, source2, bag2, deltas1, deltas2,
                      scores1, scores2, stage1_box, stage1_idx, stage1_w, selection,
                      final_box, final_idx, final_w, identity)

    if rng is not None:
        negs, neg_img = [], []
        for b in range(len(images)):
            positives = bag2[img_idx == b].reshape(-1, 4)
            if len(positives) == 0:
                continue
            n = adaptive_negative_bag([positives], size, rng, cfg.negative_candidates, cfg.negative_iou_max)
            if cfg.max_negatives is not None and len(n) > cfg.max_negatives:
                n = n[np.sort(rng.choice(len(n), cfg.max_negatives, replace=False))]
            negs.append(n)
            neg_img.append(np.full(len(n), b, dtype=np.int64))
        negatives = np.concatenate(negs) if negs else np.zeros((0, 4))
        negative_image = np.concatenate(neg_img) if neg_img else np.zeros(0, dtype=np.int64)
        out.negatives, out.negative_image = negatives, negative_image
        pooled_neg = None
        if len(negatives):
            pooled_neg = roi_align(fmap, negatives, negative_image, stride, cfg.pool_size, cfg.sampling_ratio)
            out.negative_scores = torch.sigmoid(model.mil2.cls(model.trunk(pooled_neg)))
        if cfg.use_det:
            parts = [pooled_s] + ([pooled_neg] if pooled_neg is not None else [])
            out.det_pred = model.det(torch.cat(parts))
            out.det_proposals = np.concatenate([sampled.reshape(-1, 4), negatives])
            out.det_image = np.concatenate([prop_img, negative_image])
    return out


def compute_losses(out: BatchOutput, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    """Per-component losses and their weighted total."""
    M = len(out.labels)
    K = cfg.num_classes
    lab_t = torch.as_tensor(out.labels)
    dtype = out.scores1.s_bag.dtype
    c = F.one_hot(lab_t, K).to(dtype)
    zero = out.scores1.s_bag.sum() * 0.0

    l1 = stage1_loss(out.scores1.s_bag, c)
    s1_gt = out.scores1.s_bag[torch.arange(M), lab_t].detach()
    beta = s1_gt.mean()
    l2 = stage2_loss(out.scores2.s_bag, c, s1_gt, beta, out.negative_scores,
                     cfg.focal_gamma, cfg.focal_alpha) / M
    w = cfg.weights
    basic = l1 + w.alpha_II * l2

    spsd = zero
    if cfg.use_spsd:
        spsd = spsd_loss(out.deltas1, out.sampled, out.noisy, out.deltas2, out.source2, out.stage1_box)
    sisd = zero
    if cfg.use_sisd and out.identity is not None:
        sisd = sisd_loss(out.identity.u, out.bag2, out.stage1_box)
    det = zero
    if cfg.use_det and out.det_pred is not None:
        det = det_loss(out.det_proposals, out.det_pred, out.final_box, out.labels, K, cfg.det_iou,
                       out.det_image, out.image_index)
    total = w.basic * basic + w.alpha_1_spsd * spsd + w.alpha_2_sisd * sisd + w.alpha_3_det * det
    return {"total": total, "stage1": l1, "stage2": l2, "basic": basic, "spsd": spsd,
            "sisd": sisd, "det": det, "beta": beta}


def _box(a) -> BoundingBox:
    return BoundingBox.from_array(a)


@torch.no_grad()
def refine_batch(model: RefinerModel, images, instances_per_image, cfg: TrainConfig | None = None):
    """Inference-mode refinement; returns one list of :class:`InstanceRefinement` per image."""
    cfg = cfg or model.cfg
    objects = [(np.array([list(i.noisy_box) for i in insts]).reshape(-1, 4),
                np.array([i.category for i in insts], dtype=np.int64)) for insts in instances_per_image]
    if sum(len(o[1]) for o in objects) == 0:
        return [[] for _ in instances_per_image]
    out = forward_batch(model, images, objects, cfg)
    s1_bag = out.scores1.s_bag.double().numpy()
    s2_bag = out.scores2.s_bag.double().numpy()
    results: list[list[InstanceRefinement]] = [[] for _ in instances_per_image]
    m = 0
    for b, insts in enumerate(instances_per_image):
        for inst in insts:
            k = inst.category
            st1 = StageOutput(_box(out.stage1_box[m]), float(s1_bag[m, k]), out.stage1_idx[m], out.stage1_w[m])
            st2 = StageOutput(_box(out.final_box[m]), float(s2_bag[m, k]), out.final_idx[m], out.final_w[m])
            results[b].append(InstanceRefinement(inst.instance_id, st1, st2, st2.refined_box,
                                                 out.sampled[m], out.bag1[m], out.bag2[m]))
            m += 1
    return results


__all__ = [
    "RefinerModel", "BatchOutput", "CheckpointError", "UnselectableBagError", "build_model",
    "compute_losses", "forward_batch", "load_model", "refine_batch", "save_model",
]
