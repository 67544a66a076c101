"""Convolutional feature extractor, RoIAlign and the fully connected trunk.

RoIAlign is written as a sparse bilinear sampling matrix applied to the
channels-last feature map, which keeps both the forward pass and the
backward scatter cheap on a CPU.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
from torch import nn

from .geometry import BoundingBox, as_boxes


@dataclass(frozen=True)
class FeatureMap:
    values: torch.Tensor  # (B, C, h, w)
    stride: int

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def xavier_init(module: nn.Module, gain: float = 1.0) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight, gain=gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Plain conv stack; the first two layers downsample by 2 each."""

    def __init__(self, in_channels: int = 3, channels=(16, 32, 32, 32)):
        super().__init__()
        layers = []
        c_in = in_channels
        for i, c_out in enumerate(channels):
            stride = 2 if i < 2 else 1
            layers += [nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), nn.ReLU()]
            c_in = c_out
        self.body = nn.Sequential(*layers)
        self.stride = 2 ** min(2, len(channels))
        self.out_channels = c_in
        xavier_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, C)`` or ``(B, H, W, C)`` uint8/float images to a ``(B, C, H, W)`` tensor in [0, 1]."""
    if isinstance(images, torch.Tensor):
        arr = images
    else:
        arr = torch.from_numpy(np.ascontiguousarray(images))
    if arr.ndim == 3:
        arr = arr[None]
    scale = 255.0 if arr.dtype == torch.uint8 else 1.0
    return arr.permute(0, 3, 1, 2).to(dtype) / scale


def extract_feature_map(image, backbone: Backbone) -> FeatureMap:
    t = images_to_tensor(image, dtype=next(backbone.parameters()).dtype)
    if t.shape[-1] < backbone.stride or t.shape[-2] < backbone.stride:
        raise ValueError(f"image of size {tuple(t.shape[-2:])} is smaller than the stride {backbone.stride}")
    return FeatureMap(backbone(t), backbone.stride)


def _axis_weights(start: np.ndarray, length: np.ndarray, n_out: int, ratio: int, size: int):
    """Per-bin sample indices and bilinear weights along one axis.

    Returns ``(R, n_out, 2 * ratio)`` index and weight arrays; the weights of a
    bin already include the ``1 / ratio`` averaging factor for this axis.
    """
    bin_len = length / n_out
    g = (np.arange(n_out * ratio) + 0.5) / ratio
    pos = start[:, None] + g[None, :] * bin_len[:, None]
    valid = (pos >= -1.0) & (pos <= size)
    pos = np.clip(pos, 0, None)
    lo = np.minimum(np.floor(pos), size - 1)
    hi = np.minimum(lo + 1, size - 1)
    pos = np.minimum(pos, size - 1)
    frac = pos - lo
    w_lo = (1 - frac) * valid / ratio
    w_hi = frac * valid / ratio
    R = len(start)
    idx = np.stack([lo, hi], axis=-1).reshape(R, n_out, ratio * 2).astype(np.int64)
    wts = np.stack([w_lo, w_hi], axis=-1).reshape(R, n_out, ratio * 2)
    return idx, wts


def roi_sampling_matrix(
    rois: np.ndarray,
    batch_index: np.ndarray,
    map_shape: tuple[int, int, int],
    stride: int,
    output_size: int = 7,
    sampling_ratio: int = 2,
) -> sp.csr_matrix:
    """Sparse ``(R * out * out, B * h * w)`` matrix realizing RoIAlign.

    Pixel-aligned convention: feature cell ``i`` covers image span
    ``[i * stride, (i + 1) * stride)`` and its value sits at the cell center.
    """
    B, h, w = map_shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    x0 = rois[:, 0] / stride - 0.5
    y0 = rois[:, 1] / stride - 0.5
    bw = rois[:, 2] / stride
    bh = rois[:, 3] / stride
    if np.any(bw <= 0) or np.any(bh <= 0):
        raise ValueError("RoI has zero area after projection onto the feature map")
    xi, xw = _axis_weights(x0, bw, output_size, sampling_ratio, w)
    yi, yw = _axis_weights(y0, bh, output_size, sampling_ratio, h)
    R = len(rois)
    base = np.asarray(batch_index, dtype=np.int64).reshape(R, 1, 1, 1, 1) * (h * w)
    idx = base + yi[:, :, None, :, None] * w + xi[:, None, :, None, :]
    wts = yw[:, :, None, :, None] * xw[:, None, :, None, :]
    n_rows = R * output_size * output_size
    per_row = (2 * sampling_ratio) ** 2
    indptr = np.arange(0, n_rows * per_row + 1, per_row, dtype=np.int64)
    return sp.csr_matrix((wts.reshape(-1), idx.reshape(-1), indptr), shape=(n_rows, B * h * w))


class _SparseSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, flat, matrix):
        ctx.matrix = matrix
        x = flat.detach().numpy()
        return torch.from_numpy(np.ascontiguousarray(matrix @ x, dtype=x.dtype))

    @staticmethod
    def backward(ctx, grad):
        g = grad.detach().contiguous().numpy()
        return torch.from_numpy(np.ascontiguousarray(ctx.matrix.T @ g, dtype=g.dtype)), None


def roi_align(
    features: torch.Tensor,
    rois,
    batch_index=None,
    stride: int = 4,
    output_size: int = 7,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Bilinear RoIAlign of ``(R, 4)`` xywh image-space boxes.

    Returns ``(R, C, output_size, output_size)``; differentiable with respect to
    ``features`` only.
    """
    B, C, h, w = features.shape
    rois = as_boxes(rois)
    if batch_index is None:
        batch_index = np.zeros(len(rois), dtype=np.int64)
    m = roi_sampling_matrix(rois, batch_index, (B, h, w), stride, output_size, sampling_ratio)
    if features.dtype == torch.float32:
        m = m.astype(np.float32)
    flat = features.permute(0, 2, 3, 1).reshape(B * h * w, C)
    pooled = _SparseSample.apply(flat, m)
    return pooled.view(len(rois), output_size, output_size, C).permute(0, 3, 1, 2)


def roi_pool(fmap: FeatureMap, box: BoundingBox, out_size=(7, 7), sampling_ratio: int = 2) -> torch.Tensor:
    """Pool one box from the first image of ``fmap``; returns ``(out, out, C)``."""
    if out_size[0] != out_size[1]:
        raise ValueError("only square pooling grids are supported")
    H = fmap.values.shape[2] * fmap.stride
    W = fmap.values.shape[3] * fmap.stride
    b = as_boxes(box)[0]
    if b[0] >= W or b[1] >= H or b[0] + b[2] <= 0 or b[1] + b[3] <= 0:
        raise ValueError(f"box {tuple(b)} does not overlap the image")
    pooled = roi_align(fmap.values[:1], b[None], stride=fmap.stride, output_size=out_size[0],
                       sampling_ratio=sampling_ratio)
    return pooled[0].permute(1, 2, 0)


class Trunk(nn.Module):
    """Two fully connected layers with rectifiers, applied to flattened RoI features."""

    def __init__(self, in_features: int, dim: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_features, dim)
        self.fc2 = nn.Linear(dim, dim)
        xavier_init(self)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        x = pooled.flatten(1)
        return torch.relu(self.fc2(torch.relu(self.fc1(x))))


def bag_features(fmap: FeatureMap, bag, trunk: Trunk, output_size: int = 7) -> torch.Tensor:
    """``(P, D)`` feature matrix for the proposals of one bag (first image of ``fmap``)."""
    boxes = as_boxes(bag)
    if len(boxes) == 0:
        raise ValueError("empty bag")
    pooled = roi_align(fmap.values[:1], boxes, stride=fmap.stride, output_size=output_size)
    return trunk(pooled)


# checkpoints ---------------------------------------------------------------

_META_KEY = "__meta__"


def save_checkpoint(path, module: nn.Module, meta: dict | None = None) -> None:
    """Write parameters as an ``.npz`` archive keyed by state-dict names.

    Each array keeps its shape and dtype in the npy header. ``meta`` is stored
    as a JSON string under ``__meta__``.
    """
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    arrays[_META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data[_META_KEY])) if _META_KEY in data.files else {}
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != _META_KEY}
    return state, meta

