"""Box arithmetic shared by every other module.

Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner, in pixels.
Arrays of boxes are ``(..., 4)`` float arrays in the same layout. The center
format ``(cx, cy, w, h)`` only appears inside the noise model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class UnselectableBagError(ValueError):
    """Raised when a bag has no proposal with positive weight."""


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = tuple(float(v) for v in (self.x, self.y, self.w, self.h))
        for name, v in zip("xywh", vals):
            object.__setattr__(self, name, v)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width and height must be positive, got w={self.w}, h={self.h}")

    def __iter__(self):
        return iter((self.x, self.y, self.w, self.h))

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(*(float(v) for v in a))

    @classmethod
    def from_center(cls, cx, cy, w, h) -> "BoundingBox":
        return cls(cx - w / 2, cy - h / 2, w, h)


@dataclass(frozen=True)
class SamplerGrid:
    """Neighborhood sampler settings.

    ``jitter_offsets`` are raw offsets that get divided by ``offset_divisor``
    to yield fractions of the proposal size. ``anchor`` selects whether scaling
    keeps the top-left corner (``"corner"``) or the center fixed.
    """

    scale_products: tuple[float, ...] = (0.7, 0.8, 1.0, 1.2, 1.3)
    aspect_ratios: tuple[float, ...] = (0.7, 0.8, 1.0, 1.2, 1.3)
    jitter_offsets: tuple[tuple[float, float], ...] = ((0, 0), (2, 0), (0, 2), (-2, 0), (-2, -2))
    offset_divisor: float = 10.0
    anchor: str = "corner"

    def __post_init__(self):
        if not self.scale_products or not self.aspect_ratios or not self.jitter_offsets:
            raise ValueError("sampler grid lists must be non-empty")
        if any(a <= 0 for a in self.scale_products) or any(q <= 0 for q in self.aspect_ratios):
            raise ValueError("scale products and aspect ratios must be positive")
        if self.offset_divisor <= 0:
            raise ValueError("offset_divisor must be positive")
        if self.anchor not in ("corner", "center"):
            raise ValueError(f"unknown anchor {self.anchor!r}")

    @property
    def size(self) -> int:
        return len(self.scale_products) * len(self.aspect_ratios) * len(self.jitter_offsets)

    @classmethod
    def identity(cls) -> "SamplerGrid":
        return cls((1.0,), (1.0,), ((0.0, 0.0),))

    def halved(self) -> "SamplerGrid":
        """Grid with every deviation from the identity cell halved (20% noise setting)."""
        return SamplerGrid(
            tuple(1 + (a - 1) / 2 for a in self.scale_products),
            tuple(1 + (q - 1) / 2 for q in self.aspect_ratios),
            tuple((ox / 2, oy / 2) for ox, oy in self.jitter_offsets),
            self.offset_divisor,
            self.anchor,
        )

    def to_dict(self) -> dict:
        return {
            "scale_products": list(self.scale_products),
            "aspect_ratios": list(self.aspect_ratios),
            "jitter_offsets": [list(o) for o in self.jitter_offsets],
            "offset_divisor": self.offset_divisor,
            "anchor": self.anchor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerGrid":
        return cls(
            tuple(float(v) for v in d["scale_products"]),
            tuple(float(v) for v in d["aspect_ratios"]),
            tuple((float(o[0]), float(o[1])) for o in d["jitter_offsets"]),
            float(d.get("offset_divisor", 10.0)),
            d.get("anchor", "corner"),
        )


@dataclass(frozen=True)
class NoiseSpec:
    level_r: float = 0.4
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.level_r < 1:
            raise ValueError(f"noise level must lie in [0, 1), got {self.level_r}")


class OverlapMetrics(NamedTuple):
    iou: float
    iog: float
    iod: float


def as_boxes(boxes) -> np.ndarray:
    """Coerce a box, sequence of boxes or array into a float64 ``(N, 4)`` array."""
    if isinstance(boxes, BoundingBox):
        return boxes.to_array()[None]
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], BoundingBox):
        return np.stack([b.to_array() for b in boxes])
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    return arr.reshape(-1, 4)


def intersection_areas(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection areas between ``(N, 4)`` and ``(M, 4)`` boxes."""
    ax1, ay1 = a[:, None, 0], a[:, None, 1]
    ax2, ay2 = ax1 + a[:, None, 2], ay1 + a[:, None, 3]
    bx1, by1 = b[None, :, 0], b[None, :, 1]
    bx2, by2 = bx1 + b[None, :, 2], by1 + b[None, :, 3]
    # the extra minimum guards against x + w - x != w rounding pushing IoG/IoD past 1
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, np.minimum(a[:, None, 2], b[None, :, 2]))
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, np.minimum(a[:, None, 3], b[None, :, 3]))
    return iw * ih


def pairwise_overlaps(d, g) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU, IoG and IoD matrices of shape ``(N, M)`` for detections ``d`` and ground truths ``g``."""
    d, g = as_boxes(d), as_boxes(g)
    inter = intersection_areas(d, g)
    area_d = (d[:, 2] * d[:, 3])[:, None]
    area_g = (g[:, 2] * g[:, 3])[None, :]
    union = area_d + area_g - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
        iog = np.where(area_g > 0, inter / area_g, 0.0)
        iod = np.where(area_d > 0, inter / area_d, 0.0)
    return iou, iog, iod


def pairwise_iou(a, b) -> np.ndarray:
    return pairwise_overlaps(a, b)[0]


def overlap_metrics(d: BoundingBox, g: BoundingBox) -> OverlapMetrics:
    """IoU, IoG (over ground-truth area) and IoD (over detection area) of two boxes."""
    iou, iog, iod = pairwise_overlaps(d, g)
    return OverlapMetrics(float(iou[0, 0]), float(iog[0, 0]), float(iod[0, 0]))


def clip_boxes(boxes: np.ndarray, image_size: tuple[int, int], min_size: float = 1.0) -> np.ndarray:
    """Clip ``(..., 4)`` boxes to ``image_size = (W, H)``.

    Boxes already inside the image are returned bit-identical. Every side is
    kept at least ``min_size`` pixels long.
    """
    W, H = image_size
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    for lo, ext, limit in ((0, 2, W), (1, 3, H)):
        x1 = boxes[..., lo]
        x2 = x1 + boxes[..., ext]
        inside = (x1 >= 0) & (x2 <= limit) & (boxes[..., ext] >= min_size)
        c1 = np.clip(x1, 0, limit - min_size)
        c2 = np.clip(x2, c1 + min_size, limit)
        out[..., lo] = np.where(inside, x1, c1)
        out[..., ext] = np.where(inside, boxes[..., ext], np.maximum(c2 - c1, min_size))
    return out


def to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([boxes[..., :2] + boxes[..., 2:] / 2, boxes[..., 2:]], axis=-1)


def from_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([boxes[..., :2] - boxes[..., 2:] / 2, boxes[..., 2:]], axis=-1)


def draw_noise_deltas(n: int, level_r: float, rng: np.random.Generator) -> np.ndarray:
    """``(n, 4)`` i.i.d. Uniform(-r, r) draws ordered ``(dx, dy, dw, dh)``."""
    return rng.uniform(-level_r, level_r, size=(n, 4))


def apply_noise_deltas(clean, deltas, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Shift and rescale boxes in center format by the given relative deltas."""
    c = to_center(as_boxes(clean))
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    w, h = c[:, 2], c[:, 3]
    noisy = np.stack(
        [
            c[:, 0] + deltas[:, 0] * w,
            c[:, 1] + deltas[:, 1] * h,
            (1 + deltas[:, 2]) * w,
            (1 + deltas[:, 3]) * h,
        ],
        axis=1,
    )
    out = from_center(noisy)
    if image_size is not None:
        return clip_boxes(out, image_size)
    small = out[:, 2:] < 1.0
    if small.any():
        cen = to_center(out)
        cen[:, 2:] = np.maximum(cen[:, 2:], 1.0)
        out = from_center(cen)
    return out


def perturb_box(
    clean: BoundingBox,
    spec: NoiseSpec | float,
    rng: np.random.Generator,
    image_size: tuple[int, int] | None = None,
) -> BoundingBox:
    """Draw one noisy annotation around ``clean``."""
    r = spec.level_r if isinstance(spec, NoiseSpec) else float(spec)
    deltas = draw_noise_deltas(1, r, rng)
    if r == 0:
        return clean
    return BoundingBox.from_array(apply_noise_deltas(clean, deltas, image_size)[0])


def sample_neighborhood(b_star, grid: SamplerGrid) -> np.ndarray:
    """Proposal bag around ``b_star``: one box per (scale, aspect, offset) cell.

    Returns a ``(P, 4)`` array ordered scale-major, then aspect ratio, then offset.
    ``b_star`` may also be an ``(M, 4)`` array, giving ``(M, P, 4)``.
    """
    b = np.asarray(list(b_star) if isinstance(b_star, BoundingBox) else b_star, dtype=np.float64)
    single = b.ndim == 1
    b = b.reshape(-1, 4)
    a = np.asarray(grid.scale_products, dtype=np.float64)
    q = np.asarray(grid.aspect_ratios, dtype=np.float64)
    o = np.asarray(grid.jitter_offsets, dtype=np.float64).reshape(-1, 2) / grid.offset_divisor
    A, Q, O = np.meshgrid(np.arange(len(a)), np.arange(len(q)), np.arange(len(o)), indexing="ij")
    a, q, o = a[A.ravel()], q[Q.ravel()], o[O.ravel()]

    bw = a[None, :] * b[:, None, 2]
    bh = b[:, None, 3] / q[None, :]
    if grid.anchor == "center":
        x0 = b[:, None, 0] + (b[:, None, 2] - bw) / 2
        y0 = b[:, None, 1] + (b[:, None, 3] - bh) / 2
    else:
        x0 = np.broadcast_to(b[:, None, 0], bw.shape)
        y0 = np.broadcast_to(b[:, None, 1], bh.shape)
    bx = x0 + bw * o[None, :, 0]
    by = y0 + bh * o[None, :, 1]
    out = np.stack([bx, by, bw, bh], axis=-1)
    return out[0] if single else out


def weighted_merge(proposals, weights, k: int) -> tuple[BoundingBox, np.ndarray, np.ndarray]:
    """Score-weighted average of the ``k`` highest-weight proposals.

    Returns ``(box, selected_indices, normalized_weights)``. Ties go to the lower index.
    """
    boxes = as_boxes(proposals)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(boxes) or len(w) == 0:
        raise ValueError(f"need matching non-empty proposals/weights, got {len(boxes)} and {len(w)}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if not np.any(w > 0):
        raise UnselectableBagError("all proposal weights are zero; bag has nothing to select")
    k = max(1, min(int(k), len(w)))
    idx = np.argsort(-w, kind="stable")[:k]
    sel = w[idx] / w[idx].sum()
    merged = (sel[:, None] * boxes[idx]).sum(axis=0)
    return BoundingBox.from_array(merged), idx, sel


def weighted_merge_batch(bags: np.ndarray, weights: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`weighted_merge` over ``(M, P, 4)`` bags and ``(M, P)`` weights."""
    bags = np.asarray(bags, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if np.any(~(w > 0).any(axis=1)):
        bad = np.flatnonzero(~(w > 0).any(axis=1)).tolist()
        raise UnselectableBagError(f"bags {bad} have all-zero weights")
    k = max(1, min(int(k), w.shape[1]))
    idx = np.argsort(-w, axis=1, kind="stable")[:, :k]
    sel = np.take_along_axis(w, idx, axis=1)
    sel = sel / sel.sum(axis=1, keepdims=True)
    chosen = np.take_along_axis(bags, idx[:, :, None], axis=1)
    merged = (sel[:, :, None] * chosen).sum(axis=1)
    return merged, idx, sel


def sample_negatives(
    positives,
    image_size: tuple[int, int],
    count: int,
    iou_max: float,
    rng: np.random.Generator,
    min_size: int = 2,
) -> np.ndarray:
    """Random integer-corner boxes whose IoU with every positive stays below ``iou_max``.

    ``count`` candidates are drawn inside the image (top-left corner uniform,
    then the far corner uniform over what remains); fewer may survive.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    W, H = image_size
    if W < min_size or H < min_size:
        return np.zeros((0, 4))
    x1 = rng.integers(0, W - min_size + 1, size=count)
    y1 = rng.integers(0, H - min_size + 1, size=count)
    x2 = rng.integers(x1 + min_size, W + 1)
    y2 = rng.integers(y1 + min_size, H + 1)
    cand = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1).astype(np.float64)
    pos = as_boxes(positives)
    if len(pos) == 0 or len(cand) == 0:
        return cand
    keep = (pairwise_iou(cand, pos) < iou_max).all(axis=1)
    return cand[keep]
