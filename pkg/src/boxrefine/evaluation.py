"""Average-IoU tables, bag-quality statistics and noise-type breakdowns."""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, as_boxes, overlap_metrics, pairwise_iou, pairwise_overlaps

IOU_FLOORS = ((">=", 0.0), (">", 0.0), (">", 0.3), (">", 0.5))
SCALE_BUCKETS = (("s", 32 ** 2), ("m", 96 ** 2), ("l", float("inf")))


class NoiseType(str, enum.Enum):
    RELIABLE = "reliable"
    DRIFT = "drift"
    GROUP = "group"
    PART = "part"
    OVERSIZE = "oversize"
    SHIFT = "shift"


@dataclass(frozen=True)
class NoiseThresholds:
    reliable_iou: float = 0.5
    iog: float = 0.7
    iod: float = 0.7


def floor_label(op: str, value: float) -> str:
    return f"{op}{value:g}"


def _as_box_map(boxes) -> dict:
    if isinstance(boxes, dict):
        return {k: np.asarray(list(v), dtype=np.float64) for k, v in boxes.items()}
    return {i: np.asarray(list(b), dtype=np.float64) for i, b in enumerate(boxes)}


def matched_ious(refined, clean) -> tuple[list, np.ndarray]:
    """IoU per instance id. Both inputs are id->box maps (or equal-length sequences)."""
    r, c = _as_box_map(refined), _as_box_map(clean)
    if set(r) != set(c):
        missing = sorted(set(r) ^ set(c), key=str)[:5]
        raise ValueError(f"instance ids do not match (e.g. {missing})")
    ids = sorted(r, key=str)
    if not ids:
        return ids, np.zeros(0)
    a, b = as_boxes([r[i] for i in ids]), as_boxes([c[i] for i in ids])
    return ids, np.array([pairwise_iou(a[j:j + 1], b[j:j + 1])[0, 0] for j in range(len(ids))])


def average_iou(refined, clean, floors=IOU_FLOORS) -> dict[str, float]:
    """Mean IoU over the instances passing each floor; ``nan`` when none pass."""
    _, ious = matched_ious(refined, clean)
    table = {}
    for op, f in floors:
        sel = ious >= f if op == ">=" else ious > f
        table[floor_label(op, f)] = float(ious[sel].mean()) if sel.any() else float("nan")
    return table


def bag_quality(bags, clean_boxes, top: int = 10) -> dict[str, float]:
    """Dataset means of per-bag mean IoU, max IoU and top-``top`` mean IoU against the clean box."""
    means, maxes, tops = [], [], []
    for bag, gt in zip(bags, clean_boxes):
        iou = np.sort(pairwise_iou(as_boxes(bag), as_boxes(list(gt)))[:, 0])[::-1]
        means.append(iou.mean())
        maxes.append(iou[0])
        tops.append(iou[:top].mean())
    if not means:
        return {"mean": float("nan"), "max": float("nan"), "top10_mean": float("nan")}
    return {"mean": float(np.mean(means)), "max": float(np.mean(maxes)), "top10_mean": float(np.mean(tops))}


def classify_noise_type(refined: BoundingBox, assigned_gt: BoundingBox, other_gts=(),
                        thresholds: NoiseThresholds = NoiseThresholds()) -> NoiseType:
    """Label one refined box by how it fails relative to its own and neighboring ground truths."""
    own = overlap_metrics(refined, assigned_gt)
    if own.iou >= thresholds.reliable_iou:
        return NoiseType.RELIABLE
    others = as_boxes([list(g) for g in other_gts]) if len(other_gts) else np.zeros((0, 4))
    if len(others):
        o_iou, o_iog, _ = pairwise_overlaps(as_boxes(list(refined)), others)
        if o_iou.max() > own.iou:
            return NoiseType.DRIFT
        covered = int(own.iog > thresholds.iog) + int((o_iog > thresholds.iog).sum())
        if covered >= 2:
            return NoiseType.GROUP
    if own.iod > thresholds.iod:
        return NoiseType.PART
    if own.iog > thresholds.iog:
        return NoiseType.OVERSIZE
    return NoiseType.SHIFT


def scale_bucket(box) -> str:
    area = float(np.prod(list(box)[2:]))
    for name, limit in SCALE_BUCKETS:
        if area < limit:
            return name
    return SCALE_BUCKETS[-1][0]


@dataclass
class QualityReport:
    average_iou_at: dict[str, float]
    bag_stats: dict[str, dict[str, float]] = field(default_factory=dict)
    breakdown: dict[str, dict[str, float]] = field(default_factory=dict)
    type_quality: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def breakdown_report(refined_set, clean_set, thresholds: NoiseThresholds = NoiseThresholds(),
                     groups=None, bag_sets: dict | None = None) -> QualityReport:
    """Classify every instance and aggregate frequencies overall and per clean-box scale.

    ``groups`` maps instance id to an image key; other ground truths are the
    clean boxes sharing it. Without ``groups`` all instances are treated as one image.
    ``bag_sets`` optionally maps a name to ``(bags, clean_boxes)`` for :func:`bag_quality`.
    """
    ids, ious = matched_ious(refined_set, clean_set)
    r, c = _as_box_map(refined_set), _as_box_map(clean_set)
    groups = groups or {i: 0 for i in ids}
    members: dict = {}
    for i in ids:
        members.setdefault(groups[i], []).append(i)
    labels = {}
    for i in ids:
        others = [c[j] for j in members[groups[i]] if j != i]
        labels[i] = classify_noise_type(BoundingBox.from_array(r[i]), BoundingBox.from_array(c[i]),
                                        others, thresholds)
    buckets = {"all": ids}
    for name, _ in SCALE_BUCKETS:
        sel = [i for i in ids if scale_bucket(c[i]) == name]
        if sel:
            buckets[name] = sel
    breakdown = {
        b: {t.value: sum(labels[i] is t for i in sel) / len(sel) for t in NoiseType}
        for b, sel in buckets.items() if sel
    }
    iou_of = dict(zip(ids, ious))
    quality = {}
    for t in NoiseType:
        vals = [iou_of[i] for i in ids if labels[i] is t]
        quality[t.value] = float(np.mean(vals)) if vals else float("nan")
    bag_stats = {name: bag_quality(*pair) for name, pair in (bag_sets or {}).items()}
    return QualityReport(average_iou(r, c), bag_stats, breakdown, quality,
                         {b: len(sel) for b, sel in buckets.items()})


def scenes_to_sets(scenes, which: str = "refined_box"):
    """Collect ``(predicted, clean, groups)`` id maps from scenes with filled boxes."""
    pred, clean, groups = {}, {}, {}
    for s in scenes:
        for inst in s.instances:
            box = getattr(inst, which)
            if box is None or inst.clean_box is None:
                raise ValueError(f"instance {inst.instance_id} lacks {which} or clean box")
            pred[inst.instance_id] = box
            clean[inst.instance_id] = inst.clean_box
            groups[inst.instance_id] = s.scene_id
    return pred, clean, groups


def _nan_to_none(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    return obj


def write_report_json(path, report: QualityReport | dict) -> None:
    doc = report.to_dict() if isinstance(report, QualityReport) else report
    Path(path).write_text(json.dumps(_nan_to_none(doc), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_report_csv(path, report: QualityReport) -> None:
    """Flatten a report into ``section,key,column,value`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("section", "key", "column", "value"))
        for k, v in report.average_iou_at.items():
            w.writerow(("average_iou", k, "", repr(v)))
        for name, stats in report.bag_stats.items():
            for k, v in stats.items():
                w.writerow(("bag_quality", name, k, repr(v)))
        for bucket, freqs in report.breakdown.items():
            for k, v in freqs.items():
                w.writerow(("breakdown", bucket, k, repr(v)))
        for k, v in report.type_quality.items():
            w.writerow(("type_quality", k, "", repr(v)))


def plot_report(report: dict, out_dir) -> list[Path]:
    """Bar charts of bag quality and per-bucket breakdown; returns the written files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    bag = report.get("bag_stats") or {}
    if bag:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        names = list(bag)
        stats = ("mean", "max", "top10_mean")
        x = np.arange(len(names))
        for j, s in enumerate(stats):
            ax.bar(x + (j - 1) * 0.25, [bag[n][s] or 0.0 for n in names], 0.25, label=s)
        ax.set_xticks(x, names)
        ax.set_ylabel("IoU with clean box")
        ax.legend()
        fig.tight_layout()
        written.append(out_dir / "bag_quality.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    breakdown = report.get("breakdown") or {}
    if breakdown:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        types = [t.value for t in NoiseType]
        x = np.arange(len(types))
        width = 0.8 / len(breakdown)
        for j, (bucket, freqs) in enumerate(breakdown.items()):
            ax.bar(x + j * width, [freqs[t] for t in types], width, label=bucket)
        ax.set_xticks(x + 0.4 - width / 2, types)
        ax.set_ylabel("frequency")
        ax.legend()
        fig.tight_layout()
        written.append(out_dir / "breakdown.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    return written
