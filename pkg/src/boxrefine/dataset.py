"""Synthetic shape scenes, box-noise injection and COCO-style annotation files."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, NoiseSpec, apply_noise_deltas, draw_noise_deltas, pairwise_iou

ARCHETYPES = ("rectangle", "ellipse", "triangle", "diamond", "cross", "ring")
IMAGES_FILE = "images.npy"
ANNOTATIONS_FILE = "annotations.json"


class SceneGenerationError(RuntimeError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass
class AnnotatedInstance:
    instance_id: int
    category: int
    noisy_box: BoundingBox | None
    clean_box: BoundingBox | None = None
    refined_box: BoundingBox | None = None
    score: float | None = None


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    instances: list[AnnotatedInstance]
    scene_id: int

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[0]


@dataclass(frozen=True)
class DatasetConfig:
    num_scenes: int = 200
    image_size: tuple[int, int] = (128, 128)
    num_categories: int = 3
    objects_per_scene: tuple[int, int] = (2, 6)
    overlap_allowed: bool = True
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(0.4, 0))
    size_range: tuple[int, int] = (16, 48)
    max_overlap_iou: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_categories < 2:
            raise ValueError("need at least two categories")
        if self.num_categories > len(ARCHETYPES):
            raise ValueError(f"at most {len(ARCHETYPES)} categories are available")
        lo, hi = self.objects_per_scene
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid objects_per_scene {self.objects_per_scene}")
        if not 1 <= self.size_range[0] <= self.size_range[1]:
            raise ValueError(f"invalid size_range {self.size_range}")

    def to_dict(self) -> dict:
        return {
            "num_scenes": self.num_scenes,
            "image_size": list(self.image_size),
            "num_categories": self.num_categories,
            "objects_per_scene": list(self.objects_per_scene),
            "overlap_allowed": self.overlap_allowed,
            "noise": {"level_r": self.noise.level_r, "rng_seed": self.noise.rng_seed},
            "size_range": list(self.size_range),
            "max_overlap_iou": self.max_overlap_iou,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseSpec(**d["noise"])
        for key in ("image_size", "objects_per_scene", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# rendering -----------------------------------------------------------------

def _shape_mask(kind: str, w: int, h: int) -> np.ndarray:
    """Boolean ``(h, w)`` mask of a shape filling its box, sampled at pixel centers."""
    v, u = np.mgrid[0:h, 0:w]
    u = (u + 0.5) / w * 2 - 1
    v = (v + 0.5) / h * 2 - 1
    if kind == "rectangle":
        m = np.ones((h, w), dtype=bool)
    elif kind == "ellipse":
        m = u ** 2 + v ** 2 <= 1
    elif kind == "triangle":
        m = np.abs(u) <= (v + 1) / 2
    elif kind == "diamond":
        m = np.abs(u) + np.abs(v) <= 1
    elif kind == "cross":
        m = (np.abs(u) <= 0.35) | (np.abs(v) <= 0.35)
    elif kind == "ring":
        r2 = u ** 2 + v ** 2
        m = (r2 <= 1) & (r2 >= 0.3)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m


def _texture(category: int, w: int, h: int, rng: np.random.Generator) -> np.ndarray:
    """Category-specific ``(h, w, 3)`` foreground texture in [0, 255]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    period = 3 + category
    angle = np.pi * category / 3
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period)
    checker = ((xx // (2 + category)) + (yy // (2 + category))) % 2
    base = 150 + 25 * category + rng.normal(0, 8)
    tex = np.stack(
        [
            np.full((h, w), base),
            40 + 200 * stripes,
            60 + 160 * checker,
        ],
        axis=-1,
    )
    return tex + rng.normal(0, 6, size=tex.shape)


def _background(W: int, H: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(30, 110, size=(H // 16 + 2, W // 16 + 2, 3))
    # piecewise-constant low-frequency field plus pixel noise
    bg = np.kron(coarse, np.ones((16, 16, 1)))[:H, :W]
    return bg + rng.normal(0, 12, size=(H, W, 3))


def scene_rng(seed: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(scene_id)]))


def generate_scene(config: DatasetConfig, rng: np.random.Generator, scene_id: int = 0) -> Scene:
    """Render one scene; annotations start out equal to the clean boxes."""
    W, H = config.image_size
    lo, hi = config.size_range
    if lo > min(W, H):
        raise SceneGenerationError(f"objects of size {lo} cannot fit in a {W}x{H} image")
    n_obj = int(rng.integers(config.objects_per_scene[0], config.objects_per_scene[1] + 1))
    img = _background(W, H, rng)
    placed: list[np.ndarray] = []
    instances = []
    for i in range(n_obj):
        for _ in range(200):
            w = int(rng.integers(lo, min(hi, W) + 1))
            h = int(rng.integers(lo, min(hi, H) + 1))
            x = int(rng.integers(0, W - w + 1))
            y = int(rng.integers(0, H - h + 1))
            box = np.array([x, y, w, h], dtype=np.float64)
            if not placed:
                break
            others = np.stack(placed)
            if config.overlap_allowed:
                if pairwise_iou(box[None], others).max() <= config.max_overlap_iou:
                    break
            else:
                gap = others.copy()
                gap[:, :2] -= 1
                gap[:, 2:] += 2
                if pairwise_iou(box[None], gap).max() == 0:
                    break
        else:
            raise SceneGenerationError(f"could not place object {i + 1} of {n_obj} in scene {scene_id}")
        category = int(rng.integers(0, config.num_categories))
        mask = _shape_mask(ARCHETYPES[category], w, h)
        tex = _texture(category, w, h, rng)
        region = img[y:y + h, x:x + w]
        region[mask] = tex[mask]
        ys, xs = np.nonzero(mask)
        clean = BoundingBox(float(x + xs.min()), float(y + ys.min()),
                            float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))
        placed.append(box)
        instances.append(AnnotatedInstance(i, category, clean, clean))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Scene(image, instances, scene_id)


def generate_dataset(config: DatasetConfig, first_id: int = 0) -> list[Scene]:
    """Scenes ``first_id .. first_id + num_scenes - 1``, each from its own RNG substream."""
    scenes = [generate_scene(config, scene_rng(config.seed, sid), sid)
              for sid in range(first_id, first_id + config.num_scenes)]
    counter = first_id * config.objects_per_scene[1]
    for scene in scenes:
        for inst in scene.instances:
            inst.instance_id = counter
            counter += 1
    return scenes


def inject_noise(instances, spec: NoiseSpec, rng: np.random.Generator,
                 image_size: tuple[int, int] | None = None) -> list[AnnotatedInstance]:
    """New instances whose ``noisy_box`` is a perturbed copy of ``clean_box``."""
    out = []
    for inst in instances:
        if inst.clean_box is None:
            raise ValueError(f"instance {inst.instance_id} has no clean box to perturb")
        deltas = draw_noise_deltas(1, spec.level_r, rng)
        if spec.level_r == 0:
            noisy = inst.clean_box
        else:
            noisy = BoundingBox.from_array(apply_noise_deltas(inst.clean_box, deltas, image_size)[0])
        out.append(replace(inst, noisy_box=noisy))
    return out


def inject_noise_dataset(scenes: list[Scene], spec: NoiseSpec) -> list[Scene]:
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.rng_seed), 0x5EED]))
    return [Scene(s.image, inject_noise(s.instances, spec, rng, s.image_size), s.scene_id) for s in scenes]


# annotation files ----------------------------------------------------------

def _box_list(b: BoundingBox | None):
    return None if b is None else [b.x, b.y, b.w, b.h]


def _parse_box(value, where: str) -> BoundingBox:
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise AnnotationError(f"{where}: bbox must be a list of four numbers, got {value!r}")
    try:
        return BoundingBox(*(float(v) for v in value))
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"{where}: {exc}") from None


def to_coco(data, categories=None) -> dict:
    """Build the annotation document from ``(image_ref, instances)`` pairs."""
    images, anns = [], []
    max_cat = -1
    for ref, instances in data:
        images.append(dict(ref))
        for inst in instances:
            box = inst.noisy_box if inst.noisy_box is not None else inst.clean_box
            if box is None:
                raise AnnotationError(f"instance {inst.instance_id} has no box to save")
            ann = {
                "id": inst.instance_id,
                "image_id": ref["id"],
                "category_id": inst.category,
                "bbox": _box_list(box),
            }
            if inst.clean_box is not None:
                ann["clean_bbox"] = _box_list(inst.clean_box)
            if inst.refined_box is not None:
                ann["refined_bbox"] = _box_list(inst.refined_box)
            if inst.score is not None:
                ann["score"] = inst.score
            anns.append(ann)
            max_cat = max(max_cat, inst.category)
    if categories is None:
        categories = [{"id": k, "name": ARCHETYPES[k] if k < len(ARCHETYPES) else str(k)}
                      for k in range(max_cat + 1)]
    return {"images": images, "annotations": anns, "categories": list(categories)}


def save_annotations(path, data, categories=None) -> None:
    doc = to_coco(data, categories)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def parse_coco(doc) -> list[tuple[dict, list[AnnotatedInstance]]]:
    if not isinstance(doc, dict):
        raise AnnotationError("annotation file must contain a JSON object")
    for key in ("images", "annotations"):
        if key not in doc or not isinstance(doc[key], list):
            raise AnnotationError(f"missing or malformed top-level key {key!r}")
    order = []
    by_image: dict = {}
    for i, img in enumerate(doc["images"]):
        if not isinstance(img, dict) or "id" not in img:
            raise AnnotationError(f"image record {i}: missing required key 'id'")
        if img["id"] in by_image:
            raise AnnotationError(f"image record {i}: duplicate image id {img['id']}")
        by_image[img["id"]] = []
        order.append(img)
    for i, ann in enumerate(doc["annotations"]):
        if not isinstance(ann, dict):
            raise AnnotationError(f"annotation record {i}: not an object")
        missing = [k for k in ("id", "image_id", "category_id", "bbox") if k not in ann]
        if missing:
            raise AnnotationError(f"annotation record {i}: missing required keys {missing}")
        where = f"annotation record {i} (id={ann['id']})"
        if ann["image_id"] not in by_image:
            raise AnnotationError(f"{where}: unknown image_id {ann['image_id']}")
        cat = ann["category_id"]
        if not isinstance(cat, int) or isinstance(cat, bool) or cat < 0:
            raise AnnotationError(f"{where}: category_id must be a non-negative integer")
        inst = AnnotatedInstance(
            instance_id=ann["id"],
            category=cat,
            noisy_box=_parse_box(ann["bbox"], where),
            clean_box=_parse_box(ann["clean_bbox"], where + " clean_bbox") if ann.get("clean_bbox") is not None else None,
            refined_box=_parse_box(ann["refined_bbox"], where + " refined_bbox") if ann.get("refined_bbox") is not None else None,
            score=ann.get("score"),
        )
        by_image[ann["image_id"]].append(inst)
    return [(img, by_image[img["id"]]) for img in order]


def load_annotations(path) -> list[tuple[dict, list[AnnotatedInstance]]]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON ({exc})") from None
    return parse_coco(doc)


def image_ref(scene: Scene, index: int) -> dict:
    W, H = scene.image_size
    return {"id": scene.scene_id, "file_name": IMAGES_FILE, "raster_index": index, "width": W, "height": H}


def save_dataset(directory, scenes: list[Scene], annotations_name: str = ANNOTATIONS_FILE) -> Path:
    """Write ``images.npy`` and the annotation file into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if scenes:
        np.save(d / IMAGES_FILE, np.stack([s.image for s in scenes]), allow_pickle=False)
    save_annotations(d / annotations_name, [(image_ref(s, i), s.instances) for i, s in enumerate(scenes)])
    return d / annotations_name


def load_dataset(directory, annotations=None) -> list[Scene]:
    """Read scenes back; ``annotations`` overrides the annotation file path."""
    d = Path(directory)
    ann_path = Path(annotations) if annotations is not None else d / ANNOTATIONS_FILE
    data = load_annotations(ann_path)
    if not data:
        return []
    raster_path = d / IMAGES_FILE
    if not raster_path.exists():
        raise FileNotFoundError(f"{raster_path} not found")
    images = np.load(raster_path, allow_pickle=False)
    scenes = []
    for i, (ref, instances) in enumerate(data):
        idx = int(ref.get("raster_index", i))
        if not 0 <= idx < len(images):
            raise AnnotationError(f"image record {i}: raster_index {idx} out of range")
        scenes.append(Scene(images[idx], instances, ref["id"]))
    return scenes


def default_data_dir() -> Path:
    return Path(os.environ.get("BOXREFINE_DATA", "data"))
