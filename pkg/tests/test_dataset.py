import json

import numpy as np
import pytest
import shapely.geometry

from boxrefine import dataset as ds
from boxrefine.dataset import (
    AnnotatedInstance,
    AnnotationError,
    DatasetConfig,
    SceneGenerationError,
    generate_dataset,
    generate_scene,
    inject_noise,
    inject_noise_dataset,
    load_annotations,
    load_dataset,
    save_annotations,
    save_dataset,
    scene_rng,
)
from boxrefine.geometry import BoundingBox, NoiseSpec


def _poly(b):
    b = list(b)
    return shapely.geometry.box(b[0], b[1], b[0] + b[2], b[1] + b[3])


def test_clean_box_is_tight_around_rendered_foreground(monkeypatch):
    cfg = DatasetConfig(objects_per_scene=(1, 1), overlap_allowed=False)
    real_bg, real_tex = ds._background, ds._texture

    def flat_bg(W, H, rng):
        return real_bg(W, H, rng) * 0.0

    def white_tex(category, w, h, rng):
        return real_tex(category, w, h, rng) * 0.0 + 255.0

    for sid in range(12):
        scene = generate_scene(cfg, scene_rng(0, sid), sid)
        with monkeypatch.context() as m:
            m.setattr(ds, "_background", flat_bg)
            m.setattr(ds, "_texture", white_tex)
            probe = generate_scene(cfg, scene_rng(0, sid), sid)
        ys, xs = np.nonzero(probe.image[..., 0] == 255)
        tight = (xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
        assert tuple(scene.instances[0].clean_box) == tight


def test_scene_generation_is_deterministic():
    a = generate_scene(DatasetConfig(), scene_rng(3, 7), 7)
    b = generate_scene(DatasetConfig(), scene_rng(3, 7), 7)
    assert np.array_equal(a.image, b.image)
    assert a.instances == b.instances
    assert 2 <= len(a.instances) <= 6 and a.image.shape == (128, 128, 3) and a.image.dtype == np.uint8


def test_dataset_bytes_are_reproducible(tmp_path):
    for name in ("a", "b"):
        scenes = inject_noise_dataset(generate_dataset(DatasetConfig(num_scenes=6, seed=4)), NoiseSpec(0.4, 9))
        save_dataset(tmp_path / name, scenes)
    for f in ("images.npy", "annotations.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_category_counts_are_uniform_within_three_sigma():
    scenes = generate_dataset(DatasetConfig(num_scenes=500, seed=11))
    cats = np.array([i.category for s in scenes for i in s.instances])
    n, K = len(cats), 3
    sigma = np.sqrt(n * (1 / K) * (1 - 1 / K))
    assert np.all(np.abs(np.bincount(cats, minlength=K) - n / K) < 3 * sigma)


def test_instance_ids_are_unique():
    scenes = generate_dataset(DatasetConfig(num_scenes=30))
    ids = [i.instance_id for s in scenes for i in s.instances]
    assert len(ids) == len(set(ids))
    later = generate_dataset(DatasetConfig(num_scenes=5), first_id=30)
    assert not set(ids) & {i.instance_id for s in later for i in s.instances}


def test_boxes_stay_in_image():
    for s in generate_dataset(DatasetConfig(num_scenes=40, size_range=(10, 60))):
        for i in s.instances:
            b = i.clean_box
            assert b.x >= 0 and b.y >= 0 and b.x + b.w <= 128 and b.y + b.h <= 128


def test_impossible_configs_raise():
    with pytest.raises(SceneGenerationError):
        generate_scene(DatasetConfig(image_size=(32, 32), size_range=(40, 50)), scene_rng(0, 0))
    crowded = DatasetConfig(image_size=(40, 40), size_range=(30, 30), objects_per_scene=(4, 4), overlap_allowed=False)
    with pytest.raises(SceneGenerationError):
        generate_scene(crowded, scene_rng(0, 0))
    with pytest.raises(ValueError):
        DatasetConfig(num_categories=1)
    with pytest.raises(ValueError):
        DatasetConfig(objects_per_scene=(4, 2))


def test_zero_noise_keeps_clean_boxes():
    scenes = inject_noise_dataset(generate_dataset(DatasetConfig(num_scenes=5)), NoiseSpec(0.0))
    assert all(i.noisy_box == i.clean_box for s in scenes for i in s.instances)


def test_noise_injection_does_not_mutate_input():
    scenes = generate_dataset(DatasetConfig(num_scenes=3))
    before = [[(i.clean_box, i.noisy_box) for i in s.instances] for s in scenes]
    noisy = inject_noise_dataset(scenes, NoiseSpec(0.4, 1))
    assert [[(i.clean_box, i.noisy_box) for i in s.instances] for s in scenes] == before
    assert all(a.clean_box == b.clean_box for s, t in zip(scenes, noisy) for a, b in zip(s.instances, t.instances))
    with pytest.raises(ValueError):
        inject_noise([AnnotatedInstance(0, 0, BoundingBox(0, 0, 1, 1))], NoiseSpec(0.2), np.random.default_rng(0))


def test_mean_noisy_iou_matches_monte_carlo_oracle(rng):
    clean = [BoundingBox(*rng.uniform(0, 100, 2), *rng.uniform(10, 50, 2)) for _ in range(10_000)]
    insts = [AnnotatedInstance(i, 0, None, b) for i, b in enumerate(clean)]
    noisy = inject_noise(insts, NoiseSpec(0.4), np.random.default_rng(1))
    got = np.mean([_poly(n.noisy_box).intersection(_poly(c)).area / _poly(n.noisy_box).union(_poly(c)).area
                   for n, c in zip(noisy, clean)])
    # independent draw of the same law, written directly in center form
    oracle_rng = np.random.default_rng(2)
    ious = []
    for b in clean:
        dx, dy, dw, dh = oracle_rng.uniform(-0.4, 0.4, 4)
        cx, cy = b.x + b.w / 2 + dx * b.w, b.y + b.h / 2 + dy * b.h
        w, h = (1 + dw) * b.w, (1 + dh) * b.h
        p = shapely.geometry.box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        ious.append(p.intersection(_poly(b)).area / p.union(_poly(b)).area)
    assert abs(got - np.mean(ious)) < 0.03


# annotation files ----------------------------------------------------------

REF = {"id": 1, "file_name": "images.npy", "raster_index": 0, "width": 64, "height": 64}


def test_empty_instance_list_round_trips(tmp_path):
    save_annotations(tmp_path / "a.json", [(REF, [])])
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["annotations"] == []
    assert load_annotations(tmp_path / "a.json") == [(REF, [])]


def test_three_instance_round_trip(tmp_path):
    insts = [
        AnnotatedInstance(5, 0, BoundingBox(1.5, 2.25, 10, 12), BoundingBox(1, 2, 11, 12)),
        AnnotatedInstance(6, 2, BoundingBox(30, 31, 4.125, 9)),
        AnnotatedInstance(9, 1, BoundingBox(0.1, 0.2, 0.3, 0.7), None, BoundingBox(3, 3, 3, 3), 0.625),
    ]
    save_annotations(tmp_path / "a.json", [(REF, insts)])
    assert load_annotations(tmp_path / "a.json") == [(REF, insts)]
    save_annotations(tmp_path / "b.json", load_annotations(tmp_path / "a.json"))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def _doc(**ann):
    base = {"id": 3, "image_id": 1, "category_id": 0, "bbox": [0, 0, 4, 4]}
    base.update(ann)
    return {"images": [REF], "annotations": [{"id": 1, "image_id": 1, "category_id": 0, "bbox": [0, 0, 1, 1]}, base]}


@pytest.mark.parametrize("bad, message", [
    (dict(bbox=[0, 0, -5, 4]), "annotation record 1 (id=3)"),
    (dict(bbox=[0, 0, 4]), "four numbers"),
    (dict(image_id=99), "unknown image_id"),
    (dict(category_id=-1), "category_id"),
    (dict(clean_bbox=[0, 0, 0, 1]), "clean_bbox"),
])
def test_validation_errors_name_the_record(tmp_path, bad, message):
    (tmp_path / "a.json").write_text(json.dumps(_doc(**bad)))
    with pytest.raises(AnnotationError, match=message.replace("(", r"\(").replace(")", r"\)")):
        load_annotations(tmp_path / "a.json")


def test_missing_keys_and_bad_json(tmp_path):
    doc = _doc()
    del doc["annotations"][1]["bbox"]
    (tmp_path / "a.json").write_text(json.dumps(doc))
    with pytest.raises(AnnotationError, match="record 1.*bbox"):
        load_annotations(tmp_path / "a.json")
    (tmp_path / "b.json").write_text("{not json")
    with pytest.raises(AnnotationError, match="malformed"):
        load_annotations(tmp_path / "b.json")


def test_dataset_directory_round_trip(tmp_path):
    scenes = inject_noise_dataset(generate_dataset(DatasetConfig(num_scenes=4)), NoiseSpec(0.3, 2))
    save_dataset(tmp_path, scenes)
    back = load_dataset(tmp_path)
    for a, b in zip(scenes, back):
        assert np.array_equal(a.image, b.image) and a.instances == b.instances and a.scene_id == b.scene_id


def test_config_dict_round_trip():
    cfg = DatasetConfig(num_scenes=7, image_size=(96, 64), noise=NoiseSpec(0.2, 3))
    assert DatasetConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
