"""Command-line entry point: ``boxrefine <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_config
from .dataset import (
    AnnotationError,
    DatasetConfig,
    default_data_dir,
    generate_dataset,
    inject_noise,
    inject_noise_dataset,
    load_annotations,
    load_dataset,
    save_annotations,
    save_dataset,
)
from .geometry import NoiseSpec

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; usage errors here exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _noise_level(text: str) -> float:
    try:
        r = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= r < 1.0:
        raise argparse.ArgumentTypeError(f"noise level must lie in [0, 1), got {r}")
    return r


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _existing(text: str) -> Path:
    p = Path(text)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"no such file or directory: {text}")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=_existing, help="JSON file with optional 'data' and 'train' sections")
    common.add_argument("--seed", type=int, help="random seed (overrides the config file)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="boxrefine", description="Refine noisy bounding-box annotations.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic shapes dataset")
    g.add_argument("--out", type=Path, help="output directory (default: $BOXREFINE_DATA or ./data)")
    g.add_argument("--num-scenes", type=_positive_int)
    g.add_argument("--noise-level", type=_noise_level,
                   help="also write noisy boxes at this level (default: boxes stay clean)")

    n = sub.add_parser("inject-noise", parents=[common], help="perturb the clean boxes of an annotation file")
    n.add_argument("annotations", type=_existing)
    n.add_argument("--noise-level", type=_noise_level, required=True)
    n.add_argument("--out", type=Path, required=True, help="output annotation file")

    t = sub.add_parser("train", parents=[common], help="train the refiner and refine the training set")
    t.add_argument("--data", type=Path, help="dataset directory (default: $BOXREFINE_DATA or ./data)")
    t.add_argument("--annotations", type=_existing, help="annotation file overriding the one in --data")
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--k", type=_positive_int, help="top-k merged proposals in both stages")
    t.add_argument("--no-spsd", action="store_true")
    t.add_argument("--no-sisd", action="store_true")
    t.add_argument("--no-det", action="store_true")

    r = sub.add_parser("refine", parents=[common], help="refine annotations with a trained checkpoint")
    r.add_argument("checkpoint", type=_existing)
    r.add_argument("--data", type=Path)
    r.add_argument("--annotations", type=_existing)
    r.add_argument("--out", type=Path, required=True, help="output annotation file")

    e = sub.add_parser("evaluate", parents=[common], help="score refined boxes against clean boxes")
    e.add_argument("refined", type=_existing, help="annotation file with refined_bbox")
    e.add_argument("--clean", type=_existing, help="annotation file holding clean_bbox (default: the refined file)")
    e.add_argument("--checkpoint", type=_existing, help="also report bag quality using this checkpoint")
    e.add_argument("--data", type=Path, help="dataset directory for --checkpoint")
    e.add_argument("--out", type=Path, required=True, help="output directory for metrics.json and metrics.csv")

    rep = sub.add_parser("report", parents=[common], help="summarize a metrics file")
    rep.add_argument("metrics", type=_existing)
    rep.add_argument("--plots", action="store_true", help="write bar charts next to the metrics file")
    rep.add_argument("--out", type=Path, help="directory for plots (default: the metrics file's directory)")
    return p


def _config_sections(args) -> tuple[dict, dict]:
    if args.config is None:
        return {}, {}
    doc = load_config(args.config)
    unknown = set(doc) - {"data", "train"}
    if unknown:
        raise UsageError(f"{args.config}: unknown sections {sorted(unknown)}")
    return dict(doc.get("data", {})), dict(doc.get("train", {}))


def _train_config(args) -> TrainConfig:
    _, section = _config_sections(args)
    try:
        cfg = TrainConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None
    changes = {"seed": args.seed, "epochs": getattr(args, "epochs", None)}
    k = getattr(args, "k", None)
    if k is not None:
        changes.update(k_stage1=k, k_stage2=k)
    if getattr(args, "no_spsd", False):
        changes["use_spsd"] = False
    if getattr(args, "no_sisd", False):
        changes["use_sisd"] = False
    if getattr(args, "no_det", False):
        changes["use_det"] = False
    return cfg.updated(**changes)


def _noise_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))


def cmd_gen_data(args) -> int:
    section, _ = _config_sections(args)
    try:
        cfg = DatasetConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid data config: {exc}") from None
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.num_scenes is not None:
        changes["num_scenes"] = args.num_scenes
    if changes:
        cfg = DatasetConfig.from_dict({**cfg.to_dict(), **changes})
    scenes = generate_dataset(cfg)
    if args.noise_level is not None:
        scenes = inject_noise_dataset(scenes, NoiseSpec(args.noise_level, cfg.seed))
    out = args.out or default_data_dir()
    path = save_dataset(out, scenes)
    (Path(out) / "data_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(scenes)} scenes to {path.parent}")
    return 0


def cmd_inject_noise(args) -> int:
    seed = 0 if args.seed is None else args.seed
    data = load_annotations(args.annotations)
    rng = _noise_rng(seed)
    spec = NoiseSpec(args.noise_level, seed)
    noisy = []
    for ref, instances in data:
        size = (ref["width"], ref["height"]) if "width" in ref and "height" in ref else None
        noisy.append((ref, inject_noise(instances, spec, rng, size)))
    save_annotations(args.out, noisy)
    print(f"wrote {sum(len(i) for _, i in noisy)} noisy boxes to {args.out}")
    return 0


def _save_scenes_annotations(path, scenes, refs) -> None:
    save_annotations(path, [(ref, s.instances) for ref, s in zip(refs, scenes)])


def _load_with_refs(data_dir, annotations):
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    ann = annotations if annotations is not None else data_dir / "annotations.json"
    refs = [ref for ref, _ in load_annotations(ann)]
    return load_dataset(data_dir, ann), refs


def cmd_train(args) -> int:
    from .model import save_model
    from .trainer import train

    cfg = _train_config(args)
    scenes, refs = _load_with_refs(args.data, args.annotations)
    cats = {i.category for s in scenes for i in s.instances}
    if cats and max(cats) >= cfg.num_classes:
        raise UsageError(f"data has category {max(cats)} but num_classes is {cfg.num_classes}")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    result = train(scenes, cfg, log_path=out / "loss_log.csv")
    save_model(out / "model.npz", result.model)
    _save_scenes_annotations(out / "refined.json", result.refined, refs)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"trained {cfg.epochs} epochs; wrote model.npz, loss_log.csv, refined.json to {out}")
    return 0


def cmd_refine(args) -> int:
    from .model import load_model
    from .trainer import refine_dataset

    model = load_model(args.checkpoint)
    scenes, refs = _load_with_refs(args.data, args.annotations)
    refined = refine_dataset(scenes, model)
    _save_scenes_annotations(args.out, refined, refs)
    print(f"wrote refined boxes for {sum(len(s.instances) for s in refined)} instances to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import average_iou, breakdown_report, write_report_csv, write_report_json

    refined_data = load_annotations(args.refined)
    clean_data = load_annotations(args.clean) if args.clean else refined_data
    refined, noisy, groups = {}, {}, {}
    for ref, insts in refined_data:
        for i in insts:
            if i.refined_box is None:
                raise AnnotationError(f"{args.refined}: instance {i.instance_id} has no refined_bbox")
            refined[i.instance_id] = i.refined_box
            noisy[i.instance_id] = i.noisy_box
            groups[i.instance_id] = ref["id"]
    clean = {}
    for _, insts in clean_data:
        for i in insts:
            if i.clean_box is None:
                raise AnnotationError(f"instance {i.instance_id} has no clean_bbox")
            clean[i.instance_id] = i.clean_box
    bag_sets = None
    if args.checkpoint is not None:
        bag_sets = _bag_sets(args.checkpoint, args.data, args.refined)
    report = breakdown_report(refined, clean, groups=groups, bag_sets=bag_sets)
    doc = report.to_dict()
    doc["noisy_average_iou_at"] = average_iou(noisy, clean)
    args.out.mkdir(parents=True, exist_ok=True)
    write_report_json(args.out / "metrics.json", doc)
    write_report_csv(args.out / "metrics.csv", report)
    print(f"average IoU refined {report.average_iou_at['>=0']:.4f} "
          f"noisy {doc['noisy_average_iou_at']['>=0']:.4f}; wrote metrics to {args.out}")
    return 0


def _bag_sets(checkpoint, data_dir, annotations) -> dict:
    from .model import load_model, refine_batch

    model = load_model(checkpoint)
    scenes, _ = _load_with_refs(data_dir, annotations)
    sampled, stage1, stage2, clean = [], [], [], []
    for s in scenes:
        if not s.instances:
            continue
        for inst, r in zip(s.instances, refine_batch(model, [s.image], [s.instances])[0]):
            sampled.append(r.sampled_bag)
            stage1.append(r.stage1_bag)
            stage2.append(r.stage2_bag)
            clean.append(inst.clean_box)
    return {"sampled": (sampled, clean), "stage1": (stage1, clean), "stage2": (stage2, clean)}


def cmd_report(args) -> int:
    from .evaluation import plot_report

    doc = json.loads(Path(args.metrics).read_text(encoding="utf-8"))
    for key in ("average_iou_at", "noisy_average_iou_at"):
        if key in doc:
            print(key + ": " + ", ".join(f"{k} {v:.4f}" if v is not None else f"{k} n/a" for k, v in doc[key].items()))
    for name, stats in (doc.get("bag_stats") or {}).items():
        print(f"bag {name}: " + ", ".join(f"{k} {v:.4f}" for k, v in stats.items()))
    for bucket, freqs in (doc.get("breakdown") or {}).items():
        print(f"breakdown {bucket}: " + ", ".join(f"{k} {v:.3f}" for k, v in freqs.items()))
    if args.plots:
        for path in plot_report(doc, args.out or Path(args.metrics).parent):
            print(f"wrote {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "inject-noise": cmd_inject_noise,
    "train": cmd_train,
    "refine": cmd_refine,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"boxrefine: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"boxrefine {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
