"""Joint SGD training of all heads and dataset-level refinement."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .dataset import Scene
from .features import load_checkpoint, save_checkpoint
from .model import RefinerModel, build_model, compute_losses, forward_batch, refine_batch

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("total", "basic", "stage1", "stage2", "spsd", "sisd", "det", "beta")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, losses: dict):
        self.epoch, self.step, self.losses = epoch, step, losses
        bad = ", ".join(f"{k}={v}" for k, v in losses.items() if not math.isfinite(v))
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {bad}")


def sgd_step(params, grads, lr: float, momentum: float, state: list | None = None):
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``.

    Works on tensors or numpy arrays; updates in place and returns ``(params, state)``.
    ``None`` gradients leave the parameter and its velocity untouched.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if state is None:
        state = [None] * len(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch at {i}: {tuple(p.shape)} vs {tuple(g.shape)}")
        v = g.clone() if isinstance(g, torch.Tensor) else np.array(g, dtype=np.result_type(g, float))
        if state[i] is not None:
            v = momentum * state[i] + v
        state[i] = v
        p -= lr * v
    return params, state


@dataclass
class TrainResult:
    model: RefinerModel
    refined: list[Scene]
    loss_log: list[dict]
    epoch_refined: list[dict[int, np.ndarray]] = field(default_factory=list)

    def epoch_means(self) -> list[dict]:
        out = []
        for e in sorted({r["epoch"] for r in self.loss_log}):
            rows = [r for r in self.loss_log if r["epoch"] == e]
            out.append({"epoch": e, **{k: float(np.mean([r[k] for r in rows])) for k in LOSS_COLUMNS}})
        return out


def _hide_clean(scenes: list[Scene]) -> list[Scene]:
    return [replace(s, instances=[replace(i, clean_box=None, refined_box=None, score=None) for i in s.instances])
            for s in scenes]


def _objects(scene: Scene):
    boxes = np.array([list(i.noisy_box) for i in scene.instances], dtype=np.float64).reshape(-1, 4)
    return boxes, np.array([i.category for i in scene.instances], dtype=np.int64)


def write_loss_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "step", "lr") + LOSS_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["step"], repr(r["lr"])] + [repr(r[k]) for k in LOSS_COLUMNS])


def save_training_state(path, model: RefinerModel, velocity: list, epoch: int) -> None:
    holder = torch.nn.Module()
    holder.model = model
    for (name, _), v in zip(model.named_parameters(), velocity):
        if v is not None:
            holder.register_buffer("velocity__" + name.replace(".", "__"), v.detach().clone())
    save_checkpoint(path, holder, {"format": "boxrefine-training-state", "epoch": epoch, "config": model.cfg.to_dict()})


def load_training_state(path, cfg: TrainConfig):
    state, meta = load_checkpoint(path)
    if meta.get("format") != "boxrefine-training-state":
        raise ValueError(f"{path}: not a training state file")
    if TrainConfig.from_dict(meta["config"]) != cfg:
        raise ValueError(f"{path}: stored config differs from the requested one")
    model = build_model(cfg, dtype=state["model.trunk.fc1.weight"].dtype)
    model.load_state_dict({k[len("model."):]: v for k, v in state.items() if k.startswith("model.")})
    velocity = [state.get("velocity__" + n.replace(".", "__")) for n, _ in model.named_parameters()]
    return model, velocity, int(meta["epoch"])


def train(scenes: list[Scene], cfg: TrainConfig, log_path=None, state_dir=None, resume_from=None,
          dtype=torch.float32, refine_batch_size: int = 32) -> TrainResult:
    """Optimize the weighted total loss with momentum SGD.

    Only noisy boxes and categories are visible to training. Randomness is keyed
    on ``(seed, epoch[, step])`` so a resumed run replays the same stream.
    ``state_dir`` receives ``epoch_XXX.npz`` training states after each epoch.
    """
    data = [s for s in _hide_clean(scenes) if s.instances]
    if not data:
        raise ValueError("no annotated instances to train on")
    start = 1
    if resume_from is not None:
        model, velocity, done = load_training_state(resume_from, cfg)
        start = done + 1
    else:
        model = build_model(cfg, dtype)
        velocity = None
    params = list(model.parameters())
    rows: list[dict] = []
    epoch_refined: list[dict[int, np.ndarray]] = []
    if state_dir is not None:
        Path(state_dir).mkdir(parents=True, exist_ok=True)

    for epoch in range(start, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
        seen: dict[int, np.ndarray] = {}
        model.train()
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [data[i] for i in order[lo:lo + cfg.batch_size]]
            rng = np.random.default_rng([cfg.seed, epoch, step])
            out = forward_batch(model, [s.image for s in batch], [_objects(s) for s in batch], cfg, rng)
            losses = compute_losses(out, cfg)
            values = {k: float(losses[k].detach()) for k in LOSS_COLUMNS}
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingDivergedError(epoch, step, values)
            model.zero_grad(set_to_none=True)
            losses["total"].backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            with torch.no_grad():
                _, velocity = sgd_step(params, [p.grad for p in params], lr, cfg.momentum, velocity)
            rows.append({"epoch": epoch, "step": step, "lr": lr, **values})
            ids = [i.instance_id for s in batch for i in s.instances]
            seen.update(zip(ids, out.final_box))
        epoch_refined.append(seen)
        log.info("epoch %d lr %.4g mean loss %.4f", epoch, lr,
                 np.mean([r["total"] for r in rows if r["epoch"] == epoch]))
        if state_dir is not None:
            save_training_state(Path(state_dir) / f"epoch_{epoch:03d}.npz", model, velocity, epoch)

    if log_path is not None:
        write_loss_log(log_path, rows)
    refined = refine_dataset(scenes, model, cfg, refine_batch_size)
    return TrainResult(model, refined, rows, epoch_refined)


def refine_dataset(scenes: list[Scene], model: RefinerModel, cfg: TrainConfig | None = None,
                   batch_size: int = 32) -> list[Scene]:
    """Fill ``refined_box`` and ``score`` for every instance; inputs are not modified."""
    cfg = cfg or model.cfg
    model.eval()
    out: list[Scene] = []
    for lo in range(0, len(scenes), batch_size):
        chunk = scenes[lo:lo + batch_size]
        by_size: dict[tuple, list[int]] = {}
        for j, s in enumerate(chunk):
            by_size.setdefault(s.image.shape, []).append(j)
        results: dict[int, list] = {}
        for idx in by_size.values():
            res = refine_batch(model, [chunk[j].image for j in idx], [chunk[j].instances for j in idx], cfg)
            results.update(zip(idx, res))
        for j, s in enumerate(chunk):
            insts = [replace(inst, refined_box=r.refined_box, score=r.stage2.bag_score_of_gt_class)
                     for inst, r in zip(s.instances, results[j])]
            out.append(replace(s, instances=insts))
    return out
