"""Optimization loop, per-epoch evaluation, and A/B comparison of configurations."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import TRAIN_STREAM, VAL_STREAM, Dataset, derive_seed, jitter_scene, make_split
from .evaluate import evaluate
from .matching import set_loss
from .model import SMCAModel
from .tensor import Tensor, backward, clear_tape

logger = logging.getLogger(__name__)

LOG_FIELDS = [
    "epoch",
    "lr",
    "loss",
    "loss_cls",
    "loss_l1",
    "loss_giou",
    "ap50",
    "ap75",
    "map",
    "ap_small",
    "ap_medium",
    "ap_large",
]


class TrainingDiverged(FloatingPointError):
    pass


class AdamW:
    """Adam with decoupled weight decay; each group carries its own base learning rate."""

    def __init__(self, groups: list[tuple[list[Tensor], float]], weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.groups = groups
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for ps, _ in groups for p in ps}
        self.v = {id(p): np.zeros_like(p.data) for ps, _ in groups for p in ps}

    def step(self, lr_factor: float = 1.0) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for params, base_lr in self.groups:
            lr = base_lr * lr_factor
            for p in params:
                g = p.grad
                m = self.m[id(p)]
                v = self.v[id(p)]
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                p.data *= 1 - lr * self.weight_decay
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def params(self):
        return [p for ps, _ in self.groups for p in ps]


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total


def make_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    train = make_split(cfg.seed, cfg.train_scenes, cfg.scene, TRAIN_STREAM)
    val = make_split(cfg.seed, cfg.val_scenes, cfg.scene, VAL_STREAM)
    return train, val


def _dump_diagnostics(out_dir, model, index, image, gt, loss_value):
    if out_dir is None:
        return None
    path = Path(out_dir) / "divergence_dump.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"non-finite loss {loss_value} at train scene {index}\n")
        fh.write(f"labels {gt.labels.tolist()}\nboxes {gt.boxes.tolist()}\n")
        fh.write(f"image min {image.min():.4g} max {image.max():.4g}\n")
        for name, p in model.named_parameters():
            fh.write(f"{name} norm {np.linalg.norm(p.data):.6g}\n")
    np.save(Path(out_dir) / "divergence_image.npy", image)
    return path


def train(
    cfg: TrainConfig,
    data: tuple[Dataset, Dataset] | None = None,
    out_dir=None,
    eval_every: int = 1,
    progress: bool = False,
):
    """Train a detector from scratch.

    Returns (model, log rows). With ``out_dir`` set, writes ``metrics.csv``
    after every epoch and ``model.ckpt`` at the end.
    """
    cfg.validate()
    train_set, val_set = data if data is not None else make_datasets(cfg)
    model = SMCAModel(cfg)
    backbone_ids = {id(p) for p in model.backbone_parameters()}
    others = [p for p in model.parameters() if id(p) not in backbone_ids]
    opt = AdamW([(others, cfg.lr), (model.backbone_parameters(), cfg.lr_backbone)], weight_decay=cfg.weight_decay)
    params = opt.params()
    model.zero_grad()

    log: list[dict] = []
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        with open(metrics_path, "w", newline="") as fh:
            csv.DictWriter(fh, LOG_FIELDS).writeheader()

    for epoch in range(cfg.epochs):
        factor = cfg.lr_factor(epoch)
        rng = np.random.default_rng(derive_seed(cfg.seed, epoch, stream=3))
        order = rng.permutation(len(train_set))
        sums = np.zeros(4)
        pending = 0
        for step, idx in enumerate(order):
            image, gt = jitter_scene(train_set.images[idx], train_set.targets[idx], rng, cfg.jitter, cfg.scene.noise)
            preds = model(image)
            # non-finite predictions would otherwise fail inside the matcher
            finite = all(np.isfinite(t.data).all() for t in preds.logits + preds.boxes)
            breakdown = set_loss(preds, gt, cls_cost=cfg.cls_cost) if finite else None
            value = float(breakdown.total.data) if finite else float("nan")
            if not np.isfinite(value):
                clear_tape()
                dump = _dump_diagnostics(out_dir, model, int(idx), image, gt, value)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, scene {idx}; diagnostics: {dump}")
            # mean over the accumulation group
            backward(breakdown.total * (1.0 / cfg.accumulate))
            sums += [value, breakdown.cls, breakdown.l1, breakdown.giou]
            pending += 1
            if pending == cfg.accumulate or step == len(order) - 1:
                if pending != cfg.accumulate:
                    for p in params:
                        p.grad *= cfg.accumulate / pending
                clip_grad_norm(params, cfg.clip_norm)
                opt.step(factor)
                model.zero_grad()
                pending = 0
        n = max(len(order), 1)
        row = {
            "epoch": epoch,
            "lr": cfg.lr * factor,
            "loss": sums[0] / n,
            "loss_cls": sums[1] / n,
            "loss_l1": sums[2] / n,
            "loss_giou": sums[3] / n,
        }
        if eval_every and ((epoch + 1) % eval_every == 0 or epoch == cfg.epochs - 1):
            row.update(evaluate(model, val_set).as_row())
        else:
            row.update({k: float("nan") for k in LOG_FIELDS[6:]})
        log.append(row)
        if progress:
            logger.info("epoch %d loss %.4f ap50 %.4f", epoch, row["loss"], row["ap50"])
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.DictWriter(fh, LOG_FIELDS).writerow(row)
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", model)
    return model, log


def compare(cfg_a: TrainConfig, cfg_b: TrainConfig, seeds, out_dir=None, names=("a", "b")) -> dict:
    """Train both configurations for every seed; report per-epoch AP@0.5 mean and spread.

    The verdict margin is mean final AP@0.5 of ``b`` minus that of ``a``.
    """
    curves = {name: [] for name in names}
    for seed in seeds:
        for name, cfg in zip(names, (cfg_a, cfg_b)):
            run_cfg = dataclasses.replace(cfg, seed=int(seed))
            run_dir = None if out_dir is None else Path(out_dir) / f"{name}_seed{seed}"
            _, log = train(run_cfg, out_dir=run_dir)
            curves[name].append([row["ap50"] for row in log])
    epochs = min(len(c) for runs in curves.values() for c in runs)
    stats = {}
    for name, runs in curves.items():
        arr = np.array([r[:epochs] for r in runs])
        stats[name] = {"mean": arr.mean(axis=0), "std": arr.std(axis=0), "final": arr[:, -1]}
    margin = float(stats[names[1]]["mean"][-1] - stats[names[0]]["mean"][-1])
    report = {"names": names, "seeds": list(seeds), "stats": stats, "margin": margin}
    if out_dir is not None:
        write_comparison(report, out_dir)
    return report


def write_comparison(report: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = report["names"]
    stats = report["stats"]
    epochs = len(stats[names[0]]["mean"])
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + [f"{n}_{k}" for n in names for k in ("ap50_mean", "ap50_std")])
        for e in range(epochs):
            writer.writerow([e] + [f"{stats[n][k][e]:.6f}" for n in names for k in ("mean", "std")])
    a, b = names
    lines = [
        f"seeds: {report['seeds']}",
        f"{a}: final AP50 {stats[a]['mean'][-1]:.4f} +/- {stats[a]['std'][-1]:.4f}",
        f"{b}: final AP50 {stats[b]['mean'][-1]:.4f} +/- {stats[b]['std'][-1]:.4f}",
        f"margin ({b} - {a}): {report['margin']:+.4f}",
    ]
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")


def ablate(base: TrainConfig, arrangements, out_dir=None, eval_every: int = 1) -> list[dict]:
    """Train one model per encoder arrangement; one summary row per arrangement.

    Rows hold the arrangement, encoder parameter count, final loss and final
    AP@0.5. With ``out_dir`` set the rows go to ``ablation.csv``.
    """
    rows = []
    for name in arrangements:
        cfg = dataclasses.replace(base, encoder=name)
        run_dir = None if out_dir is None else Path(out_dir) / name
        model, log = train(cfg, out_dir=run_dir, eval_every=eval_every)
        rows.append(
            {
                "encoder": name,
                "encoder_params": model.encoder.num_parameters(),
                "final_loss": log[-1]["loss"],
                "final_ap50": log[-1]["ap50"],
            }
        )
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "ablation.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows
