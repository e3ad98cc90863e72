"""Two-stage training: the segmentation path first, then the detection path
against frozen segmentation features. Polynomial lr decay stepped per epoch,
Adam, balanced patch sampling (a fixed fraction of draws must contain a
node center), per-draw seeded RNG so runs are reproducible."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import Annotation, BBox3D, GridSpec, Volume
from .loss import DetLossWeights, SegLossWeights, det_loss, seg_loss
from .model import (DetNet, DetPathConfig, SegNet, SegPathConfig,
                    load_checkpoint, save_checkpoint)
from .targets import TargetConfig, render_pseudo_mask, render_regression_maps

_SEG_STAGE, _DET_STAGE = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    initial_lr: float = 1e-3
    poly_power: float = 0.9
    patch_size: tuple[int, int, int] = (32, 32, 32)
    batch_size: int = 2
    ln_patch_fraction: float = 0.4
    seed: int = 0
    freeze_seg: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0.0 <= self.ln_patch_fraction <= 1.0:
            raise ValueError("ln_patch_fraction must be in [0, 1]")
        if len(self.patch_size) != 3 or any(p < 8 or p % 8 for p in self.patch_size):
            raise ValueError(f"patch dims must be positive multiples of 8, got {self.patch_size}")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """initial_lr * (1 - epoch/epochs)^poly_power, stepped per epoch."""
    if not 0 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    return config.initial_lr * (1.0 - epoch / config.epochs) ** config.poly_power


def steps_per_epoch(dataset_size: int, batch_size: int) -> int:
    return math.ceil(dataset_size / batch_size)


def _center_origin_range(c: float, patch: int, limit: int) -> tuple[int, int]:
    # integer origins o with o <= c < o + patch, clamped into [0, limit]
    lo = max(0, int(math.floor(c - patch)) + 1)
    hi = min(limit, int(math.floor(c)))
    return lo, hi


def _positive_origin(boxes: Sequence[BBox3D], shape, patch, rng: np.random.Generator):
    """Uniform draw over the union of window origins containing >= 1 box
    center: pick a box's origin cuboid weighted by its size, draw inside it,
    accept with probability 1/(number of cuboids covering the draw)."""
    limits = [s - p for s, p in zip(shape, patch)]
    ranges = [
        tuple(_center_origin_range(c, p, lim)
              for c, p, lim in zip(b.center, patch, limits))
        for b in boxes
    ]
    weights = np.array([np.prod([hi - lo + 1 for lo, hi in r]) for r in ranges], dtype=float)
    weights /= weights.sum()
    for _ in range(10000):
        r = ranges[rng.choice(len(ranges), p=weights)]
        o = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in r)
        covering = sum(all(lo <= od <= hi for od, (lo, hi) in zip(o, rr)) for rr in ranges)
        if rng.random() < 1.0 / covering:
            return o
    raise RuntimeError("positive window sampling failed to accept")


def _window_annotation(annotation: Annotation, origin, patch) -> Annotation:
    """Translate boxes into window coordinates, drop boxes whose center falls
    outside, clip the survivors' extents to the window."""
    kept = []
    for b in annotation.boxes:
        c = np.asarray(b.center) - np.asarray(origin)
        if np.any(c < 0) or np.any(c >= np.asarray(patch)):
            continue
        low = np.maximum(np.asarray(b.low) - np.asarray(origin), 0.0)
        high = np.minimum(np.asarray(b.high) - np.asarray(origin), np.asarray(patch, dtype=float))
        kept.append(BBox3D(center=tuple((low + high) / 2), size=tuple(high - low)))
    return Annotation(volume_id=annotation.volume_id, boxes=tuple(kept))


def sample_patch(dataset: Sequence[tuple[Volume, Annotation]], config: TrainConfig,
                 rng: np.random.Generator) -> tuple[Volume, Annotation]:
    """Draw one training patch: volume uniform, then with probability
    ln_patch_fraction a window guaranteed to contain a node center (uniform
    over eligible windows), otherwise uniform over all windows. Volumes with
    no boxes fall back to uniform draws."""
    if not dataset:
        raise ValueError("empty dataset")
    volume, annotation = dataset[rng.integers(len(dataset))]
    shape, patch = volume.grid.shape, config.patch_size
    if any(s < p for s, p in zip(shape, patch)):
        raise ValueError(f"volume {annotation.volume_id} shape {shape} smaller than patch {patch}")
    if annotation.boxes and rng.random() < config.ln_patch_fraction:
        origin = _positive_origin(annotation.boxes, shape, patch, rng)
    else:
        origin = tuple(int(rng.integers(0, s - p + 1)) for s, p in zip(shape, patch))
    px, py, pz = patch
    data = np.ascontiguousarray(
        volume.data[origin[0]:origin[0] + px, origin[1]:origin[1] + py, origin[2]:origin[2] + pz])
    grid = GridSpec(shape=patch, spacing=volume.grid.spacing)
    return Volume(grid=grid, data=data), _window_annotation(annotation, origin, patch)


def _draw_rng(seed: int, stage: int, epoch: int, step: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, epoch, step, i])


def _batch(dataset, config: TrainConfig, stage: int, epoch: int, step: int):
    draws = [sample_patch(dataset, config, _draw_rng(config.seed, stage, epoch, step, i))
             for i in range(config.batch_size)]
    vols, annos = zip(*draws)
    x = torch.from_numpy(np.stack([v.data for v in vols])[:, None].astype(np.float32))
    return x, vols, annos


class _CsvLog:
    def __init__(self, path: Path, part_names: Sequence[str]):
        self.part_names = list(part_names)
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(["epoch", "step", "lr", "loss", *self.part_names])

    def row(self, epoch, step, lr, loss, parts: dict):
        self.writer.writerow([epoch, step, repr(lr), repr(loss)]
                             + [repr(parts[k]) for k in self.part_names])

    def close(self):
        self.fh.close()


def _run_epochs(dataset, config: TrainConfig, stage: int, params, step_fn, log_path: Path):
    opt = torch.optim.Adam(params, lr=config.initial_lr)
    steps = steps_per_epoch(len(dataset), config.batch_size)
    log = None
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config)
            for group in opt.param_groups:
                group["lr"] = lr
            for step in range(steps):
                loss, parts = step_fn(epoch, step)
                if not torch.isfinite(loss):
                    raise RuntimeError(f"training diverged at epoch {epoch} step {step}: {loss}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                if log is None:
                    log = _CsvLog(log_path, sorted(parts))
                log.row(epoch, step, lr, float(loss.detach()), parts)
    finally:
        if log is not None:
            log.close()


def train_seg(dataset: Sequence[tuple[Volume, Annotation]], out_dir: str | Path,
              seg_config: SegPathConfig | None = None,
              train_config: TrainConfig | None = None,
              target_config: TargetConfig | None = None,
              weights: SegLossWeights | None = None) -> Path:
    """Train the segmentation path against pseudo-mask pyramids; returns the
    checkpoint path. Writes train_seg_log.csv next to it."""
    seg_config = seg_config or SegPathConfig()
    config = train_config or TrainConfig()
    target_config = target_config or TargetConfig()
    if weights is None:
        weights = SegLossWeights() if seg_config.deep_supervision else \
            SegLossWeights(alpha=(1.0, 0.0, 0.0, 0.0), beta=(1.0, 0.0, 0.0, 0.0))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    model = SegNet(seg_config)
    model.train()

    def step_fn(epoch, step):
        x, vols, annos = _batch(dataset, config, _SEG_STAGE, epoch, step)
        pyramids = [render_pseudo_mask(a, v.grid, target_config)
                    for v, a in zip(vols, annos)]
        masks = [
            torch.from_numpy(np.stack([p.masks[level] for p in pyramids]).astype(np.float32))
            for level in range(4)
        ]
        out = model(x)
        return seg_loss(out.prob, masks, weights)

    _run_epochs(dataset, config, _SEG_STAGE, model.parameters(), step_fn,
                out_dir / "train_seg_log.csv")
    path = out_dir / "seg.pt"
    save_checkpoint(path, model, seed=config.seed)
    return path


def train_det(dataset: Sequence[tuple[Volume, Annotation]], seg_checkpoint: str | Path,
              out_dir: str | Path,
              det_config: DetPathConfig | None = None,
              train_config: TrainConfig | None = None,
              target_config: TargetConfig | None = None,
              weights: DetLossWeights | None = None) -> Path:
    """Train the detection path on top of a segmentation checkpoint. The seg
    path is frozen unless config.freeze_seg is off (joint fine-tuning)."""
    det_config = det_config or DetPathConfig()
    config = train_config or TrainConfig()
    target_config = target_config or TargetConfig()
    weights = weights or DetLossWeights()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seg_model, _ = load_checkpoint(seg_checkpoint, kind="seg")
    assert isinstance(seg_model, SegNet)
    if config.freeze_seg:
        seg_model.eval()
        for p in seg_model.parameters():
            p.requires_grad_(False)
    else:
        seg_model.train()

    torch.manual_seed(config.seed)
    model = DetNet(det_config, seg_model.config)
    model.train()
    params = list(model.parameters())
    if not config.freeze_seg:
        params += list(seg_model.parameters())

    def step_fn(epoch, step):
        x, vols, annos = _batch(dataset, config, _DET_STAGE, epoch, step)
        maps = [render_regression_maps(a, v.grid, target_config)
                for v, a in zip(vols, annos)]
        gt_heat = torch.from_numpy(np.stack([m.heatmap for m in maps]))
        gt_whd = torch.from_numpy(np.stack([m.whd for m in maps]))
        gt_off = torch.from_numpy(np.stack([m.offsets for m in maps]))
        centers = torch.from_numpy(np.stack([m.center_mask for m in maps]))
        if config.freeze_seg:
            with torch.no_grad():
                seg_out = seg_model(x)
        else:
            seg_out = seg_model(x)
        out = model(x, seg_out)
        return det_loss(out.heatmap, out.whd, out.offsets,
                        gt_heat, gt_whd, gt_off, centers, weights)

    _run_epochs(dataset, config, _DET_STAGE, params, step_fn, out_dir / "train_det_log.csv")
    path = out_dir / "det.pt"
    save_checkpoint(path, model, seed=config.seed, seg_ref=str(seg_checkpoint),
                    extra={"freeze_seg": config.freeze_seg})
    return path
