"""Supervision encoding: shape-adaptive Gaussian heatmaps from 3D boxes,
pseudo-mask pyramids for the segmentation path, and size/offset regression
maps for the detection path.

Geometry conventions used throughout:

* Per-axis kernel width ``sigma_d = max(size_d / sigma_divisor, sigma_min)``
  with divisor 6, so the box face sits at 3 sigma and the thresholded kernel
  (threshold ``exp(-9/2)``) is exactly the ellipsoid inscribed in the box.
* The supervised center voxel of a box is the grid sample nearest to the
  continuous center, rounding half fractions down. This is also the argmax
  of the rendered kernel (ties resolve to the lexicographically smallest
  voxel, matching peak decoding), so offsets stored there, in (-0.5, 0.5],
  recover the continuous center exactly.
* Overlapping kernels combine by voxelwise maximum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Annotation, BBox3D, GridSpec, Volume, load_volume, save_volume

ENCODER_VERSION = "enc-1"

# 3-sigma surface of the kernel; makes the level-0 pseudo-mask the ellipsoid
# inscribed in the bounding box.
DEFAULT_MASK_THRESHOLD = math.exp(-9.0 / 2.0)


@dataclass(frozen=True)
class TargetConfig:
    sigma_divisor: float = 6.0
    sigma_min: float = 0.5
    mask_threshold: float = DEFAULT_MASK_THRESHOLD
    gaussian_enabled: bool = True  # False renders single-voxel point targets

    def __post_init__(self):
        if self.sigma_divisor <= 0 or self.sigma_min <= 0:
            raise ValueError("sigma_divisor and sigma_min must be > 0")
        if not 0.0 < self.mask_threshold <= 1.0:
            raise ValueError("mask_threshold must be in (0, 1]")


@dataclass(frozen=True)
class KernelSigma:
    sigma: tuple[float, float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.sigma):
            raise ValueError(f"sigma must be > 0 per axis, got {self.sigma}")


@dataclass(frozen=True)
class TargetMaps:
    """The 7-channel detection supervision bundle for one grid."""

    grid: GridSpec
    heatmap: np.ndarray      # (X,Y,Z) float32 in [0,1]
    whd: np.ndarray          # (3,X,Y,Z) float32, voxels; nonzero only at centers
    offsets: np.ndarray      # (3,X,Y,Z) float32 in (-0.5, 0.5]; nonzero only at centers
    center_mask: np.ndarray  # (X,Y,Z) bool, one voxel per annotated box


@dataclass(frozen=True)
class MaskPyramid:
    """Binary masks at scales 1, 1/2, 1/4, 1/8 (max-pooled downsampling)."""

    masks: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]


def kernel_sigma(box: BBox3D, config: TargetConfig | None = None) -> KernelSigma:
    """Per-axis Gaussian width for a box: size/divisor, clamped below."""
    config = config or TargetConfig()
    sigma = tuple(max(s / config.sigma_divisor, config.sigma_min) for s in box.size)
    return KernelSigma(sigma=sigma)


def nearest_voxel(center) -> np.ndarray:
    """Grid sample nearest the continuous point; half fractions round down."""
    c = np.asarray(center, dtype=float)
    return np.ceil(c - 0.5).astype(int)


def _box_quadratic(box: BBox3D, grid: GridSpec, config: TargetConfig) -> np.ndarray:
    """Sum_d (v_d - c_d)^2 / sigma_d^2 over the whole grid, float64."""
    sigma = kernel_sigma(box, config).sigma
    axes = [
        ((np.arange(grid.shape[d], dtype=np.float64) - box.center[d]) / sigma[d]) ** 2
        for d in range(3)
    ]
    return axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :]


def render_heatmap(annotation: Annotation, grid: GridSpec,
                   config: TargetConfig | None = None) -> np.ndarray:
    """Voxelwise maximum of the per-box Gaussian kernels, float32 in [0,1].

    With ``config.gaussian_enabled`` off, each box instead contributes 1.0 at its
    nearest center voxel only (point targets).
    """
    config = config or TargetConfig()
    heatmap = np.zeros(grid.shape, dtype=np.float64)
    for box in annotation.boxes:
        if config.gaussian_enabled:
            q = _box_quadratic(box, grid, config)
            np.maximum(heatmap, np.exp(-q / 2.0), out=heatmap)
        else:
            u = np.clip(nearest_voxel(box.center), 0, np.array(grid.shape) - 1)
            heatmap[tuple(u)] = 1.0
    return heatmap.astype(np.float32)


def _max_pool2(mask: np.ndarray) -> np.ndarray:
    pad = [(0, (-s) % 2) for s in mask.shape]
    if any(p[1] for p in pad):
        mask = np.pad(mask, pad, constant_values=False)
    x, y, z = mask.shape
    return mask.reshape(x // 2, 2, y // 2, 2, z // 2, 2).any(axis=(1, 3, 5))


def render_pseudo_mask(annotation: Annotation, grid: GridSpec,
                       config: TargetConfig | None = None) -> MaskPyramid:
    """Thresholded heatmap at full resolution plus three max-pooled halvings."""
    config = config or TargetConfig()
    heatmap = render_heatmap(annotation, grid, config)
    level0 = heatmap >= np.float32(config.mask_threshold)
    masks = [level0]
    for _ in range(3):
        masks.append(_max_pool2(masks[-1]))
    return MaskPyramid(masks=tuple(masks))


def render_regression_maps(annotation: Annotation, grid: GridSpec,
                           config: TargetConfig | None = None) -> TargetMaps:
    """Full supervision bundle: heatmap, per-center size and offset maps.

    Each box claims its nearest center voxel u: center_mask(u) is set,
    offsets(u) = center - u, whd(u) = size. All other voxels are zero in
    whd/offsets. When two boxes share a center voxel the larger-volume box
    wins (first-listed on exact volume ties).
    """
    config = config or TargetConfig()
    shape = grid.shape
    whd = np.zeros((3,) + shape, dtype=np.float32)
    offsets = np.zeros((3,) + shape, dtype=np.float32)
    center_mask = np.zeros(shape, dtype=bool)
    claimed: dict[tuple[int, int, int], float] = {}

    for box in annotation.boxes:
        u = np.clip(nearest_voxel(box.center), 0, np.array(shape) - 1)
        key = tuple(int(v) for v in u)
        vol = box.volume()
        if key in claimed and vol <= claimed[key]:
            continue
        claimed[key] = vol
        center_mask[key] = True
        whd[(slice(None),) + key] = box.size
        offsets[(slice(None),) + key] = np.asarray(box.center) - u

    heatmap = render_heatmap(annotation, grid, config)
    return TargetMaps(grid=grid, heatmap=heatmap, whd=whd, offsets=offsets,
                      center_mask=center_mask)


# ---------------------------------------------------------------------------
# Disk cache: one Volume file per channel, keyed by encoder version and
# volume id: <root>/<version>/<volume_id>/<channel>.f32 (+ sidecar).
# ---------------------------------------------------------------------------

_CHANNELS = ("heatmap", "whd_w", "whd_h", "whd_d", "off_x", "off_y", "off_z", "center_mask")


def save_targets(root: str | Path, volume_id: str, maps: TargetMaps,
                 pyramid: MaskPyramid) -> Path:
    out = Path(root) / ENCODER_VERSION / volume_id
    out.mkdir(parents=True, exist_ok=True)
    grid = maps.grid
    channels = {
        "heatmap": maps.heatmap,
        "whd_w": maps.whd[0], "whd_h": maps.whd[1], "whd_d": maps.whd[2],
        "off_x": maps.offsets[0], "off_y": maps.offsets[1], "off_z": maps.offsets[2],
        "center_mask": maps.center_mask.astype(np.float32),
    }
    for name, data in channels.items():
        save_volume(out / name, Volume(grid=grid, data=np.asarray(data, dtype=np.float32)))
    for i, mask in enumerate(pyramid.masks):
        level_grid = GridSpec(shape=mask.shape, spacing=tuple(
            s * (grid.shape[d] / mask.shape[d]) for d, s in enumerate(grid.spacing)))
        save_volume(out / f"mask_l{i}", Volume(grid=level_grid, data=mask.astype(np.float32)))
    (out / "meta.json").write_text(json.dumps(
        {"encoder_version": ENCODER_VERSION, "volume_id": volume_id}, sort_keys=True) + "\n")
    return out


def load_targets(root: str | Path, volume_id: str) -> tuple[TargetMaps, MaskPyramid]:
    src = Path(root) / ENCODER_VERSION / volume_id
    if not src.exists():
        raise FileNotFoundError(f"no cached targets for {volume_id!r} under {src}")
    vols = {name: load_volume(src / name) for name in _CHANNELS}
    grid = vols["heatmap"].grid
    maps = TargetMaps(
        grid=grid,
        heatmap=vols["heatmap"].data,
        whd=np.stack([vols["whd_w"].data, vols["whd_h"].data, vols["whd_d"].data]),
        offsets=np.stack([vols["off_x"].data, vols["off_y"].data, vols["off_z"].data]),
        center_mask=vols["center_mask"].data > 0.5,
    )
    masks = tuple(load_volume(src / f"mask_l{i}").data > 0.5 for i in range(4))
    return maps, MaskPyramid(masks=masks)  # type: ignore[arg-type]
