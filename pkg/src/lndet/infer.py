"""Full-volume inference: sliding-window stitching of the two model paths,
probability-level fusion, 9x9x9 peak decoding, and greedy 3D NMS."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .core import Detection, Volume, iou3d

DEFAULT_DECODE_THRESHOLD = 0.3
DEFAULT_NMS_IOU = 0.25
DEFAULT_OVERLAP = 15
PEAK_RADIUS = 4  # 9x9x9 neighborhood

# Peaks decoded where the size map is degenerate get this floor so the
# resulting Detection stays valid.
_MIN_SIZE = 1e-3


@dataclass(frozen=True)
class SlidingWindowPlan:
    patch_size: tuple[int, int, int]
    overlap: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]


@dataclass(frozen=True)
class FusedMaps:
    """Full-resolution stitched maps; fused_heatmap drives peak decoding."""

    fused_heatmap: np.ndarray  # (X,Y,Z) in [0,1]
    whd: np.ndarray            # (3,X,Y,Z)
    offsets: np.ndarray        # (3,X,Y,Z)
    seg_prob: np.ndarray       # (X,Y,Z)


def _triple(value, name: str) -> tuple[int, int, int]:
    if np.isscalar(value):
        value = (value,) * 3
    t = tuple(int(v) for v in value)
    if len(t) != 3:
        raise ValueError(f"{name} must be a scalar or 3 entries")
    return t  # type: ignore[return-value]


def plan_windows(volume_shape: Sequence[int], patch_size, overlap=DEFAULT_OVERLAP) -> SlidingWindowPlan:
    """Axis-aligned window origins with stride patch - overlap, final origin
    clamped so windows stay inside the volume and cover every voxel."""
    shape = _triple(volume_shape, "volume_shape")
    patch = _triple(patch_size, "patch_size")
    ovl = _triple(overlap, "overlap")
    per_axis = []
    for L, p, o in zip(shape, patch, ovl):
        if p > L:
            raise ValueError(f"patch size {p} exceeds volume extent {L}")
        if not 0 <= o < p:
            raise ValueError(f"overlap {o} must satisfy 0 <= overlap < patch ({p})")
        stride = p - o
        origins = list(range(0, L - p + 1, stride))
        if origins[-1] != L - p:
            origins.append(L - p)
        per_axis.append(origins)
    origins = tuple(itertools.product(*per_axis))
    return SlidingWindowPlan(patch_size=patch, overlap=ovl, origins=origins)


def stitch(volume: Volume | np.ndarray, seg_model, det_model,
           plan: SlidingWindowPlan, avf_enabled: bool = True) -> FusedMaps:
    """Run seg -> det on every planned window and average overlaps uniformly.

    ``seg_model(patch)`` must return an object with per-level foreground
    probabilities (``prob[0]`` at full resolution); ``det_model(patch, seg)``
    must return heatmap/whd/offsets tensors at full patch resolution. The
    fused heatmap is the mean of the detection heatmap and the segmentation
    foreground probability; with ``avf_enabled`` off it is the detection
    heatmap alone.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    shape = data.shape
    acc = np.zeros((8,) + shape, dtype=np.float64)
    counts = np.zeros(shape, dtype=np.float64)
    px, py, pz = plan.patch_size

    with torch.no_grad():
        for ox, oy, oz in plan.origins:
            patch = np.ascontiguousarray(data[ox:ox + px, oy:oy + py, oz:oz + pz], dtype=np.float32)
            x = torch.from_numpy(patch)[None, None]
            seg_out = seg_model(x)
            det_out = det_model(x, seg_out)
            region = (slice(None), slice(ox, ox + px), slice(oy, oy + py), slice(oz, oz + pz))
            acc[0][region[1:]] += det_out.heatmap[0, 0].numpy()
            acc[1:4][region] += det_out.whd[0].numpy()
            acc[4:7][region] += det_out.offsets[0].numpy()
            acc[7][region[1:]] += seg_out.prob[0][0, 0].numpy()
            counts[region[1:]] += 1.0

    if np.any(counts == 0):
        raise ValueError("sliding-window plan does not cover the volume")
    acc /= counts
    det_heat, whd, offsets, seg_prob = acc[0], acc[1:4], acc[4:7], acc[7]
    fused = (det_heat + seg_prob) / 2.0 if avf_enabled else det_heat
    return FusedMaps(
        fused_heatmap=fused.astype(np.float32),
        whd=whd.astype(np.float32),
        offsets=offsets.astype(np.float32),
        seg_prob=seg_prob.astype(np.float32),
    )


def _is_peak(hm: np.ndarray, u: tuple[int, int, int]) -> bool:
    """Exact peak predicate: u beats every in-bounds 9x9x9 neighbor, with
    value ties going to the lexicographically smaller index."""
    value = hm[u]
    lo = [max(0, u[d] - PEAK_RADIUS) for d in range(3)]
    hi = [min(hm.shape[d], u[d] + PEAK_RADIUS + 1) for d in range(3)]
    window = hm[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    ix, iy, iz = np.meshgrid(*[np.arange(lo[d], hi[d]) for d in range(3)], indexing="ij")
    u_lex_smaller = (
        (ix > u[0])
        | ((ix == u[0]) & (iy > u[1]))
        | ((ix == u[0]) & (iy == u[1]) & (iz > u[2]))
    )
    ok = (window < value) | ((window == value) & u_lex_smaller)
    ok[u[0] - lo[0], u[1] - lo[1], u[2] - lo[2]] = True
    return bool(ok.all())


def decode_peaks(maps: FusedMaps, threshold: float = DEFAULT_DECODE_THRESHOLD) -> list[Detection]:
    """Detections at local maxima of the fused heatmap.

    A voxel is a peak when it reaches ``threshold`` and is the maximum of its
    border-clipped 9x9x9 neighborhood (ties broken toward the smallest index).
    Each peak u yields center u + offsets(u), size whd(u), score heatmap(u).
    """
    hm = maps.fused_heatmap
    filt = ndimage.maximum_filter(hm, size=2 * PEAK_RADIUS + 1, mode="constant", cval=-np.inf)
    candidates = np.argwhere((hm >= threshold) & (hm >= filt))
    dets = []
    for u in map(tuple, candidates):
        if not _is_peak(hm, u):
            continue
        center = np.asarray(u, dtype=float) + maps.offsets[(slice(None),) + u]
        size = np.maximum(maps.whd[(slice(None),) + u], _MIN_SIZE)
        dets.append(Detection(center=tuple(center), size=tuple(size), score=float(hm[u])))
    dets.sort(key=lambda d: (-d.score, d.center))
    return dets


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy suppression by descending score (ties by center): keep a
    detection iff its IoU with every kept detection is <= iou_threshold."""
    ordered = sorted(dets, key=lambda d: (-d.score, d.center))
    kept: list[Detection] = []
    for det in ordered:
        if all(iou3d(det, k) <= iou_threshold for k in kept):
            kept.append(det)
    return kept
