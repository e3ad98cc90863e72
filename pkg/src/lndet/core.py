"""Shared geometry and container types: volumes, boxes, conversions, IoU.

Axis order is (x, y, z) everywhere, including all file formats. A voxel
index v addresses the grid sample point at continuous coordinate v; box
centers are continuous (fractional voxel) coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Triple = tuple[float, float, float]


def _as_triple(value: Sequence[float]) -> Triple:
    t = tuple(float(v) for v in value)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {len(t)}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True)
class GridSpec:
    """Voxel grid: shape in voxels per axis and spacing in mm per voxel."""

    shape: tuple[int, int, int]
    spacing: Triple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing", _as_triple(self.spacing))
        if len(self.shape) != 3 or any(s < 1 for s in self.shape):
            raise ValueError(f"grid shape must be 3 entries >= 1, got {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"grid spacing must be > 0, got {self.spacing}")


@dataclass(frozen=True)
class Volume:
    """A 3D scalar field plus its grid metadata."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        if tuple(self.data.shape) != self.grid.shape:
            raise ValueError(
                f"data shape {self.data.shape} does not match grid {self.grid.shape}"
            )


@dataclass(frozen=True)
class BBox3D:
    """Axis-aligned box: continuous center (voxels) and per-axis size (voxels)."""

    center: Triple
    size: Triple

    def __post_init__(self):
        object.__setattr__(self, "center", _as_triple(self.center))
        object.__setattr__(self, "size", _as_triple(self.size))
        if any(s <= 0 for s in self.size):
            raise ValueError(f"box size must be > 0 per axis, got {self.size}")

    @property
    def low(self) -> Triple:
        return tuple(c - s / 2 for c, s in zip(self.center, self.size))  # type: ignore[return-value]

    @property
    def high(self) -> Triple:
        return tuple(c + s / 2 for c, s in zip(self.center, self.size))  # type: ignore[return-value]

    def volume(self) -> float:
        return float(np.prod(self.size))


@dataclass(frozen=True)
class Annotation:
    """Ground-truth boxes for one volume."""

    volume_id: str
    boxes: tuple[BBox3D, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class Detection:
    """A decoded candidate: continuous center, per-axis size, and score."""

    center: Triple
    size: Triple
    score: float

    def __post_init__(self):
        object.__setattr__(self, "center", _as_triple(self.center))
        object.__setattr__(self, "size", _as_triple(self.size))
        object.__setattr__(self, "score", float(self.score))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if any(s <= 0 for s in self.size):
            raise ValueError(f"detection size must be > 0 per axis, got {self.size}")

    def as_box(self) -> BBox3D:
        return BBox3D(center=self.center, size=self.size)


def iou3d(a: BBox3D | Detection, b: BBox3D | Detection) -> float:
    """Intersection over union of two axis-aligned 3D boxes. 0 when disjoint."""
    alo, ahi = np.asarray(a.center) - np.asarray(a.size) / 2, np.asarray(a.center) + np.asarray(a.size) / 2
    blo, bhi = np.asarray(b.center) - np.asarray(b.size) / 2, np.asarray(b.center) + np.asarray(b.size) / 2
    overlap = np.minimum(ahi, bhi) - np.maximum(alo, blo)
    if np.any(overlap <= 0):
        return 0.0
    inter = float(np.prod(overlap))
    union = float(np.prod(ahi - alo)) + float(np.prod(bhi - blo)) - inter
    return inter / union


def voxel_to_mm(p: Sequence[float], grid: GridSpec) -> Triple:
    """Convert a voxel-coordinate point to mm (componentwise by spacing)."""
    return tuple(float(v) * s for v, s in zip(_as_triple(p), grid.spacing))  # type: ignore[return-value]


def mm_to_voxel(p: Sequence[float], grid: GridSpec) -> Triple:
    """Inverse of :func:`voxel_to_mm`."""
    return tuple(float(v) / s for v, s in zip(_as_triple(p), grid.spacing))  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# File formats.
#
# Annotations: JSON Lines, one object per volume:
#   {"volume_id": str, "boxes": [[cx,cy,cz,w,h,d], ...]}   (voxel units)
# Detections: JSON Lines, one object per detection:
#   {"volume_id": str, "center": [x,y,z], "size": [w,h,d], "score": s}
# Volumes: flat little-endian float32 array (<base>.f32) with a JSON sidecar
# (<base>.json) carrying shape and spacing.
# ---------------------------------------------------------------------------


def write_annotations(path: str | Path, annotations: Iterable[Annotation]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for ann in annotations:
            record = {
                "volume_id": ann.volume_id,
                "boxes": [list(b.center) + list(b.size) for b in ann.boxes],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_annotations(path: str | Path) -> list[Annotation]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        boxes = tuple(BBox3D(center=b[:3], size=b[3:6]) for b in record["boxes"])
        out.append(Annotation(volume_id=record["volume_id"], boxes=boxes))
    return out


def detection_sort_key(det: Detection):
    # Deterministic output order: score descending, then center lexicographic.
    return (-det.score, det.center)


def write_detections(path: str | Path, per_volume: dict[str, list[Detection]]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for volume_id in sorted(per_volume):
            for det in sorted(per_volume[volume_id], key=detection_sort_key):
                record = {
                    "volume_id": volume_id,
                    "center": list(det.center),
                    "size": list(det.size),
                    "score": det.score,
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_detections(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        det = Detection(center=record["center"], size=record["size"], score=record["score"])
        out.setdefault(record["volume_id"], []).append(det)
    return out


def save_volume(path_base: str | Path, volume: Volume) -> None:
    """Write <base>.f32 (little-endian float32) and <base>.json sidecar."""
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(volume.data, dtype="<f4").tofile(base.with_suffix(".f32"))
    sidecar = {"shape": list(volume.grid.shape), "spacing": list(volume.grid.spacing)}
    base.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_volume(path_base: str | Path) -> Volume:
    base = Path(path_base)
    sidecar = json.loads(base.with_suffix(".json").read_text())
    grid = GridSpec(shape=tuple(sidecar["shape"]), spacing=tuple(sidecar["spacing"]))
    data = np.fromfile(base.with_suffix(".f32"), dtype="<f4")
    if data.size != int(np.prod(grid.shape)):
        raise ValueError(
            f"{base}: file holds {data.size} values, sidecar shape {grid.shape} "
            f"needs {int(np.prod(grid.shape))}"
        )
    return Volume(grid=grid, data=data.reshape(grid.shape))
