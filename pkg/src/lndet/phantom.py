"""Deterministic synthetic 3D phantoms: low-contrast ellipsoidal nodes among
vessel-like tube distractors, with exact tight bounding-box annotations.

Intensity layout (before noise): smooth background around
``background_intensity`` whose bright patches rival the node band, tubes at
``vessel_intensity``, ellipsoids at a per-node intensity drawn from
``node_intensity``. Nodes overwrite vessels and are only placed where the
background stays near its base level, so each node keeps a real local
contrast margin. All randomness flows from a single per-volume seed, so
identical (seed, config) pairs give bit-identical volumes and annotations.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Annotation, BBox3D, GridSpec, Volume, load_volume, read_annotations, save_volume, write_annotations

# Amplitude of the smooth low-frequency background variation. With the coarse
# field clipped at +-_LOWFREQ_CLIP sigma the background spans roughly
# 0.02..0.38, so its bright patches reach the node intensity band and no
# single global intensity threshold separates nodes from background. Node
# placement rejects candidate sites whose mean background exceeds
# background_intensity + _NODE_BG_CAP, which keeps every node >= 0.11 above
# its local surroundings.
_LOWFREQ_AMPLITUDE = 0.08
_LOWFREQ_CLIP = 2.25
_LOWFREQ_GRID = 6
_NODE_BG_CAP = 0.04
# Margin (voxels) between an ellipsoid surface and the grid boundary.
_EDGE_MARGIN = 1.0


@dataclass(frozen=True)
class PhantomConfig:
    grid_shape: tuple[int, int, int] = (64, 64, 64)
    nodes_per_volume: tuple[int, int] = (1, 8)
    node_semiaxes: tuple[float, float] = (2.5, 10.0)
    node_intensity: tuple[float, float] = (0.35, 0.45)
    background_intensity: float = 0.20
    vessel_intensity: float = 0.60
    vessel_count: tuple[int, int] = (2, 5)
    cluster_probability: float = 0.3
    noise_sigma: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))
        object.__setattr__(self, "nodes_per_volume", tuple(int(v) for v in self.nodes_per_volume))
        object.__setattr__(self, "node_semiaxes", tuple(float(v) for v in self.node_semiaxes))
        object.__setattr__(self, "node_intensity", tuple(float(v) for v in self.node_intensity))
        object.__setattr__(self, "vessel_count", tuple(int(v) for v in self.vessel_count))
        for name in ("nodes_per_volume", "node_semiaxes", "node_intensity", "vessel_count"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if self.nodes_per_volume[0] < 0:
            raise ValueError("nodes_per_volume must be non-negative")
        for name in ("node_intensity", "background_intensity", "vessel_intensity"):
            vals = getattr(self, name)
            vals = vals if isinstance(vals, tuple) else (vals,)
            if any(not 0.0 <= v <= 1.0 for v in vals):
                raise ValueError(f"{name} must lie in [0, 1], got {vals}")
        if self.node_semiaxes[0] <= 0:
            raise ValueError("node_semiaxes must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.cluster_probability <= 1.0:
            raise ValueError("cluster_probability must be in [0, 1]")
        # Largest node (plus boundary margin) must fit in the grid.
        need = 2 * (self.node_semiaxes[1] + _EDGE_MARGIN)
        if need >= min(self.grid_shape) - 1:
            raise ValueError(
                f"max node (extent {need:.1f} voxels) cannot fit in grid {self.grid_shape}"
            )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class ManifestEntry:
    volume_id: str
    volume_path: str  # relative base path, suffixes .f32/.json appended
    boxes: tuple[tuple[float, ...], ...]  # (cx,cy,cz,w,h,d) per box


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int
    config: PhantomConfig

    def __post_init__(self):
        ids = [e.volume_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("volume_ids in a manifest must be unique")


def _bezier(points: np.ndarray, n_samples: int) -> np.ndarray:
    """Sample a cubic Bezier curve through 4 control points, shape (n, 3)."""
    t = np.linspace(0.0, 1.0, n_samples)[:, None]
    p0, p1, p2, p3 = points
    return ((1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1
            + 3 * (1 - t) * t**2 * p2 + t**3 * p3)


def _stamp_tube(data: np.ndarray, pts: np.ndarray, radius: float, value: float) -> None:
    shape = np.array(data.shape)
    r = float(radius)
    for p in pts:
        lo = np.maximum(np.floor(p - r).astype(int), 0)
        hi = np.minimum(np.floor(p + r).astype(int) + 1, shape)
        if np.any(lo >= hi):
            continue
        xs, ys, zs = [np.arange(lo[d], hi[d]) for d in range(3)]
        dx2 = (xs - p[0])[:, None, None] ** 2
        dy2 = (ys - p[1])[None, :, None] ** 2
        dz2 = (zs - p[2])[None, None, :] ** 2
        inside = dx2 + dy2 + dz2 <= r * r
        sub = data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        sub[inside] = value


def _stamp_ellipsoid(data: np.ndarray, center: np.ndarray, semiaxes: np.ndarray, value: float) -> None:
    shape = np.array(data.shape)
    lo = np.maximum(np.floor(center - semiaxes).astype(int), 0)
    hi = np.minimum(np.floor(center + semiaxes).astype(int) + 1, shape)
    xs, ys, zs = [np.arange(lo[d], hi[d]) for d in range(3)]
    qx = ((xs - center[0]) / semiaxes[0])[:, None, None] ** 2
    qy = ((ys - center[1]) / semiaxes[1])[None, :, None] ** 2
    qz = ((zs - center[2]) / semiaxes[2])[None, None, :] ** 2
    inside = qx + qy + qz <= 1.0
    sub = data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    sub[inside] = value


def _boxes_disjoint(center: np.ndarray, semiaxes: np.ndarray, placed: list[tuple[np.ndarray, np.ndarray]]) -> bool:
    for c, s in placed:
        if np.all(np.abs(center - c) < semiaxes + s):
            return False
    return True


def _clip_box(center: np.ndarray, semiaxes: np.ndarray, shape: tuple[int, int, int]) -> BBox3D:
    # Tight bbox of the ellipsoid, clipped to the grid's sample hull.
    lo = np.maximum(center - semiaxes, 0.0)
    hi = np.minimum(center + semiaxes, np.array(shape, dtype=float) - 1.0)
    return BBox3D(center=tuple((lo + hi) / 2), size=tuple(hi - lo))


def generate_phantom(seed: int, config: PhantomConfig | None = None) -> tuple[Volume, Annotation]:
    """Generate one phantom volume and its ground-truth annotation.

    Deterministic in (seed, config). Node bounding boxes never overlap;
    clustered pairs sit 1-2 voxels apart along one axis and consume two of
    the sampled node slots, so per-volume node counts stay inside
    ``nodes_per_volume``.
    """
    config = config or PhantomConfig()
    rng = np.random.default_rng(seed)
    shape = config.grid_shape
    L = np.array(shape, dtype=float)

    # Background: base level plus smooth low-frequency variation.
    coarse = np.clip(rng.normal(0.0, 1.0, (_LOWFREQ_GRID,) * 3), -_LOWFREQ_CLIP, _LOWFREQ_CLIP)
    zoom = [s / _LOWFREQ_GRID for s in shape]
    lowfreq = ndimage.zoom(coarse, zoom, order=1, mode="nearest")
    data = config.background_intensity + _LOWFREQ_AMPLITUDE * lowfreq
    data = data.astype(np.float64)
    background = data.copy()  # pre-vessel field, used to vet node sites

    # Vessel-like tubes: cubic Bezier curves crossing the volume.
    n_vessels = int(rng.integers(config.vessel_count[0], config.vessel_count[1] + 1))
    for _ in range(n_vessels):
        axis = int(rng.integers(0, 3))
        p0 = rng.uniform(0, L - 1)
        p3 = rng.uniform(0, L - 1)
        p0[axis], p3[axis] = 0.0, L[axis] - 1
        p1 = rng.uniform(0.2 * (L - 1), 0.8 * (L - 1))
        p2 = rng.uniform(0.2 * (L - 1), 0.8 * (L - 1))
        radius = float(rng.uniform(1.0, 3.0))
        pts = _bezier(np.stack([p0, p1, p2, p3]), n_samples=256)
        _stamp_tube(data, pts, radius, config.vessel_intensity)

    # Ellipsoidal nodes; cluster pairs consume two slots.
    n_nodes = int(rng.integers(config.nodes_per_volume[0], config.nodes_per_volume[1] + 1))
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    nodes: list[tuple[np.ndarray, np.ndarray, float]] = []

    def bg_ok(center: np.ndarray, semiaxes: np.ndarray) -> bool:
        # Nodes only go where the smooth background is near its base level;
        # bright patches stay node-free so local contrast is guaranteed.
        lo = np.maximum(np.floor(center - semiaxes).astype(int), 0)
        hi = np.minimum(np.floor(center + semiaxes).astype(int) + 1, np.array(shape))
        local = background[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        return float(local.mean()) <= config.background_intensity + _NODE_BG_CAP

    def draw_center(semiaxes: np.ndarray) -> np.ndarray | None:
        lo = semiaxes + _EDGE_MARGIN
        hi = L - 1 - semiaxes - _EDGE_MARGIN
        if np.any(lo >= hi):
            return None
        for _ in range(200):
            c = rng.uniform(lo, hi)
            if _boxes_disjoint(c, semiaxes, placed) and bg_ok(c, semiaxes):
                return c
        return None

    while len(nodes) < n_nodes:
        semiaxes = rng.uniform(config.node_semiaxes[0], config.node_semiaxes[1], 3)
        intensity = float(rng.uniform(*config.node_intensity))
        center = draw_center(semiaxes)
        if center is None:
            semiaxes = np.full(3, config.node_semiaxes[0])
            center = draw_center(semiaxes)
            if center is None:
                break  # grid saturated; keep what fits
        placed.append((center, semiaxes))
        nodes.append((center, semiaxes, intensity))

        if len(nodes) < n_nodes and rng.uniform() < config.cluster_probability:
            gap = float(rng.uniform(1.0, 2.0))
            for axis in rng.permutation(3):
                for sign in rng.permutation([-1.0, 1.0]):
                    c2 = center.copy()
                    c2[axis] += sign * (2 * semiaxes[axis] + gap)
                    lo = semiaxes + _EDGE_MARGIN
                    hi = L - 1 - semiaxes - _EDGE_MARGIN
                    if (np.all(c2 >= lo) and np.all(c2 <= hi)
                            and _boxes_disjoint(c2, semiaxes, placed) and bg_ok(c2, semiaxes)):
                        placed.append((c2, semiaxes))
                        nodes.append((c2, semiaxes, intensity))
                        break
                else:
                    continue
                break

    for center, semiaxes, intensity in nodes:
        _stamp_ellipsoid(data, center, semiaxes, intensity)

    if config.noise_sigma > 0:
        data = data + rng.normal(0.0, config.noise_sigma, shape)
    data = np.clip(data, 0.0, 1.0).astype(np.float32)

    grid = GridSpec(shape=shape)
    boxes = tuple(_clip_box(c, s, shape) for c, s, _ in nodes)
    volume_id = f"vol_{seed:08d}"
    return Volume(grid=grid, data=data), Annotation(volume_id=volume_id, boxes=boxes)


def generate_dataset(n: int, seed: int, config: PhantomConfig | None = None,
                     out_dir: str | Path = ".") -> DatasetManifest:
    """Write ``n`` phantoms (per-sample seed = seed + index), annotations
    JSONL, and a manifest JSON to ``out_dir``. Re-running with the same
    arguments reproduces identical bytes."""
    if n < 1:
        raise ValueError("n must be >= 1")
    config = config or PhantomConfig()
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)

    entries = []
    annotations = []
    for i in range(n):
        volume, annotation = generate_phantom(seed + i, config)
        rel_base = f"volumes/{annotation.volume_id}"
        save_volume(out_dir / rel_base, volume)
        annotations.append(annotation)
        entries.append(ManifestEntry(
            volume_id=annotation.volume_id,
            volume_path=rel_base,
            boxes=tuple(tuple(b.center) + tuple(b.size) for b in annotation.boxes),
        ))

    write_annotations(out_dir / "annotations.jsonl", annotations)
    manifest = DatasetManifest(entries=tuple(entries), seed=seed, config=config)
    payload = {
        "seed": manifest.seed,
        "config": config.to_dict(),
        "entries": [
            {"volume_id": e.volume_id, "volume_path": e.volume_path,
             "boxes": [list(b) for b in e.boxes]}
            for e in manifest.entries
        ],
    }
    (out_dir / "manifest.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return manifest


def load_manifest(dataset_dir: str | Path) -> DatasetManifest:
    dataset_dir = Path(dataset_dir)
    payload = json.loads((dataset_dir / "manifest.json").read_text())
    entries = tuple(
        ManifestEntry(volume_id=e["volume_id"], volume_path=e["volume_path"],
                      boxes=tuple(tuple(b) for b in e["boxes"]))
        for e in payload["entries"]
    )
    return DatasetManifest(entries=entries, seed=payload["seed"],
                           config=PhantomConfig.from_dict(payload["config"]))


def load_dataset(dataset_dir: str | Path) -> list[tuple[Volume, Annotation]]:
    """Load all (volume, annotation) pairs referenced by a dataset manifest."""
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    by_id = {a.volume_id: a for a in read_annotations(dataset_dir / "annotations.jsonl")}
    out = []
    for entry in manifest.entries:
        volume = load_volume(dataset_dir / entry.volume_path)
        out.append((volume, by_id[entry.volume_id]))
    return out
