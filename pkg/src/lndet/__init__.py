"""Hybrid 3D lymph-node detection on synthetic phantoms: Gaussian target
encoding from 3D boxes, a segmentation path fused into an anchor-free
detection path, sliding-window inference, and fROC evaluation."""

__version__ = "0.1.0"

from .core import Annotation, BBox3D, Detection, GridSpec, Volume, iou3d

__all__ = [
    "Annotation", "BBox3D", "Detection", "GridSpec", "Volume", "iou3d",
    "__version__",
]
