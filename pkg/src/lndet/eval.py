"""Detection scoring: greedy center-in-box matching, fROC curves, recall at
fixed false-positive rates, and summary metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .core import BBox3D, Detection


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    matched_pairs: tuple[tuple[int, int], ...]  # (detection index, gt index)


class FrocPoint(NamedTuple):
    avg_fp: float
    recall: float
    threshold: float


@dataclass(frozen=True)
class FrocCurve:
    """Operating points sorted by threshold descending."""

    points: tuple[FrocPoint, ...]


def _strictly_inside(center, box: BBox3D) -> bool:
    return all(abs(c - bc) < s / 2 for c, bc, s in zip(center, box.center, box.size))


def match_detections(dets: Sequence[Detection], gts: Sequence[BBox3D]) -> MatchResult:
    """Greedy one-to-one matching in score order (ties by center).

    A detection is a true positive iff its center lies strictly inside a
    not-yet-matched ground-truth box; among several candidates it takes the
    gt with the nearest center (ties by gt index). Everything else is a
    false positive; unmatched gts are false negatives.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].center))
    taken = [False] * len(gts)
    pairs = []
    fp = 0
    for i in order:
        candidates = [
            j for j, g in enumerate(gts)
            if not taken[j] and _strictly_inside(dets[i].center, g)
        ]
        if not candidates:
            fp += 1
            continue
        j = min(candidates, key=lambda j: (
            float(np.linalg.norm(np.asarray(dets[i].center) - np.asarray(gts[j].center))), j))
        taken[j] = True
        pairs.append((i, j))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=fp, fn=len(gts) - tp, matched_pairs=tuple(pairs))


def _check_curve(points: Sequence[FrocPoint]) -> None:
    """Reject curves that break the fROC invariants: as the threshold drops,
    recall and avg FP must both be non-decreasing, and every point must stay
    inside recall [0, 1], avg_fp >= 0."""
    for prev, cur in zip(points, points[1:]):
        if cur.recall < prev.recall - 1e-12 or cur.avg_fp < prev.avg_fp - 1e-12:
            raise RuntimeError(
                f"fROC monotonicity violated between thresholds {prev.threshold} and {cur.threshold}")
    if any(not 0.0 <= p.recall <= 1.0 or p.avg_fp < 0 for p in points):
        raise RuntimeError("fROC bounds violated")


def froc(per_volume_dets: Mapping[str, Sequence[Detection]],
         per_volume_gts: Mapping[str, Sequence[BBox3D]],
         thresholds: Sequence[float]) -> FrocCurve:
    """Sweep score thresholds and aggregate recall vs average FPs per volume.

    Volume ids of the detections must be a subset of the ground-truth ids;
    gt volumes without detections still count in the FP denominator. The
    resulting curve is checked for the fROC monotonicity invariant (recall
    and avg FP both non-decreasing as the threshold drops).
    """
    unknown = set(per_volume_dets) - set(per_volume_gts)
    if unknown:
        raise ValueError(f"detections reference unknown volume ids: {sorted(unknown)}")
    if not per_volume_gts:
        raise ValueError("empty volume set")

    points = []
    for t in sorted(set(float(t) for t in thresholds), reverse=True):
        tp = fp = fn = 0
        for volume_id, gts in per_volume_gts.items():
            dets = [d for d in per_volume_dets.get(volume_id, ()) if d.score >= t]
            result = match_detections(dets, list(gts))
            tp, fp, fn = tp + result.tp, fp + result.fp, fn + result.fn
        recall = tp / (tp + fn) if tp + fn else 0.0
        points.append(FrocPoint(avg_fp=fp / len(per_volume_gts), recall=recall, threshold=t))

    _check_curve(points)
    return FrocCurve(points=tuple(points))


def recall_at_fp(curve: FrocCurve, fp_levels: Sequence[float]) -> list[float]:
    """Linear interpolation of recall at the requested avg-FP levels,
    clamped to the curve endpoints outside its range."""
    if not curve.points:
        raise ValueError("empty fROC curve")
    by_fp: dict[float, float] = {}
    for p in curve.points:
        by_fp[p.avg_fp] = max(by_fp.get(p.avg_fp, 0.0), p.recall)
    fps = np.array(sorted(by_fp))
    recalls = np.array([by_fp[f] for f in fps])
    return [float(np.interp(level, fps, recalls)) for level in fp_levels]


def summary_metrics(match: MatchResult) -> tuple[float, float, float]:
    """(recall, precision, f1) with zero-division guarded to 0."""
    recall = match.tp / (match.tp + match.fn) if match.tp + match.fn else 0.0
    precision = match.tp / (match.tp + match.fp) if match.tp + match.fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return recall, precision, f1


def evaluation_report(per_volume_dets: Mapping[str, Sequence[Detection]],
                      per_volume_gts: Mapping[str, Sequence[BBox3D]],
                      thresholds: Sequence[float],
                      fp_levels: Sequence[float] = (2.0, 3.0, 4.0)) -> dict:
    """Full evaluation payload: fROC point list, interpolated recall at each
    FP level, and recall/precision/f1 at the nearest realized operating
    point at or below each level."""
    curve = froc(per_volume_dets, per_volume_gts, thresholds)
    recalls = recall_at_fp(curve, fp_levels)

    def metrics_at(threshold: float) -> dict:
        tp = fp = fn = 0
        for volume_id, gts in per_volume_gts.items():
            dets = [d for d in per_volume_dets.get(volume_id, ()) if d.score >= threshold]
            r = match_detections(dets, list(gts))
            tp, fp, fn = tp + r.tp, fp + r.fp, fn + r.fn
        recall, precision, f1 = summary_metrics(MatchResult(tp, fp, fn, ()))
        return {"threshold": threshold, "tp": tp, "fp": fp, "fn": fn,
                "recall": recall, "precision": precision, "f1": f1}

    levels = []
    for level, recall in zip(fp_levels, recalls):
        at_or_below = [p for p in curve.points if p.avg_fp <= level]
        chosen = max(at_or_below, key=lambda p: p.avg_fp) if at_or_below else min(
            curve.points, key=lambda p: p.avg_fp)
        levels.append({
            "fp_level": float(level),
            "recall_interpolated": recall,
            "operating_point": metrics_at(chosen.threshold),
        })

    return {
        "froc": [{"avg_fp": p.avg_fp, "recall": p.recall, "threshold": p.threshold}
                 for p in curve.points],
        "fp_levels": levels,
        "num_volumes": len(per_volume_gts),
        "num_gt_boxes": int(sum(len(g) for g in per_volume_gts.values())),
    }
