"""Temporal and spatial grounding scores: AP@k frames, AP@IoU, mean IoU."""

from __future__ import annotations

from typing import Optional, Sequence

from ..model import BBox

DEFAULT_FRAME_TOLERANCES = (3, 5, 7)
DEFAULT_IOU_THRESHOLDS = (0.30, 0.50, 0.70)


def _check_lengths(preds: Sequence, truth: Sequence) -> None:
    if len(preds) != len(truth):
        raise ValueError(f"{len(preds)} predictions for {len(truth)} labels")


def ap_at_k(pred_frames: Sequence[Optional[int]], true_frames: Sequence[int], k: int) -> float:
    """Fraction of samples whose predicted frame is within ``k`` frames of the truth.

    Missing predictions (None) count as misses. An empty input scores 0.
    """
    _check_lengths(pred_frames, true_frames)
    if k < 0:
        raise ValueError("k must be >= 0")
    if not true_frames:
        return 0.0
    hits = sum(1 for p, t in zip(pred_frames, true_frames) if p is not None and abs(p - t) <= k)
    return hits / len(true_frames)


def iou(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def _ious(preds: Sequence[Optional[BBox]], labels: Sequence[BBox]) -> list[float]:
    _check_lengths(preds, labels)
    return [0.0 if p is None else iou(p, t) for p, t in zip(preds, labels)]


def ap_at_iou(preds: Sequence[Optional[BBox]], labels: Sequence[BBox], threshold: float) -> float:
    """Fraction of samples whose single predicted box reaches ``threshold`` IoU."""
    scores = _ious(preds, labels)
    if not scores:
        return 0.0
    return sum(1 for s in scores if s >= threshold) / len(scores)


def miou(preds: Sequence[Optional[BBox]], labels: Sequence[BBox]) -> float:
    scores = _ious(preds, labels)
    return sum(scores) / len(scores) if scores else 0.0


def time_block(
    pred_frames: Sequence[Optional[int]],
    true_frames: Sequence[int],
    ks: Sequence[int] = DEFAULT_FRAME_TOLERANCES,
) -> dict[str, float]:
    out = {f"ap{k}": ap_at_k(pred_frames, true_frames, k) for k in ks}
    out["average"] = sum(out.values()) / len(ks)
    return out


def spatial_block(
    preds: Sequence[Optional[BBox]],
    labels: Sequence[BBox],
    thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
) -> dict[str, float]:
    out = {f"ap{round(t * 100)}": ap_at_iou(preds, labels, t) for t in thresholds}
    out["miou"] = miou(preds, labels)
    return out
