"""Responsibility-allocation accuracy, split by accident / non-accident labels."""

from __future__ import annotations

from typing import Any, Optional, Sequence

from ..model import Entity, ResponsibilityVerdict, Variant


def entity_match(pred: Entity, label: Entity) -> bool:
    """Kinds must agree; the qualifier matters only when the label has one."""
    if pred.kind != label.kind:
        return False
    return label.qualifier is None or pred.qualifier == label.qualifier


def verdict_correct(pred: Optional[ResponsibilityVerdict], label: ResponsibilityVerdict) -> bool:
    if pred is None or pred.variant is not label.variant:
        return False
    if label.variant is Variant.A:
        return entity_match(pred.primary, label.primary)
    if label.variant is Variant.B:
        p1, p2 = pred.primary, pred.secondary
        l1, l2 = label.primary, label.secondary
        return (entity_match(p1, l1) and entity_match(p2, l2)) or (
            entity_match(p1, l2) and entity_match(p2, l1)
        )
    return True


def micro_average(accident_acc: float, n_accident: int, non_accident_acc: float, n_non: int) -> float:
    """Accuracy pooled over both classes, i.e. class accuracies weighted by class size."""
    total = n_accident + n_non
    if total == 0:
        raise ValueError("no samples")
    return (accident_acc * n_accident + non_accident_acc * n_non) / total


def score_tara(
    predictions: Sequence[Optional[ResponsibilityVerdict]],
    labels: Sequence[ResponsibilityVerdict],
) -> dict[str, Any]:
    """Accuracy block; ``None`` predictions (unparsed or failed runs) count as wrong.

    Labels with variant C form the non-accident split. Class accuracies are
    None when the class is absent.
    """
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    n_acc = n_non = hit_acc = hit_non = unparsed = 0
    for pred, label in zip(predictions, labels):
        ok = verdict_correct(pred, label)
        unparsed += pred is None
        if label.variant is Variant.C:
            n_non += 1
            hit_non += ok
        else:
            n_acc += 1
            hit_acc += ok
    acc = hit_acc / n_acc if n_acc else None
    non = hit_non / n_non if n_non else None
    total = n_acc + n_non
    present = [a for a in (acc, non) if a is not None]
    return {
        "accident_acc": acc,
        "non_accident_acc": non,
        "micro_average": (hit_acc + hit_non) / total if total else None,
        "macro_average": sum(present) / len(present) if present else None,
        "counts": {
            "accident": n_acc,
            "non_accident": n_non,
            "correct_accident": hit_acc,
            "correct_non_accident": hit_non,
            "unparsed": unparsed,
        },
    }
