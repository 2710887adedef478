"""Assemble a full metric report from predictions and a manifest, and render it."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from ..model import BBox, ResponsibilityVerdict, VideoSample
from .grounding import spatial_block, time_block
from .judge import gpteval_corpus
from .tara import score_tara
from .text import bertscore, bleu, mean_rouge_l, moverscore

# (report key, prediction field, sample attribute, table label)
TEXT_TASKS = (
    ("facts", "facts", "facts_text", "Description"),
    ("cause", "cause", "cause_text", "Causation"),
    ("advice", "advice", "advice_text", "Prevention"),
    ("behavior_description", "behavior_description", "behavior_text", "Behavior"),
    ("behavior_explanation", "behavior_explanation", "behavior_explanation", "Behavior reason"),
)
MICRO_TOL = 1e-9


@dataclass
class MetricReport:
    tara: Optional[dict[str, Any]] = None
    time: Optional[dict[str, float]] = None
    spatial: Optional[dict[str, float]] = None
    text: dict[str, dict[str, Any]] = field(default_factory=dict)
    n_samples: dict[str, int] = field(default_factory=dict)

    def check(self) -> None:
        """Assert the report's internal consistency (ranges, pooled average)."""
        blocks = [self.time or {}, self.spatial or {}]
        blocks += [{k: v for k, v in t.items() if k != "gpteval_skipped"} for t in self.text.values()]
        for block in blocks:
            for key, value in block.items():
                if value is not None and not 0.0 <= value <= 1.0:
                    raise ValueError(f"{key}={value} outside [0, 1]")
        if self.tara and self.tara["micro_average"] is not None:
            c = self.tara["counts"]
            n_acc, n_non = c["accident"], c["non_accident"]
            pooled = ((self.tara["accident_acc"] or 0.0) * n_acc + (self.tara["non_accident_acc"] or 0.0) * n_non) / (
                n_acc + n_non
            )
            if abs(pooled - self.tara["micro_average"]) > MICRO_TOL:
                raise ValueError("micro average disagrees with class accuracies")

    def to_json(self) -> dict[str, Any]:
        return {
            "tara": self.tara,
            "time": self.time,
            "spatial": self.spatial,
            "text": self.text,
            "n_samples": self.n_samples,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "MetricReport":
        return cls(obj.get("tara"), obj.get("time"), obj.get("spatial"), obj.get("text") or {}, obj.get("n_samples") or {})


def latest_predictions(records: Iterable[dict[str, Any]]) -> dict[str, dict[str, Any]]:
    """Last record per sample id (append-only files may hold reruns)."""
    out: dict[str, dict[str, Any]] = {}
    for rec in records:
        out[rec["sample_id"]] = rec
    return out


def _verdict(rec: Optional[dict[str, Any]]) -> Optional[ResponsibilityVerdict]:
    if not rec or not rec.get("verdict"):
        return None
    return ResponsibilityVerdict.from_json(rec["verdict"])


def _bbox(rec: Optional[dict[str, Any]]) -> Optional[BBox]:
    if not rec or not rec.get("bbox_pred"):
        return None
    try:
        return BBox.from_list(rec["bbox_pred"])
    except ValueError:
        return None


def evaluate(
    predictions: Iterable[dict[str, Any]],
    samples: Sequence[VideoSample],
    *,
    judge=None,
    embed: Optional[Callable[[str], np.ndarray]] = None,
) -> MetricReport:
    """Score prediction records against manifest labels.

    Samples without a prediction are scored as misses. BERTScore and
    MoverScore run only with ``embed``; GPTEval only with ``judge``.
    """
    preds = latest_predictions(predictions)
    report = MetricReport()

    labelled = [s for s in samples if s.responsibility is not None]
    if labelled:
        report.tara = score_tara([_verdict(preds.get(s.id)) for s in labelled], [s.responsibility for s in labelled])
        report.n_samples["tara"] = len(labelled)

    timed = [s for s in samples if s.has_accident and s.accident_frame is not None]
    if timed:
        pred_frames = []
        for s in timed:
            p = (preds.get(s.id) or {}).get("accident_frame_pred")
            pred_frames.append(int(p) if p is not None else None)
        report.time = time_block(pred_frames, [s.accident_frame for s in timed])
        report.n_samples["time"] = len(timed)

    boxed = [s for s in samples if s.accident_bbox is not None]
    if boxed:
        report.spatial = spatial_block([_bbox(preds.get(s.id)) for s in boxed], [s.accident_bbox for s in boxed])
        report.n_samples["spatial"] = len(boxed)

    fields_seen = {k for rec in preds.values() for k in rec}
    for key, pred_field, attr, _ in TEXT_TASKS:
        pairs = [s for s in samples if getattr(s, attr)]
        if not pairs or pred_field not in fields_seen:
            continue
        refs = [getattr(s, attr) for s in pairs]
        cands = [str((preds.get(s.id) or {}).get(pred_field) or "") for s in pairs]
        block: dict[str, Any] = {"bleu": bleu(cands, refs), "rouge_l": mean_rouge_l(cands, refs)}
        if embed is not None:
            block["bertscore"] = bertscore(cands, refs, embed)
            block["moverscore"] = moverscore(cands, refs, embed)
        if judge is not None:
            tally = gpteval_corpus(cands, refs, judge)
            block["gpteval"] = tally.mean
            block["gpteval_skipped"] = tally.skipped
        report.text[key] = block
        report.n_samples[key] = len(pairs)
    report.check()
    return report


DASH = "—"


def _fmt(value: Any) -> str:
    return DASH if value is None else f"{value:.4f}"


def table_rows(report: MetricReport) -> list[tuple[str, str, str]]:
    """``(task, metric, value)`` rows grouped by task block, one metric per row."""
    rows: list[tuple[str, str, str]] = []
    tara = report.tara or {}
    for metric, key in (("Accident", "accident_acc"), ("Non-Accident", "non_accident_acc"), ("Average", "micro_average")):
        rows.append(("TARA", metric, _fmt(tara.get(key))))
    for key, _, _, label in TEXT_TASKS:
        block = report.text.get(key)
        if block is None and key.startswith("behavior"):
            continue
        block = block or {}
        for metric, mkey in (
            ("BLEU", "bleu"),
            ("ROUGE-L", "rouge_l"),
            ("BERTScore", "bertscore"),
            ("MoverScore", "moverscore"),
            ("GPTEval", "gpteval"),
        ):
            rows.append((label, metric, _fmt(block.get(mkey))))
    time = report.time or {}
    for metric, key in (("AP@3", "ap3"), ("AP@5", "ap5"), ("AP@7", "ap7"), ("Average", "average")):
        rows.append(("Time", metric, _fmt(time.get(key))))
    spatial = report.spatial or {}
    for metric, key in (("AP@30", "ap30"), ("AP@50", "ap50"), ("AP@70", "ap70"), ("mIoU", "miou")):
        rows.append(("Spatial", metric, _fmt(spatial.get(key))))
    return rows


def render_table(report: MetricReport, column: str = "run") -> str:
    rows = table_rows(report)
    w_task = max(len("Task"), *(len(r[0]) for r in rows))
    w_metric = max(len("Metric"), *(len(r[1]) for r in rows))
    w_val = max(len(column), 6)
    lines = [f"{'Task':<{w_task}}  {'Metric':<{w_metric}}  {column:>{w_val}}"]
    lines.append("-" * len(lines[0]))
    prev = None
    for task, metric, value in rows:
        shown = task if task != prev else ""
        if prev is not None and task != prev:
            lines.append("")
        lines.append(f"{shown:<{w_task}}  {metric:<{w_metric}}  {value:>{w_val}}")
        prev = task
    return "\n".join(lines) + "\n"
