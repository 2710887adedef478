"""Synthetic clips, manifests and answer-key backends for offline runs."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import ingest
from .llm_client import ChatMessage, validate_history, MAX_FRAMES_PER_TURN
from .mcot import render_verdict
from .model import (
    ENTITY_KINDS,
    BBox,
    Entity,
    ResponsibilityVerdict,
    Source,
    VideoSample,
    save_manifest,
)

FRAME_W, FRAME_H = 128, 96

_TYPES = ("vehicle-to-vehicle", "vehicle-to-pedestrian", "vehicle-to-bicycle")


def render_clip(n_frames: int, accident_frame: int | None, rng: np.random.Generator) -> tuple[list[np.ndarray], BBox | None]:
    """Two boxes drifting toward each other; they touch at ``accident_frame``."""
    base = np.zeros((FRAME_H, FRAME_W, 3), dtype=np.uint8)
    base[:] = rng.integers(40, 90, size=3, dtype=np.uint8)
    frames = []
    box = None
    meet = accident_frame if accident_frame is not None else n_frames * 4  # never meets
    for t in range(n_frames):
        img = base.copy()
        gap = max(0, int(round(2 * (meet - t))))
        ax = max(0, min(FRAME_W // 2 - 12 - gap // 2, FRAME_W - 12))
        bx = min(FRAME_W - 12, FRAME_W // 2 + gap // 2)
        img[40:56, ax : ax + 12] = (220, 40, 40)
        img[44:60, bx : bx + 12] = (40, 40, 220)
        if accident_frame is not None and t == accident_frame:
            box = BBox(min(ax, bx), 40, max(ax, bx) + 12, 60)
        frames.append(img)
    return frames, box


def make_dataset(
    out_dir: str | Path,
    n_samples: int = 30,
    accident_fraction: float = 0.6,
    n_frames: int = 40,
    seed: int = 0,
    with_frames: bool = True,
) -> list[VideoSample]:
    """Write ``manifest.jsonl`` plus frame folders for a labelled synthetic benchmark."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_acc = int(round(n_samples * accident_fraction))
    samples = []
    for i in range(n_samples):
        sid = f"syn{i:03d}"
        accident = i < n_acc
        accident_frame = int(rng.integers(5, n_frames - 5)) if accident else None
        frames, box = render_clip(n_frames, accident_frame, rng)
        if with_frames:
            fdir = out_dir / sid
            fdir.mkdir(exist_ok=True)
            for t, frame in enumerate(frames):
                ingest.save_frame(ingest.overlay_frame_index(frame, t), fdir / ingest.frame_filename(t))
        if accident:
            first = Entity(ENTITY_KINDS[i % len(ENTITY_KINDS)])
            second = Entity(ENTITY_KINDS[(i + 3) % len(ENTITY_KINDS)])
            verdict = ResponsibilityVerdict.main(first) if i % 2 == 0 else ResponsibilityVerdict.shared(first, second)
            kind = _TYPES[i % len(_TYPES)]
            extra: dict[str, Any] = dict(
                accident_type=kind,
                accident_frame=accident_frame,
                accident_bbox=box,
                facts_text=f"The {first.kind} and the {second.kind} collide in the middle of the road.",
                cause_text=f"The {first.kind} did not yield to the {second.kind}.",
                advice_text=f"The {first.kind} should slow down and yield.",
            )
        else:
            verdict = ResponsibilityVerdict.no_accident()
            extra = dict(
                behavior_text="The vehicles keep their lanes and move slowly.",
                behavior_explanation="Traffic is dense so they keep a safe distance.",
            )
        samples.append(
            VideoSample(
                id=sid,
                source=Source.SYNTHETIC,
                fps=ingest.INGEST_FPS,
                frame_count=n_frames,
                has_accident=accident,
                frames_dir=sid if with_frames else None,
                frame_width=FRAME_W,
                frame_height=FRAME_H,
                responsibility=verdict,
                **extra,
            )
        )
    save_manifest(samples, out_dir / "manifest.jsonl")
    return samples


class OracleBackend:
    """Answers every stage from the ground truth of the sample being asked about."""

    def __init__(self, samples: Sequence[VideoSample], max_frames: int = MAX_FRAMES_PER_TURN):
        self.samples = {s.id: s for s in samples}
        self.max_frames = max_frames
        self.clock = lambda: 0.0

    def chat(self, history: Sequence[ChatMessage], *, stage: str | None = None, sample_id: str | None = None) -> str:
        validate_history(history, self.max_frames)
        s = self.samples[sample_id]
        if stage == "Occurrence":
            return "Yes, an accident occurs." if s.has_accident else "No."
        if stage == "Type":
            return s.accident_type or "unknown"
        if stage == "TimeLocation":
            return f"The accident first occurs at frame {s.accident_frame}."
        if stage == "SpatialLocation":
            return str(s.accident_bbox.as_list()) if s.accident_bbox else "[0, 0, 1, 1]"
        if stage == "Facts":
            return s.facts_text or "Two road users collide."
        if stage == "Cause":
            return s.cause_text or "One party failed to yield."
        if stage == "Advice":
            return s.advice_text or "Slow down."
        if stage == "Allocation":
            return render_verdict(s.responsibility)
        raise KeyError(f"oracle has no answer for stage {stage!r}")
