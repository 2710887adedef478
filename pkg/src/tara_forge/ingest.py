"""Dataset preparation: frame windows, frame-index overlays and manifest statistics."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence, TypeVar

import numpy as np
from PIL import Image

from .model import (
    INGEST_FPS,
    SCHEMA,
    ManifestError,
    TaskKind,
    VideoSample,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")

WINDOW = 40
FRAME_NAME_WIDTH = 6
FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")

MIN_OVERLAY_SIZE = 64
OVERLAY_MARGIN = 4
GLYPH_HEIGHT_FRACTION = 0.02

# Reference composition of the benchmark, per source.
REFERENCE_COMPOSITION = {
    "videos": {"AV-TAU": 29865, "MM-AU": 11730, "BDDX": 26526},
    "test_videos": {"AV-TAU": 3000, "MM-AU": 1254, "BDDX": 2000},
    "qa_pairs": {"AV-TAU": 89595, "MM-AU": 46920, "BDDX": 53052, "TARA": 6254},
    "total_videos": 67941,
    "total_qa_pairs": 195821,
}

# 5x7 bitmaps, one string per row, '#' = lit.
DIGIT_FONT: dict[str, tuple[str, ...]] = {
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}
GLYPH_W, GLYPH_H = 5, 7


class ClipTooShortError(ValueError):
    """The clip has fewer frames than the window; keep the full clip instead."""


class FrameTooSmallError(ValueError):
    pass


def window_frames(
    all_frames: Sequence[T], accident_frame: int, window: int = WINDOW
) -> tuple[list[T], int]:
    """Cut a contiguous ``window``-frame run centred on ``accident_frame``.

    The window is clamped at either end of the sequence rather than padded, so
    every returned frame is a real one. Returns ``(frames, start_index)``.
    """
    n = len(all_frames)
    if n == 0:
        raise ValueError("no frames supplied")
    if window <= 0:
        raise ValueError("window must be positive")
    if n < window:
        raise ClipTooShortError(
            f"clip has {n} frames, fewer than the {window}-frame window; keep the full clip"
        )
    if not 0 <= accident_frame < n:
        raise ValueError(f"accident_frame {accident_frame} outside [0, {n})")
    start = accident_frame - window // 2
    start = min(max(start, 0), n - window)
    return list(all_frames[start : start + window]), start


def glyph_scale(frame_height: int) -> int:
    return max(1, round(GLYPH_HEIGHT_FRACTION * frame_height / GLYPH_H))


def glyph_box(frame_shape: tuple[int, ...], index: int) -> tuple[int, int, int, int]:
    """Pixel box ``(x1, y1, x2, y2)`` covered by the overlay for ``index``."""
    h, w = frame_shape[:2]
    scale = glyph_scale(h)
    digits = str(index)
    pad = scale
    box_w = len(digits) * GLYPH_W * scale + (len(digits) - 1) * scale + 2 * pad
    box_h = GLYPH_H * scale + 2 * pad
    x2, y2 = w - OVERLAY_MARGIN, h - OVERLAY_MARGIN
    return x2 - box_w, y2 - box_h, x2, y2


def render_digits(index: int, scale: int = 1) -> np.ndarray:
    """Boolean mask of the decimal digits of ``index`` (one blank column between glyphs)."""
    if index < 0:
        raise ValueError("frame index must be non-negative")
    digits = str(index)
    width = len(digits) * GLYPH_W + len(digits) - 1
    mask = np.zeros((GLYPH_H, width), dtype=bool)
    for i, ch in enumerate(digits):
        rows = DIGIT_FONT[ch]
        glyph = np.array([[c == "#" for c in row] for row in rows], dtype=bool)
        x = i * (GLYPH_W + 1)
        mask[:, x : x + GLYPH_W] = glyph
    return np.kron(mask, np.ones((scale, scale), dtype=bool))


def overlay_frame_index(frame: np.ndarray, index: int) -> np.ndarray:
    """Return a copy of ``frame`` with ``index`` stamped in the bottom-right corner.

    White digits on a black box, anchored ``OVERLAY_MARGIN`` pixels from the
    right and bottom edges.
    """
    frame = np.asarray(frame)
    h, w = frame.shape[:2]
    if h < MIN_OVERLAY_SIZE or w < MIN_OVERLAY_SIZE:
        raise FrameTooSmallError(f"frame {w}x{h} is smaller than {MIN_OVERLAY_SIZE}x{MIN_OVERLAY_SIZE}")
    x1, y1, x2, y2 = glyph_box(frame.shape, index)
    if x1 < 0 or y1 < 0:
        raise FrameTooSmallError(f"frame {w}x{h} cannot host the glyph block for index {index}")
    out = frame.copy()
    white = np.iinfo(out.dtype).max if np.issubdtype(out.dtype, np.integer) else 1.0
    out[y1:y2, x1:x2] = 0
    scale = glyph_scale(h)
    mask = render_digits(index, scale)
    gy, gx = y1 + scale, x1 + scale
    region = out[gy : gy + mask.shape[0], gx : gx + mask.shape[1]]
    region[mask] = white
    return out


def frame_filename(index: int, suffix: str = ".png") -> str:
    return f"{index:0{FRAME_NAME_WIDTH}d}{suffix}"


def list_frames(frames_dir: str | Path) -> list[Path]:
    """Frame files in a directory, ordered by their numeric stem."""
    frames_dir = Path(frames_dir)
    files = [
        p for p in frames_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES and p.stem.isdigit()
    ]
    return sorted(files, key=lambda p: int(p.stem))


def find_frame(frames_dir: str | Path, index: int) -> Path:
    frames_dir = Path(frames_dir)
    for suffix in FRAME_SUFFIXES:
        candidate = frames_dir / frame_filename(index, suffix)
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no frame {frame_filename(index, '')}.* in {frames_dir}")


def load_frame(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_frame(frame: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(frame, dtype=np.uint8)).save(path)


@dataclass
class ManifestReport:
    total: int = 0
    accident: int = 0
    non_accident: int = 0
    per_source: dict[str, int] = field(default_factory=dict)
    per_task: dict[str, int] = field(default_factory=dict)
    qa_pairs: int = 0
    violations: list[dict[str, Any]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    declared: dict[str, Any] | None = None

    def to_json(self) -> dict[str, Any]:
        out = {
            "total": self.total,
            "accident": self.accident,
            "non_accident": self.non_accident,
            "per_source": dict(sorted(self.per_source.items())),
            "per_task": dict(self.per_task),
            "qa_pairs": self.qa_pairs,
            "violations": self.violations,
            "warnings": self.warnings,
        }
        if self.declared is not None:
            out["declared"] = self.declared
        return out


def _check_declared(header: dict[str, Any], report: ManifestReport) -> None:
    sources = header.get("declared_sources")
    total = header.get("declared_total")
    if sources is None and total is None:
        return
    declared: dict[str, Any] = {}
    if sources is not None:
        source_sum = sum(int(v) for v in sources.values())
        declared["sources"] = dict(sources)
        declared["sources_sum"] = source_sum
        if report.total:
            for name, count in sources.items():
                seen = report.per_source.get(name, 0)
                if seen != count:
                    report.warnings.append(
                        f"source {name}: declared {count} videos, manifest holds {seen}"
                    )
    if total is not None:
        declared["total"] = int(total)
    if sources is not None and total is not None:
        delta = declared["sources_sum"] - declared["total"]
        declared["delta"] = delta
        if delta:
            report.warnings.append(
                f"declared sources sum to {declared['sources_sum']} but declared total is "
                f"{declared['total']} (delta {delta}); deduplication or filtering unaccounted for"
            )
    report.declared = declared


def validate_manifest(path: str | Path) -> ManifestReport:
    """Collect counts and invariant violations for a manifest without raising.

    A header record may carry ``declared_sources`` (videos per source) and
    ``declared_total``; mismatches against the manifest or between the two are
    reported as warnings.
    """
    report = ManifestReport(per_task={t.value: 0 for t in TaskKind})
    header: dict[str, Any] = {}
    seen: set[str] = set()
    sources: Counter[str] = Counter()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ManifestError("expected a JSON object")
                if "schema" in obj:
                    if obj["schema"] != SCHEMA:
                        raise ManifestError(f"unsupported schema {obj['schema']!r}", field="schema")
                    header = obj
                    continue
                sample = VideoSample.from_json(obj)
                if sample.id in seen:
                    raise ManifestError(f"id: duplicate id {sample.id!r}", field="id")
            except json.JSONDecodeError as exc:
                report.violations.append({"line": lineno, "field": None, "error": exc.msg})
                continue
            except ManifestError as exc:
                report.violations.append({"line": lineno, "field": exc.field, "error": str(exc)})
                continue
            except (TypeError, ValueError) as exc:
                report.violations.append({"line": lineno, "field": None, "error": str(exc)})
                continue
            seen.add(sample.id)
            report.total += 1
            if sample.has_accident:
                report.accident += 1
            else:
                report.non_accident += 1
            sources[sample.source.value] += 1
            if sample.source.value in ("MM-AU", "AV-TAU", "BDDX") and sample.fps != INGEST_FPS:
                report.warnings.append(f"sample {sample.id}: fps {sample.fps}, expected {INGEST_FPS}")
            for task in sample.qa_tasks():
                report.per_task[task.value] += 1
                report.qa_pairs += 1
    report.per_source = dict(sources)
    if report.total == 0:
        report.warnings.append("manifest contains no samples")
    _check_declared(header, report)
    assert report.total == report.accident + report.non_accident
    return report
