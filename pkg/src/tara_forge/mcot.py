"""Staged multimodal dialogue that walks a video from detection to responsibility.

One conversation per sample: occurrence, type, first accident frame, box on
the keyframe, facts, cause, advice, then allocation with retrieved regulations.
A "no" on occurrence ends the dialogue with verdict C.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol, Sequence, Union

import numpy as np

from . import ingest
from .llm_client import (
    MAX_FRAMES_PER_TURN,
    BackendError,
    ChatMessage,
    TranscriptWriter,
    read_jsonl,
    subsample_frames,
)
from .model import (
    ENTITY_KINDS,
    QUALIFIERS,
    BBox,
    Entity,
    ResponsibilityVerdict,
    Variant,
    VideoSample,
)
from .rag import ClauseIndex, Embedder, assemble_context, retrieve

logger = logging.getLogger(__name__)


class Stage(enum.IntEnum):
    OCCURRENCE = 0
    TYPE = 1
    TIME_LOCATION = 2
    SPATIAL_LOCATION = 3
    FACTS = 4
    CAUSE = 5
    ADVICE = 6
    ALLOCATION = 7
    DONE = 8

    @property
    def label(self) -> str:
        return _STAGE_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "Stage":
        return {v: k for k, v in _STAGE_LABELS.items()}[label]


_STAGE_LABELS = {
    Stage.OCCURRENCE: "Occurrence",
    Stage.TYPE: "Type",
    Stage.TIME_LOCATION: "TimeLocation",
    Stage.SPATIAL_LOCATION: "SpatialLocation",
    Stage.FACTS: "Facts",
    Stage.CAUSE: "Cause",
    Stage.ADVICE: "Advice",
    Stage.ALLOCATION: "Allocation",
    Stage.DONE: "Done",
}


class ParseError(ValueError):
    pass


# ---------------------------------------------------------------- parsers

_OPTION_PREFIX = re.compile(r"^\s*\(?\s*([ABC])\s*[.):]\s*", re.IGNORECASE)
_NEGATIVE = re.compile(
    r"\b(no accident|no collision|no crash|not? (?:any )?(?:accident|collision|crash)|"
    r"does not occur|did not occur|doesn't occur|didn't occur|no traffic accident)\b"
)
_POSITIVE = re.compile(
    r"\b(accident (?:occurs|occurred|happens|happened)|collision|collides|collided|crash(?:es|ed)?|"
    r"there is an accident|an accident)\b"
)


def parse_occurrence(text: str) -> bool:
    """True if the answer affirms that an accident occurs."""
    t = _OPTION_PREFIX.sub("", text, count=1).strip().lower()
    first = re.match(r"[a-z]+", t)
    if first and first.group() in ("yes", "yeah", "true"):
        return True
    if first and first.group() in ("no", "false"):
        return False
    if _NEGATIVE.search(t):
        return False
    if _POSITIVE.search(t):
        return True
    raise ParseError(f"cannot tell whether the answer affirms an accident: {text!r}")


_INT = re.compile(r"-?\d+")


def parse_frame_index(text: str, frame_count: int) -> int:
    """First integer in the answer, checked against ``[0, frame_count)``."""
    if frame_count <= 0:
        raise ValueError("frame_count must be positive")
    m = _INT.search(text)
    if m is None:
        raise ParseError(f"no frame index in {text!r}")
    index = int(m.group())
    if not 0 <= index < frame_count:
        raise ParseError(f"frame index {index} outside [0, {frame_count})")
    return index


_NUM = r"(-?\d+(?:\.\d+)?)"
_BRACKET_BOX = re.compile(rf"\[\s*{_NUM}\s*,\s*{_NUM}\s*,\s*{_NUM}\s*,\s*{_NUM}\s*\]")
_PAIR_BOX = re.compile(rf"\(\s*{_NUM}\s*,\s*{_NUM}\s*\)\s*,?\s*(?:to|-)?\s*\(\s*{_NUM}\s*,\s*{_NUM}\s*\)")
_ANY_NUM = re.compile(_NUM)


def parse_bbox(text: str, frame_w: int, frame_h: int) -> BBox:
    """Read a box as ``[x1, y1, x2, y2]`` or ``(x1, y1), (x2, y2)``, clamped to the frame."""
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError("frame dimensions must be positive")
    m = _BRACKET_BOX.search(text) or _PAIR_BOX.search(text)
    if m is not None:
        values = [float(g) for g in m.groups()]
    else:
        values = [float(v) for v in _ANY_NUM.findall(text)]
        if len(values) < 4:
            raise ParseError(f"expected 4 box coordinates in {text!r}")
        values = values[:4]
    x1, y1, x2, y2 = (int(round(v)) for v in values)
    x1, x2 = (min(max(v, 0), frame_w) for v in (x1, x2))
    y1, y2 = (min(max(v, 0), frame_h) for v in (y1, y2))
    if x1 >= x2 or y1 >= y2:
        raise ParseError(f"degenerate box {[x1, y1, x2, y2]} after clamping")
    return BBox(x1, y1, x2, y2)


def _kind_pattern(kind: str) -> str:
    return r"[\s-]?".join(re.escape(part) for part in re.split(r"[\s-]", kind))


_KINDS_BY_LENGTH = sorted(ENTITY_KINDS, key=len, reverse=True)
_ENTITY = re.compile(
    rf"\b(?:({'|'.join(QUALIFIERS)})\s+)?({'|'.join(_kind_pattern(k) for k in _KINDS_BY_LENGTH)})s?\b",
    re.IGNORECASE,
)
_TEMPLATE_A = re.compile(r"([^.;:\n]*?)\btakes?\s+(?:the\s+)?main\s+responsibility", re.IGNORECASE)
_TEMPLATE_B = re.compile(r"([^.;:\n]*?)\bshare\s+(?:the\s+)?responsibility\s+equally", re.IGNORECASE)
_TEMPLATE_C = re.compile(r"\bno\s+accident\b", re.IGNORECASE)
_LETTER = re.compile(r"(?:^\s*\(?|\b(?:option|answer)\s*:?\s*\(?)([ABC])\b\s*[.):]?", re.IGNORECASE)


def _canonical_kind(raw: str) -> str:
    flat = re.sub(r"[\s-]", "", raw.lower())
    for kind in ENTITY_KINDS:
        if re.sub(r"[\s-]", "", kind) == flat:
            return kind
    raise ParseError(f"unknown entity {raw!r}")


def find_entities(text: str) -> list[Entity]:
    return [
        Entity(_canonical_kind(m.group(2)), m.group(1).lower() if m.group(1) else None)
        for m in _ENTITY.finditer(text)
    ]


def parse_verdict(text: str) -> ResponsibilityVerdict:
    """Read a responsibility answer.

    Template phrases decide the variant; a bare option letter is used only when
    no template phrase is present. The earliest template phrase wins.
    """
    found = []
    for variant, pattern in ((Variant.A, _TEMPLATE_A), (Variant.B, _TEMPLATE_B), (Variant.C, _TEMPLATE_C)):
        m = pattern.search(text)
        if m is not None:
            # position of the phrase itself, not of the party names before it
            found.append((m.start() if variant is Variant.C else m.end(1), variant, m))
    if found:
        _, variant, m = min(found, key=lambda item: item[0])
        if variant is Variant.C:
            return ResponsibilityVerdict.no_accident()
        entities = find_entities(m.group(1))
        return _verdict_from(variant, entities, text)
    letter = _LETTER.search(text)
    if letter is None:
        raise ParseError(f"no responsibility template or option letter in {text!r}")
    variant = Variant(letter.group(1).upper())
    if variant is Variant.C:
        return ResponsibilityVerdict.no_accident()
    return _verdict_from(variant, find_entities(text[letter.end():]), text)


def _verdict_from(variant: Variant, entities: list[Entity], text: str) -> ResponsibilityVerdict:
    try:
        if variant is Variant.A and entities:
            return ResponsibilityVerdict.main(entities[0])
        if variant is Variant.B and len(entities) >= 2:
            return ResponsibilityVerdict.shared(entities[0], entities[1])
    except ValueError as exc:
        raise ParseError(f"{exc}: {text!r}") from None
    raise ParseError(f"option {variant.value} without enough parties in {text!r}")


def render_verdict(verdict: ResponsibilityVerdict, with_letter: bool = True) -> str:
    if verdict.variant is Variant.A:
        body = f"{verdict.primary.phrase().capitalize()} takes main responsibility."
    elif verdict.variant is Variant.B:
        body = (
            f"{verdict.primary.phrase().capitalize()} and {verdict.secondary.phrase()} "
            "share responsibility equally."
        )
    else:
        body = "No accident."
    return f"{verdict.variant.value}. {body}" if with_letter else body


def parse_text(text: str) -> str:
    text = text.strip()
    if not text:
        raise ParseError("empty answer")
    return text


# ---------------------------------------------------------------- keyframes

def keyframe_path(sample: VideoSample, frame_index: int) -> Path:
    if sample.frames_dir is None:
        raise FileNotFoundError(f"sample {sample.id} has no frames_dir")
    if not 0 <= frame_index < sample.frame_count:
        raise IndexError(f"frame {frame_index} outside [0, {sample.frame_count}) for sample {sample.id}")
    return ingest.find_frame(sample.frames_dir, frame_index)


def extract_keyframe(sample: VideoSample, frame_index: int) -> np.ndarray:
    """Image at ``frame_index`` for the spatial-grounding turn."""
    return ingest.load_frame(keyframe_path(sample, frame_index))


# ---------------------------------------------------------------- prompts

@dataclass(frozen=True)
class PromptSet:
    version: str
    system: str
    stages: dict[str, str]
    reminders: dict[str, str]
    context_block: str
    implicit: str

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PromptSet":
        if path is None:
            raw = resources.files("tara_forge.data").joinpath("prompts_v1.json").read_text("utf-8")
        else:
            raw = Path(path).read_text(encoding="utf-8")
        obj = json.loads(raw)
        missing = [s.label for s in Stage if s is not Stage.DONE and s.label not in obj["stages"]]
        if missing:
            raise ValueError(f"prompt file lacks stages {missing}")
        return cls(
            str(obj["version"]),
            obj["system"],
            obj["stages"],
            obj.get("reminders", {}),
            obj.get("context_block", "{context}\n\n"),
            obj.get("implicit", ""),
        )


# ---------------------------------------------------------------- state machine

class Backend(Protocol):
    def chat(
        self, history: Sequence[ChatMessage], *, stage: str | None = None, sample_id: str | None = None
    ) -> str: ...


@dataclass
class PipelineConfig:
    k: int = 3
    tau: float = 1.0
    use_rag: bool = True
    implicit_cot: bool = False
    max_reasks: int = 2
    max_frames: int = MAX_FRAMES_PER_TURN
    seed: Optional[int] = 0
    prompts: PromptSet = field(default_factory=PromptSet.load)


@dataclass
class Turn:
    stage: Stage
    attempt: int
    prompt: str
    images: list[str]
    raw_answer: str
    parsed: Any
    ok: bool
    error: Optional[str] = None
    latency_ms: int = 0

    def to_json(self, sample_id: str) -> dict[str, Any]:
        return {
            "sample_id": sample_id,
            "stage": self.stage.label,
            "attempt": self.attempt,
            "prompt": self.prompt,
            "images_refs": self.images,
            "raw_answer": self.raw_answer,
            "parsed": self.parsed,
            "ok": self.ok,
            "error": self.error,
            "latency_ms": self.latency_ms,
        }


@dataclass
class DialogueTranscript:
    sample_id: str
    turns: list[Turn] = field(default_factory=list)

    def append(self, turn: Turn) -> None:
        if self.turns and turn.stage < self.turns[-1].stage:
            raise ValueError(f"turn for {turn.stage.label} after {self.turns[-1].stage.label}")
        self.turns.append(turn)

    def stages(self) -> list[Stage]:
        out: list[Stage] = []
        for t in self.turns:
            if not out or out[-1] != t.stage:
                out.append(t.stage)
        return out

    def __len__(self) -> int:
        return len(self.turns)

    def records(self) -> list[dict[str, Any]]:
        return [t.to_json(self.sample_id) for t in self.turns]

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in self.records())


STATUS_OK = "ok"
STATUS_UNPARSED = "unparsed"
STATUS_FAILED = "failed"


@dataclass
class PipelineResult:
    sample_id: str
    verdict: Optional[ResponsibilityVerdict]
    status: str
    transcript: DialogueTranscript
    outputs: dict[str, Any]
    stage_reached: Stage
    error: Optional[str] = None

    def prediction(self) -> dict[str, Any]:
        bbox = self.outputs.get("SpatialLocation")
        return {
            "sample_id": self.sample_id,
            "status": self.status,
            "verdict": self.verdict.to_json() if self.verdict is not None else None,
            "occurrence": self.outputs.get("Occurrence"),
            "accident_type": self.outputs.get("Type"),
            "accident_frame_pred": self.outputs.get("TimeLocation"),
            "bbox_pred": bbox,
            "facts": self.outputs.get("Facts"),
            "cause": self.outputs.get("Cause"),
            "advice": self.outputs.get("Advice"),
            "error": self.error,
        }


class _Unparsed(Exception):
    def __init__(self, stage: Stage):
        self.stage = stage


def _jsonable(value: Any) -> Any:
    if isinstance(value, BBox):
        return value.as_list()
    if isinstance(value, ResponsibilityVerdict):
        return value.to_json()
    return value


class _Dialogue:
    def __init__(self, sample: VideoSample, backend: Backend, config: PipelineConfig):
        self.sample = sample
        self.backend = backend
        self.config = config
        self.prompts = config.prompts
        self.history: list[ChatMessage] = [ChatMessage("system", self.prompts.system)]
        self.transcript = DialogueTranscript(sample.id)
        self.clock: Callable[[], float] = getattr(backend, "clock", None) or (lambda: 0.0)

    def ask(self, stage: Stage, prompt: str, images: Sequence[str], parse: Callable[[str], Any]) -> Any:
        """One stage: ask, parse, and re-ask with a format reminder on failure."""
        text = prompt
        for attempt in range(self.config.max_reasks + 1):
            attach = list(images) if attempt == 0 else []
            self.history.append(ChatMessage("user", text, attach))
            start = self.clock()
            answer = self.backend.chat(self.history, stage=stage.label, sample_id=self.sample.id)
            latency = int(round((self.clock() - start) * 1000))
            self.history.append(ChatMessage("assistant", answer))
            try:
                parsed = parse(answer)
            except ParseError as exc:
                self.transcript.append(
                    Turn(stage, attempt, text, attach, answer, None, False, str(exc), latency)
                )
                reminder = self.prompts.reminders.get(stage.label, "Please follow the requested format.")
                text = f"{prompt}\n{self._fill(reminder)}"
                continue
            self.transcript.append(Turn(stage, attempt, text, attach, answer, _jsonable(parsed), True, None, latency))
            return parsed
        raise _Unparsed(stage)

    def _fill(self, template: str, **extra: Any) -> str:
        values = {"max_index": self.sample.frame_count - 1, "frame_count": self.sample.frame_count}
        values.update(extra)
        return template.format(**values)

    def stage_prompt(self, stage: Stage, **extra: Any) -> str:
        return self._fill(self.prompts.stages[stage.label], **extra)


def video_frames(sample: VideoSample, max_frames: int, seed: Optional[int]) -> list[str]:
    if sample.frames_dir is None:
        return []
    frames = [str(p) for p in ingest.list_frames(sample.frames_dir)]
    return subsample_frames(frames, max_frames, seed)


def allocation_context(
    outputs: dict[str, Any],
    rag_index: Optional[ClauseIndex],
    embedder: Optional[Embedder],
    config: PipelineConfig,
) -> str:
    """Regulation block for the allocation prompt, empty when retrieval is off."""
    if not config.use_rag or rag_index is None or len(rag_index) == 0 or embedder is None:
        return ""
    query = " ".join(str(outputs[k]) for k in ("Facts", "Cause") if outputs.get(k))
    if not query:
        return ""
    k = min(config.k, len(rag_index))
    clauses, _ = retrieve(query, rag_index, embedder, k=k, tau=config.tau)
    return config.prompts.context_block.format(context=assemble_context(clauses))


def run_pipeline(
    sample: VideoSample,
    backend: Backend,
    rag_index: Optional[ClauseIndex] = None,
    config: Optional[PipelineConfig] = None,
    embedder: Optional[Embedder] = None,
) -> PipelineResult:
    """Run the staged dialogue for one sample.

    Backend failures stop the sample with ``status="failed"`` and keep the
    turns recorded so far; an answer that stays unparseable after the re-asks
    gives ``status="unparsed"`` and no verdict.
    """
    config = config or PipelineConfig()
    dlg = _Dialogue(sample, backend, config)
    outputs: dict[str, Any] = {}
    stage = Stage.OCCURRENCE
    verdict: Optional[ResponsibilityVerdict] = None
    status, error = STATUS_OK, None
    try:
        frames = video_frames(sample, config.max_frames, config.seed)
        if config.implicit_cot:
            stage = Stage.ALLOCATION
            verdict = dlg.ask(stage, dlg._fill(config.prompts.implicit), frames, _parse_final_verdict)
            outputs[stage.label] = verdict.to_json()
        else:
            verdict = _explicit(dlg, sample, frames, outputs, rag_index, embedder, config)
        stage = Stage.DONE
    except _Unparsed as exc:
        stage, status = exc.stage, STATUS_UNPARSED
        error = f"unparseable answer at {exc.stage.label}"
    except (BackendError, OSError, IndexError) as exc:
        stage = dlg.transcript.turns[-1].stage if dlg.transcript.turns else Stage.OCCURRENCE
        status, error = STATUS_FAILED, f"{type(exc).__name__}: {exc}"
        logger.warning("sample %s aborted: %s", sample.id, error)
    if status != STATUS_OK:
        verdict = None
    return PipelineResult(sample.id, verdict, status, dlg.transcript, outputs, stage, error)


def _explicit(
    dlg: _Dialogue,
    sample: VideoSample,
    frames: list[str],
    outputs: dict[str, Any],
    rag_index: Optional[ClauseIndex],
    embedder: Optional[Embedder],
    config: PipelineConfig,
) -> ResponsibilityVerdict:
    occurred = dlg.ask(Stage.OCCURRENCE, dlg.stage_prompt(Stage.OCCURRENCE), frames, parse_occurrence)
    outputs["Occurrence"] = occurred
    if not occurred:
        return ResponsibilityVerdict.no_accident()

    outputs["Type"] = dlg.ask(Stage.TYPE, dlg.stage_prompt(Stage.TYPE), [], parse_text)

    frame_index = dlg.ask(
        Stage.TIME_LOCATION,
        dlg.stage_prompt(Stage.TIME_LOCATION),
        [],
        lambda t: parse_frame_index(t, sample.frame_count),
    )
    outputs["TimeLocation"] = frame_index

    key_path = str(keyframe_path(sample, frame_index))
    height, width = extract_keyframe(sample, frame_index).shape[:2]
    box = dlg.ask(
        Stage.SPATIAL_LOCATION,
        dlg.stage_prompt(Stage.SPATIAL_LOCATION, keyframe=frame_index, width=width, height=height),
        [key_path],
        lambda t: parse_bbox(t, width, height),
    )
    outputs["SpatialLocation"] = box.as_list()

    for stage in (Stage.FACTS, Stage.CAUSE, Stage.ADVICE):
        outputs[stage.label] = dlg.ask(stage, dlg.stage_prompt(stage), [], parse_text)

    context = allocation_context(outputs, rag_index, embedder, config)
    verdict = dlg.ask(
        Stage.ALLOCATION,
        dlg.stage_prompt(Stage.ALLOCATION, context_block=context),
        [key_path],
        parse_verdict,
    )
    outputs["Allocation"] = verdict.to_json()
    return verdict


_FINAL = re.compile(r"final\s+answer\s*[:\-]", re.IGNORECASE)


def _parse_final_verdict(text: str) -> ResponsibilityVerdict:
    marks = list(_FINAL.finditer(text))
    return parse_verdict(text[marks[-1].end():] if marks else text)


# ---------------------------------------------------------------- batch runs

TRANSCRIPTS_FILE = "transcripts.jsonl"
PREDICTIONS_FILE = "predictions.jsonl"

BackendSource = Union[Backend, Callable[[VideoSample], Backend]]


def run_batch(
    samples: Iterable[VideoSample],
    backend: BackendSource,
    out_dir: str | Path,
    rag_index: Optional[ClauseIndex] = None,
    config: Optional[PipelineConfig] = None,
    embedder: Optional[Embedder] = None,
    jobs: int = 4,
    resume: bool = False,
) -> list[PipelineResult]:
    """Run many samples and append to ``transcripts.jsonl`` / ``predictions.jsonl``.

    ``backend`` may be a backend or a per-sample factory. Output lines follow
    input order regardless of ``jobs``. With ``resume``, samples that already
    have a non-failed prediction are skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = config or PipelineConfig()
    samples = list(samples)
    pred_path = out_dir / PREDICTIONS_FILE
    if resume and pred_path.exists():
        done = {r["sample_id"] for r in read_jsonl(pred_path) if r.get("status") != STATUS_FAILED}
        samples = [s for s in samples if s.id not in done]
    elif not resume:
        for name in (TRANSCRIPTS_FILE, PREDICTIONS_FILE):
            (out_dir / name).unlink(missing_ok=True)
    transcripts = TranscriptWriter(out_dir / TRANSCRIPTS_FILE)
    predictions = TranscriptWriter(pred_path)

    def work(sample: VideoSample) -> PipelineResult:
        b = backend(sample) if callable(backend) and not hasattr(backend, "chat") else backend
        return run_pipeline(sample, b, rag_index, config, embedder)

    results = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for result in pool.map(work, samples):
            transcripts.write_many(result.transcript.records())
            predictions.write(result.prediction())
            results.append(result)
    return results
