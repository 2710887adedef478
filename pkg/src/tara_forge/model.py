"""Domain types and the JSONL manifest format."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

SCHEMA = "decatara/1"
INGEST_FPS = 8

ENTITY_KINDS: tuple[str, ...] = (
    "pedestrian",
    "motorcycle",
    "bike",
    "vehicle",
    "truck",
    "ego-car",
    "electric bike",
    "bus",
    "taxi",
    "tricycle",
    "van",
    "tram",
)
QUALIFIERS: tuple[str, ...] = ("left", "right", "front", "rear", "first", "second")


class ManifestError(ValueError):
    """Raised for malformed manifest lines or records violating an invariant."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class Source(str, enum.Enum):
    MM_AU = "MM-AU"
    AV_TAU = "AV-TAU"
    BDDX = "BDDX"
    SYNTHETIC = "synthetic"


class TaskKind(str, enum.Enum):
    OCCURRENCE = "occurrence"
    TYPE = "type"
    TIME_LOCATION = "time_location"
    SPATIAL_LOCATION = "spatial_location"
    FACTS = "facts"
    CAUSE = "cause"
    ADVICE = "advice"
    BEHAVIOR_DESCRIPTION = "behavior_description"
    BEHAVIOR_EXPLANATION = "behavior_explanation"
    RESPONSIBILITY = "responsibility"


@dataclass(frozen=True)
class BBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        if not (0 <= self.x1 < self.x2 and 0 <= self.y1 < self.y2):
            raise ValueError(f"degenerate or negative box {self.as_list()}")

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, values: Sequence[Any]) -> "BBox":
        if len(values) != 4:
            raise ValueError(f"bbox needs 4 coordinates, got {len(values)}")
        return cls(*(int(v) for v in values))


@dataclass(frozen=True)
class Entity:
    kind: str
    qualifier: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in ENTITY_KINDS:
            raise ValueError(f"unknown entity kind {self.kind!r}")
        if self.qualifier is not None and self.qualifier not in QUALIFIERS:
            raise ValueError(f"unknown qualifier {self.qualifier!r}")

    def phrase(self) -> str:
        return f"{self.qualifier} {self.kind}" if self.qualifier else self.kind

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        if self.qualifier is not None:
            out["qualifier"] = self.qualifier
        return out

    @classmethod
    def from_json(cls, obj: Any) -> "Entity":
        if isinstance(obj, str):
            return cls(obj)
        return cls(obj["kind"], obj.get("qualifier"))


class Variant(str, enum.Enum):
    A = "A"  # one party takes main responsibility
    B = "B"  # two parties share responsibility equally
    C = "C"  # no accident


@dataclass(frozen=True)
class ResponsibilityVerdict:
    variant: Variant
    primary: Optional[Entity] = None
    secondary: Optional[Entity] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant is Variant.A:
            if self.primary is None or self.secondary is not None:
                raise ValueError("variant A takes exactly one entity")
        elif self.variant is Variant.B:
            if self.primary is None or self.secondary is None:
                raise ValueError("variant B takes two entities")
            if self.primary == self.secondary:
                raise ValueError("variant B entities must differ in kind or qualifier")
        elif self.primary is not None or self.secondary is not None:
            raise ValueError("variant C takes no entities")

    @classmethod
    def main(cls, entity: Entity) -> "ResponsibilityVerdict":
        return cls(Variant.A, entity)

    @classmethod
    def shared(cls, first: Entity, second: Entity) -> "ResponsibilityVerdict":
        return cls(Variant.B, first, second)

    @classmethod
    def no_accident(cls) -> "ResponsibilityVerdict":
        return cls(Variant.C)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"variant": self.variant.value}
        if self.primary is not None:
            out["primary"] = self.primary.to_json()
        if self.secondary is not None:
            out["secondary"] = self.secondary.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ResponsibilityVerdict":
        primary = obj.get("primary")
        secondary = obj.get("secondary")
        return cls(
            Variant(obj["variant"]),
            Entity.from_json(primary) if primary is not None else None,
            Entity.from_json(secondary) if secondary is not None else None,
        )


@dataclass(frozen=True)
class VideoSample:
    id: str
    source: Source
    fps: int
    frame_count: int
    has_accident: bool
    frames_dir: Optional[str] = None
    frame_width: Optional[int] = None
    frame_height: Optional[int] = None
    accident_type: Optional[str] = None
    accident_frame: Optional[int] = None
    accident_bbox: Optional[BBox] = None
    facts_text: Optional[str] = None
    cause_text: Optional[str] = None
    advice_text: Optional[str] = None
    behavior_text: Optional[str] = None
    behavior_explanation: Optional[str] = None
    responsibility: Optional[ResponsibilityVerdict] = None
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "source", Source(self.source))
        self.check()

    def check(self) -> None:
        def bad(name: str, message: str) -> ManifestError:
            return ManifestError(f"{name}: {message} (sample {self.id!r})", field=name)

        if not self.id:
            raise bad("id", "must be a non-empty string")
        if not isinstance(self.fps, int) or self.fps <= 0:
            raise bad("fps", "must be a positive integer")
        if not isinstance(self.frame_count, int) or self.frame_count <= 0:
            raise bad("frame_count", "must be a positive integer")
        if self.has_accident:
            if self.accident_frame is None:
                raise bad("accident_frame", "required when has_accident is true")
        if self.accident_frame is not None and not 0 <= self.accident_frame < self.frame_count:
            raise bad(
                "accident_frame",
                f"{self.accident_frame} outside [0, {self.frame_count})",
            )
        if not self.has_accident and self.responsibility is not None:
            if self.responsibility.variant is not Variant.C:
                raise bad("responsibility", "non-accident sample must carry variant C")
        box = self.accident_bbox
        if box is not None:
            if self.frame_width is not None and box.x2 > self.frame_width:
                raise bad("accident_bbox", f"x2={box.x2} exceeds frame width {self.frame_width}")
            if self.frame_height is not None and box.y2 > self.frame_height:
                raise bad("accident_bbox", f"y2={box.y2} exceeds frame height {self.frame_height}")

    def qa_tasks(self) -> list[TaskKind]:
        """Tasks for which this sample carries a ground-truth answer."""
        tasks = [TaskKind.OCCURRENCE]
        if self.accident_type:
            tasks.append(TaskKind.TYPE)
        if self.has_accident and self.accident_frame is not None:
            tasks.append(TaskKind.TIME_LOCATION)
        if self.accident_bbox is not None:
            tasks.append(TaskKind.SPATIAL_LOCATION)
        for kind, text in (
            (TaskKind.FACTS, self.facts_text),
            (TaskKind.CAUSE, self.cause_text),
            (TaskKind.ADVICE, self.advice_text),
            (TaskKind.BEHAVIOR_DESCRIPTION, self.behavior_text),
            (TaskKind.BEHAVIOR_EXPLANATION, self.behavior_explanation),
        ):
            if text:
                tasks.append(kind)
        if self.responsibility is not None:
            tasks.append(TaskKind.RESPONSIBILITY)
        return tasks

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = dict(self.extra)
        out.update(
            id=self.id,
            source=self.source.value,
            fps=self.fps,
            frame_count=self.frame_count,
            has_accident=self.has_accident,
        )
        for name in _OPTIONAL_SCALARS:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.accident_bbox is not None:
            out["accident_bbox"] = self.accident_bbox.as_list()
        if self.responsibility is not None:
            out["responsibility"] = self.responsibility.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "VideoSample":
        obj = dict(obj)
        for name in ("id", "source", "fps", "frame_count", "has_accident"):
            if name not in obj:
                raise ManifestError(f"{name}: missing required field", field=name)
        kwargs: dict[str, Any] = {}
        for name in ("id", "source", "fps", "frame_count", "has_accident", *_OPTIONAL_SCALARS):
            if name in obj:
                kwargs[name] = obj.pop(name)
        try:
            kwargs["source"] = Source(kwargs["source"])
        except ValueError:
            raise ManifestError(f"source: unknown source {kwargs['source']!r}", field="source")
        if not isinstance(kwargs["has_accident"], bool):
            raise ManifestError("has_accident: must be a boolean", field="has_accident")
        if "accident_bbox" in obj:
            try:
                kwargs["accident_bbox"] = BBox.from_list(obj.pop("accident_bbox"))
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"accident_bbox: {exc}", field="accident_bbox") from None
        if "responsibility" in obj:
            try:
                kwargs["responsibility"] = ResponsibilityVerdict.from_json(obj.pop("responsibility"))
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"responsibility: {exc}", field="responsibility") from None
        return cls(**kwargs, extra=obj)


_OPTIONAL_SCALARS = (
    "frames_dir",
    "frame_width",
    "frame_height",
    "accident_type",
    "accident_frame",
    "facts_text",
    "cause_text",
    "advice_text",
    "behavior_text",
    "behavior_explanation",
)


def _iter_manifest_lines(path: Path) -> Iterable[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise ManifestError("expected a JSON object", line=lineno)
            yield lineno, obj


def read_header(path: str | Path) -> dict[str, Any] | None:
    for _, obj in _iter_manifest_lines(Path(path)):
        return obj if "schema" in obj else None
    return None


def load_manifest(path: str | Path) -> list[VideoSample]:
    """Load a JSONL manifest, enforcing sample invariants and id uniqueness.

    The optional first line ``{"schema": "decatara/1"}`` is a header record.
    Errors carry the offending line number and, for invariant violations, the
    field name.
    """
    path = Path(path)
    samples: list[VideoSample] = []
    seen: dict[str, int] = {}
    for index, (lineno, obj) in enumerate(_iter_manifest_lines(path)):
        if "schema" in obj:
            if index:
                raise ManifestError("schema header must be the first record", line=lineno)
            if obj["schema"] != SCHEMA:
                raise ManifestError(f"unsupported schema {obj['schema']!r}", line=lineno)
            continue
        try:
            sample = VideoSample.from_json(obj)
        except ManifestError as exc:
            raise ManifestError(str(exc), line=lineno, field=exc.field) from None
        except (TypeError, ValueError) as exc:
            raise ManifestError(str(exc), line=lineno) from None
        if sample.id in seen:
            raise ManifestError(
                f"id: duplicate id {sample.id!r} (first seen on line {seen[sample.id]})",
                line=lineno,
                field="id",
            )
        seen[sample.id] = lineno
        samples.append(sample)
    return samples


def dump_manifest(samples: Iterable[VideoSample], header: dict[str, Any] | None = None) -> str:
    head = {"schema": SCHEMA}
    if header:
        head.update(header)
        head["schema"] = SCHEMA
    lines = [json.dumps(head, sort_keys=True, ensure_ascii=False)]
    lines += [json.dumps(s.to_json(), sort_keys=True, ensure_ascii=False) for s in samples]
    return "\n".join(lines) + "\n"


def save_manifest(
    samples: Iterable[VideoSample], path: str | Path, header: dict[str, Any] | None = None
) -> None:
    Path(path).write_text(dump_manifest(samples, header), encoding="utf-8")


TYPE_A_THRESHOLD = 0.70
SHARED_BAND = (0.45, 0.65)


def map_fault_ratio(
    ratio_primary: float, ratio_secondary: float, entities: tuple[Entity, Entity]
) -> ResponsibilityVerdict | None:
    """Convert an official fault split into a verdict.

    Returns None when the split falls between the main-responsibility and the
    shared-responsibility bands (or is otherwise inconsistent); such cases need
    manual review.
    """
    for name, r in (("ratio_primary", ratio_primary), ("ratio_secondary", ratio_secondary)):
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"{name}={r} outside [0, 1]")
    if ratio_primary + ratio_secondary > 1.05:
        return None
    first, second = entities
    if ratio_primary > TYPE_A_THRESHOLD:
        return ResponsibilityVerdict.main(first)
    if ratio_secondary > TYPE_A_THRESHOLD:
        return ResponsibilityVerdict.main(second)
    lo, hi = SHARED_BAND
    if lo <= ratio_primary <= hi and lo <= ratio_secondary <= hi and first != second:
        return ResponsibilityVerdict.shared(first, second)
    return None
