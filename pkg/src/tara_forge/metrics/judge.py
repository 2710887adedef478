"""LLM-as-a-judge scoring of free-text answers."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..llm_client import ChatMessage

RUBRIC = (
    "You are grading an answer about a traffic accident video against a reference answer.\n"
    "Judge three criteria together: consistency with the reference, factual correctness, "
    "and level of detail.\n"
    "Reference answer:\n{reference}\n\n"
    "Answer to grade:\n{candidate}\n\n"
    "Reply with a single integer score from 0 (useless) to 10 (fully consistent, correct and detailed)."
)
JUDGE_STAGE = "Judge"

_SCORE_LABEL = re.compile(r"score\s*[:=]?\s*(\d+)", re.IGNORECASE)
_FIRST_INT = re.compile(r"(?<![\d.])(\d+)(?![\d.]*\d)")


def parse_judge_score(text: str) -> Optional[int]:
    """Integer 0-10 from the judge reply, or None if there is none."""
    m = _SCORE_LABEL.search(text) or _FIRST_INT.search(text)
    if m is None:
        return None
    value = int(m.group(1))
    return value if 0 <= value <= 10 else None


def gpteval(candidate: str, reference: str, judge_backend) -> Optional[float]:
    """Judge score scaled to [0, 1]; None when the reply holds no usable score."""
    prompt = RUBRIC.format(reference=reference, candidate=candidate)
    reply = judge_backend.chat([ChatMessage("user", prompt)], stage=JUDGE_STAGE)
    score = parse_judge_score(reply)
    return None if score is None else score / 10


@dataclass
class JudgeTally:
    scores: list[float] = field(default_factory=list)
    skipped: int = 0

    @property
    def mean(self) -> Optional[float]:
        return sum(self.scores) / len(self.scores) if self.scores else None


def gpteval_corpus(candidates: Sequence[str], references: Sequence[str], judge_backend) -> JudgeTally:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    tally = JudgeTally()
    for cand, ref in zip(candidates, references):
        score = gpteval(cand, ref, judge_backend)
        if score is None:
            tally.skipped += 1
        else:
            tally.scores.append(score)
    return tally
