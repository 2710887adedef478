"""Chat-completion and embedding clients, plus offline scripted backends.

Every backend exposes ``chat(history, *, stage=None, sample_id=None) -> str``
and ``clock`` (used by callers to time requests). Embedders expose
``embed(text) -> np.ndarray`` returning an L2-normalised vector and a
``fingerprint`` string naming the model and dimension.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence, TypeVar

import httpx
import numpy as np

logger = logging.getLogger(__name__)

ENV_ENDPOINT = "TARA_ENDPOINT"
ENV_API_KEY = "TARA_API_KEY"
ENV_MODEL = "TARA_MODEL"
MAX_FRAMES_PER_TURN = 32
RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})
ROLES = ("system", "user", "assistant")

T = TypeVar("T")


class BackendError(RuntimeError):
    pass


class BackendTimeoutError(BackendError):
    pass


class BackendProtocolError(BackendError):
    """Non-retryable failure: bad request, auth error, malformed response."""


class RetryExhaustedError(BackendError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str
    images: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "images", tuple(str(p) for p in self.images))
        if self.role == "assistant" and self.images:
            raise ValueError("assistant messages carry no images")


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str
    model: str
    timeout: float = 60.0
    max_retries: int = 3
    concurrency: int = 4
    api_key: Optional[str] = field(default=None, repr=False)
    max_frames: int = MAX_FRAMES_PER_TURN
    backoff: float = 0.5

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.max_frames < 1:
            raise ValueError("max_frames must be >= 1")

    @classmethod
    def from_env(cls, **overrides: Any) -> "BackendConfig":
        values: dict[str, Any] = {
            "endpoint": os.environ.get(ENV_ENDPOINT, "http://localhost:8000/v1"),
            "model": os.environ.get(ENV_MODEL, "local-model"),
            "api_key": os.environ.get(ENV_API_KEY),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def validate_history(history: Sequence[ChatMessage], max_frames: int) -> None:
    if not history:
        raise ValueError("chat history is empty")
    if history[-1].role != "user":
        raise ValueError("chat history must end with a user message")
    for msg in history:
        if len(msg.images) > max_frames:
            raise ValueError(f"{len(msg.images)} images in one turn exceeds the limit of {max_frames}")


def subsample_frames(frames: Sequence[T], max_frames: int, seed: int | None = 0) -> list[T]:
    """Pick at most ``max_frames`` items at a uniform stride.

    With a seed, the stride phase is drawn from a seeded generator so repeated
    runs attach the same frames; ``seed=None`` starts at the first frame.
    """
    n = len(frames)
    if n <= max_frames:
        return list(frames)
    stride = n / max_frames
    offset = 0.0 if seed is None else float(np.random.default_rng(seed).uniform(0, stride))
    idx = np.floor(offset + stride * np.arange(max_frames)).astype(int)
    return [frames[i] for i in np.minimum(idx, n - 1)]


def _image_part(path: str) -> dict[str, Any]:
    mime = mimetypes.guess_type(path)[0] or "image/png"
    data = base64.b64encode(Path(path).read_bytes()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}}


def encode_messages(history: Sequence[ChatMessage]) -> list[dict[str, Any]]:
    """Chat-completions ``messages`` array; images become base64 data URLs."""
    out = []
    for msg in history:
        if not msg.images:
            out.append({"role": msg.role, "content": msg.text})
            continue
        parts = [_image_part(p) for p in msg.images]
        parts.append({"type": "text", "text": msg.text})
        out.append({"role": msg.role, "content": parts})
    return out


class ChatClient:
    """HTTP client for an OpenAI-compatible ``/chat/completions`` + ``/embeddings`` server.

    Transient failures (429, 5xx, timeouts, connection errors) are retried with
    exponential backoff; at most ``config.concurrency`` requests are in flight.
    """

    def __init__(
        self,
        config: BackendConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        headers = {"Content-Type": "application/json"}
        if config.api_key:
            headers["Authorization"] = f"Bearer {config.api_key}"
        self._http = httpx.Client(
            base_url=config.endpoint.rstrip("/") + "/",
            headers=headers,
            timeout=config.timeout,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(config.concurrency)
        self._sleep = sleep
        self._dim: int | None = None
        self.clock = time.perf_counter
        self.retries = 0

    @property
    def fingerprint(self) -> str:
        return f"{self.config.model}/{self._dim}" if self._dim else self.config.model

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ChatClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        attempts = self.config.max_retries + 1
        last: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                delay = self.config.backoff * 2 ** (attempt - 1)
                self.retries += 1
                logger.warning("retry %d/%d for %s after %s", attempt, self.config.max_retries, path, last)
                self._sleep(delay)
            try:
                with self._slots:
                    resp = self._http.post(path, json=payload)
            except httpx.TransportError as exc:  # includes timeouts
                last = exc
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = BackendError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendProtocolError(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")
            try:
                body = resp.json()
            except ValueError:
                raise BackendProtocolError(f"non-JSON response from {path}") from None
            if attempt:
                logger.info("%s succeeded after %d retries", path, attempt)
            return body
        if isinstance(last, httpx.TimeoutException):
            raise BackendTimeoutError(f"{path} timed out after {attempts} attempts")
        raise RetryExhaustedError(f"{path} failed after {attempts} attempts: {last}", attempts)

    def chat(
        self,
        history: Sequence[ChatMessage],
        *,
        stage: str | None = None,
        sample_id: str | None = None,
    ) -> str:
        validate_history(history, self.config.max_frames)
        body = self._post(
            "chat/completions",
            {"model": self.config.model, "messages": encode_messages(history), "temperature": 0},
        )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise BackendProtocolError("response lacks choices[0].message.content") from None
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        return str(content)

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        body = self._post("embeddings", {"model": self.config.model, "input": text})
        try:
            vec = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError):
            raise BackendProtocolError("response lacks data[0].embedding") from None
        if self._dim is None:
            self._dim = vec.shape[0]
        elif vec.shape[0] != self._dim:
            raise BackendProtocolError(f"embedding dimension changed from {self._dim} to {vec.shape[0]}")
        return l2_normalize(vec)


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("cannot normalise a zero vector")
    return vec / norm


_WORD = re.compile(r"[a-z0-9]+")


class HashEmbedder:
    """Deterministic offline embedder: bag of seeded Gaussian word projections.

    Each lowercase alphanumeric token seeds a generator with the first 8 bytes
    of its SHA-256 digest; the token vectors are summed and L2-normalised. Text
    without such tokens hashes as a whole.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.clock = lambda: 0.0

    @property
    def fingerprint(self) -> str:
        return f"hash-embedder/{self.dim}"

    def _token_vector(self, token: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
        return np.random.default_rng(seed).standard_normal(self.dim)

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        tokens = _WORD.findall(text.lower()) or [text]
        return l2_normalize(sum(self._token_vector(t) for t in tokens))


@dataclass
class Rule:
    answers: list[str]
    stage: Optional[str] = None
    pattern: Optional[re.Pattern[str]] = None
    calls: int = 0

    def matches(self, stage: str | None, prompt: str) -> bool:
        if self.stage is not None and self.stage != stage:
            return False
        return self.pattern is None or bool(self.pattern.search(prompt))

    def next_answer(self) -> str:
        answer = self.answers[min(self.calls, len(self.answers) - 1)]
        self.calls += 1
        return answer


class ScriptedBackend:
    """Offline backend answering from a script of ``(stage, regex) -> answer`` rules.

    Rules are tried in order against the stage name and the last user message;
    the first match answers. A rule with a list of answers hands them out in
    sequence and then repeats the last one. ``fail_after`` makes the backend
    raise ``RetryExhaustedError`` once that many calls have been answered.
    """

    def __init__(
        self,
        rules: Iterable[tuple[str | None, str | None, str | Sequence[str]]] = (),
        *,
        default: str | None = None,
        max_frames: int = MAX_FRAMES_PER_TURN,
        fail_after: int | None = None,
    ):
        self.rules = [
            Rule(
                [answer] if isinstance(answer, str) else list(answer),
                stage,
                re.compile(pattern, re.IGNORECASE) if pattern else None,
            )
            for stage, pattern, answer in rules
        ]
        self.default = default
        self.max_frames = max_frames
        self.fail_after = fail_after
        self.calls: list[dict[str, Any]] = []
        self.clock = lambda: 0.0
        self._lock = threading.Lock()

    @classmethod
    def from_mapping(cls, script: dict[str, Any]) -> "ScriptedBackend":
        """Build from ``{"rules": [{"stage", "pattern", "answer"}...], "default": ...}``."""
        rules = [(r.get("stage"), r.get("pattern"), r["answer"]) for r in script.get("rules", [])]
        return cls(rules, default=script.get("default"), fail_after=script.get("fail_after"))

    @classmethod
    def from_transcript(cls, records: Iterable[dict[str, Any]], sample_id: str) -> "ScriptedBackend":
        """Replay the raw answers logged for one sample, stage by stage."""
        by_stage: dict[str, list[str]] = {}
        for rec in records:
            if rec.get("sample_id") == sample_id:
                by_stage.setdefault(rec["stage"], []).append(rec["raw_answer"])
        return cls([(stage, None, answers) for stage, answers in by_stage.items()])

    def chat(
        self,
        history: Sequence[ChatMessage],
        *,
        stage: str | None = None,
        sample_id: str | None = None,
    ) -> str:
        validate_history(history, self.max_frames)
        prompt = history[-1].text
        with self._lock:
            if self.fail_after is not None and len(self.calls) >= self.fail_after:
                raise RetryExhaustedError("scripted backend refused the request", 1)
            self.calls.append({"stage": stage, "sample_id": sample_id, "prompt": prompt})
            for rule in self.rules:
                if rule.matches(stage, prompt):
                    return rule.next_answer()
        if self.default is not None:
            return self.default
        raise BackendProtocolError(f"no scripted answer for stage={stage!r} prompt={prompt[:60]!r}")


class TranscriptWriter:
    """Thread-safe append-only JSONL sink for per-turn records."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def write(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def write_many(self, records: Iterable[dict[str, Any]]) -> None:
        lines = [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in records]
        if not lines:
            return
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
