"""Legal-clause index: embedding, temperature-scaled top-K retrieval, context assembly."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

CLAUSES_FILE = "clauses.jsonl"
MATRIX_FILE = "embeddings.f32"
MAGIC = b"TARAIDX1"
DEFAULT_K = 3
DEFAULT_TAU = 1.0
NORM_TOL = 1e-6


class Embedder(Protocol):
    fingerprint: str

    def embed(self, text: str) -> np.ndarray: ...


class ClauseIndexError(ValueError):
    pass


@dataclass(frozen=True)
class LegalClause:
    clause_id: str
    article_label: str
    text: str

    def __post_init__(self) -> None:
        if not self.clause_id:
            raise ValueError("clause_id must be non-empty")
        if not self.text:
            raise ValueError(f"clause {self.clause_id!r} has empty text")

    def to_json(self) -> dict[str, str]:
        return {"clause_id": self.clause_id, "article_label": self.article_label, "text": self.text}


@dataclass(frozen=True, eq=False)
class ClauseIndex:
    clauses: tuple[LegalClause, ...]
    embeddings: np.ndarray  # (n, dim) float32, rows unit-norm
    fingerprint: str

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[0] != len(self.clauses):
            raise ClauseIndexError(f"embedding matrix {emb.shape} does not match {len(self.clauses)} clauses")
        if len(self.clauses):
            norms = np.linalg.norm(emb.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOL):
                raise ClauseIndexError("embedding rows must be L2-normalised")
        ids = [c.clause_id for c in self.clauses]
        if len(set(ids)) != len(ids):
            raise ClauseIndexError("duplicate clause_id in index")
        emb.setflags(write=False)
        object.__setattr__(self, "clauses", tuple(self.clauses))
        object.__setattr__(self, "embeddings", emb)

    def __len__(self) -> int:
        return len(self.clauses)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])


def build_index(clauses: Sequence[LegalClause], embedder: Embedder) -> ClauseIndex:
    if not clauses:
        raise ValueError("cannot build an index from zero clauses")
    seen: set[str] = set()
    for c in clauses:
        if c.clause_id in seen:
            raise ClauseIndexError(f"duplicate clause_id {c.clause_id!r}")
        seen.add(c.clause_id)
    rows = [np.asarray(embedder.embed(c.text), dtype=np.float64) for c in clauses]
    dims = {r.shape for r in rows}
    if len(dims) != 1:
        raise ClauseIndexError(f"embedder returned mixed dimensions {sorted(dims)}")
    matrix = np.vstack(rows)
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
    return ClauseIndex(tuple(clauses), matrix.astype("<f4"), embedder.fingerprint)


def save_index(index: ClauseIndex, out_dir: str | Path) -> Path:
    """Write ``clauses.jsonl`` and ``embeddings.f32`` into ``out_dir``.

    The matrix file is ``MAGIC``, then little-endian uint32 dim, count and
    fingerprint length, the UTF-8 fingerprint, and row-major float32 data.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(c.to_json(), sort_keys=True, ensure_ascii=False) for c in index.clauses]
    (out_dir / CLAUSES_FILE).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    fp = index.fingerprint.encode("utf-8")
    header = MAGIC + struct.pack("<III", index.dim, len(index), len(fp)) + fp
    data = np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes()
    (out_dir / MATRIX_FILE).write_bytes(header + data)
    return out_dir


def load_index(index_dir: str | Path) -> ClauseIndex:
    index_dir = Path(index_dir)
    clauses = tuple(LegalClause(**obj) for obj in read_clauses_jsonl(index_dir / CLAUSES_FILE))
    raw = (index_dir / MATRIX_FILE).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ClauseIndexError(f"{index_dir / MATRIX_FILE} is not a clause index matrix")
    off = len(MAGIC)
    dim, count, fp_len = struct.unpack_from("<III", raw, off)
    off += 12
    fingerprint = raw[off : off + fp_len].decode("utf-8")
    off += fp_len
    matrix = np.frombuffer(raw, dtype="<f4", offset=off)
    if matrix.size != dim * count or count != len(clauses):
        raise ClauseIndexError(f"matrix holds {matrix.size} floats, expected {count}x{dim} for {len(clauses)} clauses")
    return ClauseIndex(clauses, matrix.reshape(count, dim).copy(), fingerprint)


def empty_index() -> ClauseIndex:
    return ClauseIndex((), np.zeros((0, 1), dtype=np.float32), "")


def read_clauses_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_clauses(path: str | Path) -> list[LegalClause]:
    return [LegalClause(**obj) for obj in read_clauses_jsonl(path)]


def sample_clauses() -> list[LegalClause]:
    """Small synthetic knowledge base shipped with the package."""
    text = resources.files("tara_forge.data").joinpath("sample_clauses.jsonl").read_text("utf-8")
    return [LegalClause(**json.loads(line)) for line in text.splitlines() if line.strip()]


def rank_by_similarity(query: np.ndarray, embeddings: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` rows with largest dot product, and those dot products.

    Ties keep ascending row order. Each row's dot product is an elementwise
    product summed along the row, so identical rows score identically.
    """
    sims = (np.asarray(embeddings, dtype=np.float64) * np.asarray(query, dtype=np.float64)).sum(axis=1)
    order = np.argsort(-sims, kind="stable")[:k]
    return order, sims[order]


def retrieve_vector(
    query: np.ndarray, index: ClauseIndex, k: int = DEFAULT_K, tau: float = DEFAULT_TAU
) -> tuple[list[LegalClause], np.ndarray]:
    if len(index) == 0:
        raise ClauseIndexError("clause index is empty")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not 1 <= k <= len(index):
        raise ValueError(f"k={k} must lie in [1, {len(index)}]")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ClauseIndexError(f"query dimension {query.shape} does not match index dimension {index.dim}")
    order, sims = rank_by_similarity(query, index.embeddings, k)
    return [index.clauses[i] for i in order], sims / tau


def retrieve(
    query_text: str,
    index: ClauseIndex,
    embedder: Embedder,
    k: int = DEFAULT_K,
    tau: float = DEFAULT_TAU,
) -> tuple[list[LegalClause], np.ndarray]:
    """Top-``k`` clauses for ``query_text`` with scores ``cos(q, z_i) / tau``, best first."""
    if len(index) == 0:
        raise ClauseIndexError("clause index is empty")
    query = embedder.embed(query_text)
    if index.fingerprint and embedder.fingerprint != index.fingerprint:
        raise ClauseIndexError(
            f"index was built with {index.fingerprint!r}, query embedder is {embedder.fingerprint!r}"
        )
    return retrieve_vector(query, index, k, tau)


def assemble_context(clauses: Iterable[LegalClause]) -> str:
    """Join clauses as ``"<article_label>: <text>"`` blocks separated by blank lines."""
    blocks = [f"{c.article_label}: {c.text}" if c.article_label else c.text for c in clauses]
    if not blocks:
        raise ValueError("no clauses to assemble")
    return "\n\n".join(blocks)
