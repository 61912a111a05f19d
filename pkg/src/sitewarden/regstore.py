"""Regulation knowledge base: clauses, character chunks, embeddings, top-k search.

The default embedder is a deterministic tf-idf model fitted on the chunk
texts, so retrieval needs no model server. A remote embedder that calls the
model server's ``/api/embed`` endpoint is available for larger corpora.
Search is exact: every chunk is scored by cosine similarity and results are
ordered by ``(score desc, chunk_id asc)``.
"""

from __future__ import annotations

import json
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyText, InvalidCorpus, InvalidParams

DEFAULT_MAX_CHARS = 800
DEFAULT_OVERLAP = 100
DEFAULT_K = 4
LEXICAL_ID = "lexical-tfidf-v1"

STOPWORDS = frozenset(
    """a an and are as at be been being but by can could do does for from had has
    have if in into is it its may must no nor not of on or other shall should so
    such than that the their them then there these they this those to under upon
    was were when where which while who will with within without would""".split()
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class RegulationClause:
    clause_id: str
    subpart: str
    title: str
    body: str


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    clause_id: str
    text: str
    span: tuple[int, int]


@dataclass(frozen=True)
class ScoredChunk:
    chunk: Chunk
    score: float


def load_corpus(path: str | os.PathLike) -> list[RegulationClause]:
    """Read a JSONL corpus of ``{clause_id, subpart, title, body}`` records."""
    clauses: list[RegulationClause] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                clause = RegulationClause(
                    clause_id=str(rec["clause_id"]),
                    subpart=str(rec.get("subpart", "")),
                    title=str(rec.get("title", "")),
                    body=str(rec["body"]),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidCorpus(f"{path}:{n}: {exc}") from exc
            if not clause.clause_id:
                raise InvalidCorpus(f"{path}:{n}: empty clause_id")
            if not clause.body.strip():
                raise InvalidCorpus(f"{path}:{n}: clause {clause.clause_id} has an empty body")
            if clause.clause_id in seen:
                raise InvalidCorpus(f"{path}:{n}: duplicate clause_id {clause.clause_id}")
            seen.add(clause.clause_id)
            clauses.append(clause)
    return clauses


def window_spans(length: int, max_chars: int, overlap: int) -> list[tuple[int, int]]:
    if max_chars <= 0 or overlap < 0 or overlap >= max_chars:
        raise InvalidParams(f"need max_chars > 0 and 0 <= overlap < max_chars (got {max_chars}, {overlap})")
    stride = max_chars - overlap
    spans = []
    start = 0
    while True:
        end = min(start + max_chars, length)
        spans.append((start, end))
        if end >= length:
            return spans
        start += stride


def chunk_clauses(
    clauses: Sequence[RegulationClause],
    max_chars: int = DEFAULT_MAX_CHARS,
    overlap: int = DEFAULT_OVERLAP,
) -> list[Chunk]:
    """Split each clause body with a sliding character window of stride ``max_chars - overlap``."""
    chunks = []
    for clause in clauses:
        for ordinal, (start, end) in enumerate(window_spans(len(clause.body), max_chars, overlap)):
            chunks.append(
                Chunk(f"{clause.clause_id}#{ordinal}", clause.clause_id, clause.body[start:end], (start, end))
            )
    return chunks


def tokenize(text: str) -> list[str]:
    tokens = []
    for tok in _TOKEN_RE.findall(text.lower()):
        if tok in STOPWORDS:
            continue
        # crude plural folding: "ladders" -> "ladder", but keep "glass", "status"
        if len(tok) > 3 and tok.endswith("s") and not tok.endswith(("ss", "us", "is")):
            tok = tok[:-1]
        tokens.append(tok)
    return tokens


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return vec
    return vec / norm


@dataclass
class LexicalEmbedder:
    """tf-idf with smoothed idf ``ln((1 + N) / (1 + df)) + 1`` and raw term counts.

    Terms outside the fitted vocabulary are ignored; a text with no known
    terms embeds to the zero vector, which scores 0 against everything.
    """

    vocabulary: list[str]
    idf: list[float]
    embedder_id: str = LEXICAL_ID
    _position: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._position = {term: i for i, term in enumerate(self.vocabulary)}

    @classmethod
    def fit(cls, texts: Sequence[str]) -> "LexicalEmbedder":
        df: Counter[str] = Counter()
        for text in texts:
            df.update(set(tokenize(text)))
        vocabulary = sorted(df)
        n = len(texts)
        idf = [math.log((1 + n) / (1 + df[t])) + 1.0 for t in vocabulary]
        return cls(vocabulary, idf)

    @property
    def dimension(self) -> int:
        return len(self.vocabulary)

    @property
    def params(self) -> dict:
        return {"vocabulary": self.vocabulary, "idf": self.idf}

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmptyText("cannot embed empty text")
        vec = np.zeros(self.dimension)
        for term, count in Counter(tokenize(text)).items():
            pos = self._position.get(term)
            if pos is not None:
                vec[pos] = count * self.idf[pos]
        return _normalize(vec)


class RemoteEmbedder:
    """Embeds through the model server (``POST /api/embed``) and unit-normalizes."""

    def __init__(self, backend, model_id: str, dimension: int | None = None):
        self.backend = backend
        self.model_id = model_id
        self.embedder_id = f"remote:{model_id}"
        self._dimension = dimension

    @property
    def dimension(self) -> int:
        if self._dimension is None:
            raise InvalidParams("remote embedder dimension is unknown until the first embedding")
        return self._dimension

    @property
    def params(self) -> dict:
        return {"model": self.model_id}

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmptyText("cannot embed empty text")
        vec = np.asarray(self.backend.embed(self.model_id, text), dtype=float)
        if self._dimension is None:
            self._dimension = len(vec)
        elif len(vec) != self._dimension:
            raise DimensionMismatch(f"embedding has {len(vec)} dims, expected {self._dimension}")
        return _normalize(vec)


def embed(embedder, text: str) -> np.ndarray:
    return embedder.embed(text)


@dataclass
class EmbeddingIndex:
    dimension: int
    embedder_id: str
    params: dict
    chunks: list[Chunk]
    vectors: np.ndarray  # shape (len(chunks), dimension), rows unit-norm or zero

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def chunk_ids(self) -> list[str]:
        return [c.chunk_id for c in self.chunks]

    def embedder(self):
        if self.embedder_id == LEXICAL_ID:
            return LexicalEmbedder(self.params["vocabulary"], self.params["idf"])
        raise InvalidParams(f"index embedder {self.embedder_id!r} needs an explicit embedder")

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            header = {"dimension": self.dimension, "embedder_id": self.embedder_id, "params": self.params}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for chunk, vec in zip(self.chunks, self.vectors):
                rec = {
                    "chunk_id": chunk.chunk_id,
                    "clause_id": chunk.clause_id,
                    "span": list(chunk.span),
                    "text": chunk.text,
                    "vector": [float(x) for x in vec],
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EmbeddingIndex":
        with open(path, encoding="utf-8") as fh:
            lines = [line for line in fh if line.strip()]
        if not lines:
            raise InvalidCorpus(f"{path}: empty index file")
        header = json.loads(lines[0])
        chunks, rows = [], []
        for line in lines[1:]:
            rec = json.loads(line)
            chunks.append(Chunk(rec["chunk_id"], rec["clause_id"], rec.get("text", ""), tuple(rec["span"])))
            rows.append(rec["vector"])
        dim = header["dimension"]
        vectors = np.asarray(rows, dtype=float).reshape(len(rows), dim)
        return cls(dim, header["embedder_id"], header.get("params", {}), chunks, vectors)


def build_index(chunks: Sequence[Chunk], embedder=None) -> EmbeddingIndex:
    """Embed every chunk. Without an embedder, fit a lexical one on the chunks."""
    chunks = list(chunks)
    if embedder is None:
        embedder = LexicalEmbedder.fit([c.text for c in chunks])
    rows = [embedder.embed(c.text) for c in chunks]
    dim = embedder.dimension if rows or isinstance(embedder, LexicalEmbedder) else 0
    vectors = np.vstack(rows) if rows else np.zeros((0, dim))
    return EmbeddingIndex(dim, embedder.embedder_id, embedder.params, chunks, vectors)


def index_from_vectors(entries: dict[str, Sequence[float]]) -> EmbeddingIndex:
    """Index over bare vectors keyed by chunk id (clause id = chunk id)."""
    ids = list(entries)
    vectors = np.asarray([entries[i] for i in ids], dtype=float)
    dim = vectors.shape[1] if len(ids) else 0
    chunks = [Chunk(i, i, "", (0, 0)) for i in ids]
    return EmbeddingIndex(dim, "vectors", {}, chunks, vectors.reshape(len(ids), dim))


def retrieve(index: EmbeddingIndex, query_vector, k: int) -> list[ScoredChunk]:
    """Exact top-k by cosine; ties go to the smaller chunk_id."""
    if k < 1:
        raise InvalidParams(f"k must be >= 1, got {k}")
    if len(index) == 0:
        return []
    q = np.asarray(query_vector, dtype=float)
    if q.shape != (index.dimension,):
        raise DimensionMismatch(f"query has shape {q.shape}, index dimension is {index.dimension}")
    # row-wise multiply+sum so identical rows always get bit-identical scores
    scores = (index.vectors * q).sum(axis=1)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.chunks[i].chunk_id))
    return [ScoredChunk(index.chunks[i], float(scores[i])) for i in order[:k]]


def search(index: EmbeddingIndex, text: str, k: int = DEFAULT_K, embedder=None) -> list[ScoredChunk]:
    embedder = embedder or index.embedder()
    return retrieve(index, embedder.embed(text), k)
