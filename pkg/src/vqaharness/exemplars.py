"""Embedding-based retrieval of few-shot exemplars.

Selection keeps the k most similar pool items whose similarity stays strictly
below the cap, which rules out near-duplicates of the test question. The pool
is scanned exhaustively; no approximate index.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from .backends import Backend, BackendRequest, GenerationConfig
from .errors import BackendError, DimMismatch, EmbeddingUnavailable, ZeroVector


@dataclass
class Exemplar:
    """A solved question with optional caption/rationale and its embedding."""

    question: str
    answer: str
    caption: Optional[str] = None
    rationale: Optional[str] = None
    embedding: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.question or not self.answer:
            raise ValueError("exemplars need a non-empty question and answer")
        if self.embedding is not None:
            self.embedding = np.asarray(self.embedding, dtype=np.float64)

    def to_record(self) -> dict:
        record = {"question": self.question, "answer": self.answer}
        if self.caption is not None:
            record["caption"] = self.caption
        if self.rationale is not None:
            record["rationale"] = self.rationale
        if self.embedding is not None:
            record["embedding"] = [float(x) for x in self.embedding]
        return record

    @classmethod
    def from_record(cls, record: dict) -> "Exemplar":
        return cls(
            question=record["question"],
            answer=record["answer"],
            caption=record.get("caption"),
            rationale=record.get("rationale"),
            embedding=record.get("embedding"),
        )


@dataclass
class SelectionConfig:
    """How many exemplars to pick and where the similarity cap sits."""

    k: int = 5
    similarity_cap: float = 0.6

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not 0 < self.similarity_cap <= 1:
            raise ValueError("similarity_cap must lie in (0, 1]")


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"vector shapes differ: {a.shape} vs {b.shape}")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(np.dot(a, b) / (norm_a * norm_b))


def select_exemplars(
    query_embedding: Sequence[float],
    pool: Sequence[Exemplar],
    cfg: SelectionConfig,
) -> list[Exemplar]:
    """Top-k pool items by cosine similarity, keeping only those strictly
    below the cap; ties break by pool index."""
    if cfg.k == 0 or not pool:
        return []
    query = np.asarray(query_embedding, dtype=np.float64)
    matrix = np.stack([e.embedding for e in pool])
    if matrix.shape[1] != query.shape[0]:
        raise DimMismatch(
            f"query dimension {query.shape[0]} vs pool dimension {matrix.shape[1]}"
        )
    query_norm = np.linalg.norm(query)
    pool_norms = np.linalg.norm(matrix, axis=1)
    if query_norm == 0.0 or np.any(pool_norms == 0.0):
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    sims = matrix @ query / (pool_norms * query_norm)
    order = np.argsort(-sims, kind="stable")  # descending, index order on ties
    picked = []
    for idx in order:
        if sims[idx] < cfg.similarity_cap:
            picked.append(pool[int(idx)])
            if len(picked) == cfg.k:
                break
    return picked


class EmbeddingProvider(Protocol):
    def embed(self, text: str) -> np.ndarray: ...

    @property
    def dimension(self) -> int: ...


class HashEmbeddingProvider:
    """Deterministic test embedder: vectors seeded from a text digest."""

    def __init__(self, dimension: int = 32):
        self._dimension = dimension

    @property
    def dimension(self) -> int:
        return self._dimension

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmbeddingUnavailable("cannot embed empty text")
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
        rng = np.random.default_rng(seed)
        return rng.standard_normal(self._dimension)


class RemoteEmbeddingProvider:
    """Adapter around an embeddings-style HTTP endpoint."""

    def __init__(self, endpoint: str, model: str, api_key: Optional[str] = None,
                 timeout: float = 120.0, dimension: int = 0):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self._dimension = dimension
        self._session = requests.Session()

    @property
    def dimension(self) -> int:
        return self._dimension

    def embed(self, text: str) -> np.ndarray:
        import requests

        if not text or not text.strip():
            raise EmbeddingUnavailable("cannot embed empty text")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._session.post(
                self.endpoint + "/embeddings",
                json={"model": self.model, "input": text},
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            vector = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        except (requests.RequestException, KeyError, ValueError, IndexError) as exc:
            raise EmbeddingUnavailable(f"embedding endpoint failed: {exc}")
        if self._dimension == 0:
            self._dimension = vector.shape[0]
        return vector


def load_pool(
    path: Union[str, Path],
    provider: Optional[EmbeddingProvider] = None,
    rewrite: bool = True,
) -> list[Exemplar]:
    """Load a JSONL exemplar pool.

    Entries without an embedding are embedded via ``provider`` and, when
    ``rewrite`` is set, the file is rewritten with the vectors filled in.
    """
    path = Path(path)
    pool: list[Exemplar] = []
    missing = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                exemplar = Exemplar.from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad exemplar record: {exc}")
            if exemplar.embedding is None:
                missing += 1
            pool.append(exemplar)
    if missing:
        if provider is None:
            raise EmbeddingUnavailable(
                f"{missing} exemplars in {path} lack embeddings and no provider was given"
            )
        for exemplar in pool:
            if exemplar.embedding is None:
                exemplar.embedding = provider.embed(exemplar.question)
        if rewrite:
            save_pool(path, pool)
    dims = {e.embedding.shape[0] for e in pool}
    if len(dims) > 1:
        raise DimMismatch(f"pool mixes embedding dimensions: {sorted(dims)}")
    return pool


def save_pool(path: Union[str, Path], pool: Sequence[Exemplar]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for exemplar in pool:
            fh.write(json.dumps(exemplar.to_record(), ensure_ascii=False) + "\n")
    tmp.replace(path)


class BackendEmbeddingProvider:
    """Embeds through a Backend's embed purpose; used with record/replay.

    The backend is expected to return one whitespace-separated vector per
    request, which keeps embedding calls replayable with the same store
    machinery as generation calls.
    """

    def __init__(self, backend: Backend, dimension: int = 32):
        self.backend = backend
        self._dimension = dimension

    @property
    def dimension(self) -> int:
        return self._dimension

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmbeddingUnavailable("cannot embed empty text")
        req = BackendRequest(
            prompt=text,
            gen=GenerationConfig(mode="greedy", max_new_tokens=1),
            purpose="embed",
        )
        try:
            response = self.backend.complete(req)
        except BackendError as exc:
            raise EmbeddingUnavailable(str(exc))
        try:
            return np.asarray([float(x) for x in response.texts[0].split()], dtype=np.float64)
        except ValueError as exc:
            raise EmbeddingUnavailable(f"backend returned a non-numeric embedding: {exc}")
