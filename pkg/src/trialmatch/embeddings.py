"""Embedding providers and a dense similarity index over trials."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import TrialRecord


class EmbeddingError(ValueError):
    """Missing vectors, dimension mismatches, or non-finite values."""


class HashEmbeddingProvider:
    """Deterministic pseudo-embedder seeded from a content hash.

    Stands in for a real encoder in tests and mock pipelines: the vector
    for a given text is identical across processes and platforms.
    """

    def __init__(self, dim: int = 64) -> None:
        if dim < 1:
            raise EmbeddingError(f"embedding dim must be >= 1, got {dim}")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "big")
        vector = np.random.default_rng(seed).standard_normal(self.dim)
        return vector / np.linalg.norm(vector)


def load_embedding_file(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    """Read a JSONL vector file of {"id", "vector"} rows.

    An optional first line {"dim": h} pins the dimensionality; otherwise the
    first row sets it. Mismatched or non-finite vectors raise EmbeddingError.
    """
    path = Path(path)
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EmbeddingError(f"{where}: invalid JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise EmbeddingError(f"{where}: expected a JSON object")
            if "dim" in raw and "vector" not in raw:
                if dim is not None:
                    raise EmbeddingError(f"{where}: duplicate dim header")
                dim = int(raw["dim"])
                continue
            key = str(raw.get("id") or "").strip()
            if not key:
                raise EmbeddingError(f"{where}: missing id")
            if key in vectors:
                raise EmbeddingError(f"{where}: duplicate id {key!r}")
            vector = np.asarray(raw.get("vector"), dtype=np.float64)
            if vector.ndim != 1 or vector.size == 0:
                raise EmbeddingError(f"{where}: vector must be a non-empty flat list")
            if not np.all(np.isfinite(vector)):
                raise EmbeddingError(f"{where}: vector has non-finite values")
            if dim is None:
                dim = int(vector.size)
            elif vector.size != dim:
                raise EmbeddingError(
                    f"{where}: vector has {vector.size} dims, expected {dim}"
                )
            vectors[key] = vector
    if dim is None:
        raise EmbeddingError(f"{path.name}: no vectors found")
    return vectors, dim


class FileEmbeddingProvider:
    """Looks up precomputed vectors by exact text; misses are errors."""

    def __init__(self, path: str | Path) -> None:
        self._vectors, self.dim = load_embedding_file(path)
        self._source = str(path)

    def embed(self, text: str) -> np.ndarray:
        try:
            return self._vectors[text]
        except KeyError:
            raise EmbeddingError(
                f"no precomputed vector for {text!r} in {self._source}"
            ) from None


SIMILARITIES = ("dot", "cosine")


class DenseIndex:
    """Trial vectors ranked against query vectors by inner product.

    With ``similarity="cosine"`` both sides are length-normalized first.
    """

    def __init__(
        self,
        ids: Sequence[str],
        matrix: np.ndarray,
        provider,
        similarity: str = "dot",
        provider_hint: str = "hash",
    ) -> None:
        if similarity not in SIMILARITIES:
            raise EmbeddingError(f"unknown similarity {similarity!r}")
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise EmbeddingError("matrix shape does not match the id list")
        order = np.argsort(np.asarray(ids, dtype=object))
        self.ids: tuple[str, ...] = tuple(str(ids[i]) for i in order)
        self.matrix = matrix[order]
        self.provider = provider
        self.similarity = similarity
        self.provider_hint = provider_hint

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @classmethod
    def build(
        cls,
        corpus: Sequence[TrialRecord],
        provider,
        similarity: str = "dot",
        provider_hint: str = "hash",
    ) -> "DenseIndex":
        if not corpus:
            raise EmbeddingError("cannot index an empty trial corpus")
        ids = [trial.nct_id for trial in corpus]
        matrix = np.vstack([provider.embed(trial.search_text()) for trial in corpus])
        return cls(ids, matrix, provider, similarity, provider_hint)

    @classmethod
    def from_vectors(
        cls,
        vectors: Mapping[str, np.ndarray],
        provider,
        similarity: str = "dot",
        provider_hint: str = "hash",
    ) -> "DenseIndex":
        if not vectors:
            raise EmbeddingError("no trial vectors supplied")
        ids = sorted(vectors)
        matrix = np.vstack([vectors[i] for i in ids])
        return cls(ids, matrix, provider, similarity, provider_hint)

    def query_vector(self, text: str) -> np.ndarray:
        vector = np.asarray(self.provider.embed(text), dtype=np.float64)
        if vector.shape != (self.dim,):
            raise EmbeddingError(
                f"query vector has shape {vector.shape}, index dim is {self.dim}"
            )
        return vector

    def similarities(self, query: np.ndarray) -> np.ndarray:
        if query.shape != (self.dim,):
            raise EmbeddingError(
                f"query vector has shape {query.shape}, index dim is {self.dim}"
            )
        if self.similarity == "cosine":
            norms = np.linalg.norm(self.matrix, axis=1)
            norms[norms == 0.0] = 1.0
            qnorm = np.linalg.norm(query) or 1.0
            return (self.matrix @ query) / (norms * qnorm)
        return self.matrix @ query

    def save(self, path: str | Path) -> None:
        payload = {
            "format_version": 1,
            "similarity": self.similarity,
            "provider": self.provider_hint,
            "dim": self.dim,
            "vectors": {
                doc_id: [float(x) for x in row]
                for doc_id, row in zip(self.ids, self.matrix)
            },
        }
        Path(path).write_text(
            json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path, provider=None) -> "DenseIndex":
        """Restore an index; with provider=None a hash-built index rebuilds
        its own query embedder and an externally-built one refuses queries
        until a provider is supplied."""
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format_version") != 1:
            raise EmbeddingError(
                f"unsupported dense index version {payload.get('format_version')!r}"
            )
        hint = str(payload.get("provider", "hash"))
        if provider is None:
            if hint != "hash":
                raise EmbeddingError(
                    "index was built from external vectors; supply a provider "
                    "for query embeddings"
                )
            provider = HashEmbeddingProvider(int(payload["dim"]))
        vectors = {
            doc_id: np.asarray(row, dtype=np.float64)
            for doc_id, row in payload["vectors"].items()
        }
        return cls.from_vectors(vectors, provider, payload["similarity"], hint)
