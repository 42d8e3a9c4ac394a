"""Okapi-style lexical index over concatenated trial text."""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import TrialRecord

INDEX_FORMAT_VERSION = 1

_TOKEN = re.compile(r"[a-z0-9]+")


class LexicalIndexError(ValueError):
    """Empty corpus or a serialized index that cannot be restored."""


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric tokenization; no stemming, no stopwords."""
    return _TOKEN.findall(text.lower())


class LexicalIndex:
    """Inverted index with Robertson tf saturation and length normalization.

    Term weight uses the non-negative idf variant
    ``ln(1 + (N - df + 0.5) / (df + 0.5))`` so terms present in every
    document still contribute, combined with
    ``tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))``.
    """

    def __init__(self, k1: float = 1.5, b: float = 0.75) -> None:
        self.k1 = float(k1)
        self.b = float(b)
        self._doc_len: dict[str, int] = {}
        self._postings: dict[str, dict[str, int]] = {}

    @property
    def doc_count(self) -> int:
        return len(self._doc_len)

    @property
    def vocabulary_size(self) -> int:
        return len(self._postings)

    @property
    def avgdl(self) -> float:
        if not self._doc_len:
            return 0.0
        return sum(self._doc_len.values()) / len(self._doc_len)

    def doc_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._doc_len))

    def add_document(self, doc_id: str, text: str) -> None:
        if doc_id in self._doc_len:
            raise LexicalIndexError(f"duplicate document id {doc_id}")
        tokens = tokenize(text)
        self._doc_len[doc_id] = len(tokens)
        for token, count in Counter(tokens).items():
            self._postings.setdefault(token, {})[doc_id] = count

    def idf(self, token: str) -> float:
        df = len(self._postings.get(token, ()))
        n = self.doc_count
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def score_keyword(self, keyword: str) -> dict[str, float]:
        """Summed per-token scores for every document matching the keyword."""
        scores: dict[str, float] = {}
        avgdl = self.avgdl
        for token in tokenize(keyword):
            postings = self._postings.get(token)
            if not postings:
                continue
            idf = self.idf(token)
            for doc_id, tf in postings.items():
                dl = self._doc_len[doc_id]
                norm = 1.0 - self.b + self.b * (dl / avgdl) if avgdl > 0 else 1.0
                scores[doc_id] = scores.get(doc_id, 0.0) + (
                    idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
                )
        return scores

    def to_payload(self) -> dict:
        return {
            "format_version": INDEX_FORMAT_VERSION,
            "k1": self.k1,
            "b": self.b,
            "doc_len": dict(sorted(self._doc_len.items())),
            "postings": {
                token: dict(sorted(postings.items()))
                for token, postings in sorted(self._postings.items())
            },
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "LexicalIndex":
        version = payload.get("format_version")
        if version != INDEX_FORMAT_VERSION:
            raise LexicalIndexError(f"unsupported index format version {version!r}")
        index = cls(k1=payload["k1"], b=payload["b"])
        index._doc_len = {str(k): int(v) for k, v in payload["doc_len"].items()}
        index._postings = {
            str(token): {str(doc): int(tf) for doc, tf in postings.items()}
            for token, postings in payload["postings"].items()
        }
        return index

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_payload(), sort_keys=True, separators=(",", ":"))
            + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "LexicalIndex":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise LexicalIndexError(f"{path}: invalid index file ({exc.msg})") from exc
        return cls.from_payload(payload)


def build_lexical_index(
    corpus: Sequence[TrialRecord], k1: float = 1.5, b: float = 0.75
) -> LexicalIndex:
    """Index every trial's concatenated searchable text."""
    if not corpus:
        raise LexicalIndexError("cannot index an empty trial corpus")
    index = LexicalIndex(k1=k1, b=b)
    for trial in corpus:
        index.add_document(trial.nct_id, trial.search_text())
    return index
