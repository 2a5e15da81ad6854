"""Semantic grounding assessment.

Each surviving extraction is scored by the maximum cosine similarity between
its embedding and embeddings of equal-length sliding windows over the source
note; extractions scoring below a threshold are flagged as poorly grounded.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import requests

from .corpus import SubstanceCategory
from .errors import EmptyNoteError, ConfigError, TransportError


class EmbeddingProvider(Protocol):
    """Provider contract: unit-L2 vectors of a fixed dimension, deterministic
    for identical input."""

    def embed(self, batch: list[str]) -> np.ndarray: ...


@dataclass
class GroundingResult:
    note_id: str
    category: SubstanceCategory | None
    score: float
    best_window: tuple[int, int]
    threshold_used: float | None = None


def window_spans(note_len: int, window_len: int, stride: int) -> list[tuple[int, int]]:
    """Spans [i, i+window_len) for i = 0, stride, 2*stride, ...

    while the window fits; a note shorter than the window yields the single
    span [0, note_len).
    """
    if note_len == 0:
        raise EmptyNoteError("cannot window an empty note")
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be >= 1")
    if note_len < window_len:
        return [(0, note_len)]
    return [(i, i + window_len) for i in range(0, note_len - window_len + 1, stride)]


def grounding_score(
    extraction: str,
    note: str,
    provider: EmbeddingProvider,
    stride: int = 1,
    batch_size: int = 256,
    note_id: str = "",
    category: SubstanceCategory | None = None,
) -> GroundingResult:
    """Max cosine similarity between the extraction and any sliding window.

    The window length matches the extraction's character length. Identical
    window strings are embedded once (stride-1 windows massively overlap in
    templated notes; the cache is bit-identical to embedding every window).
    Ties resolve to the first window.
    """
    if not extraction:
        raise ValueError("extraction must be non-empty")
    if not note:
        raise EmptyNoteError("cannot ground against an empty note")
    spans = window_spans(len(note), len(extraction), stride)
    texts = [note[start:end] for start, end in spans]
    unique_texts = list(dict.fromkeys(texts))

    vectors: dict[str, np.ndarray] = {}
    query = provider.embed([extraction])[0]
    for start in range(0, len(unique_texts), batch_size):
        chunk = unique_texts[start : start + batch_size]
        embedded = provider.embed(chunk)
        for text, vector in zip(chunk, embedded):
            vectors[text] = vector

    best_score = -np.inf
    best_span = spans[0]
    for span, text in zip(spans, texts):
        score = float(np.dot(query, vectors[text]))
        if score > best_score:
            best_score = score
            best_span = span
    return GroundingResult(
        note_id=note_id, category=category, score=best_score, best_window=best_span
    )


def flag_by_threshold(
    results: list[GroundingResult], threshold: float
) -> tuple[list[GroundingResult], list[GroundingResult]]:
    """Partition into (flagged, retained): flagged iff score < threshold."""
    if not -1.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [-1, 1]")
    flagged, retained = [], []
    for result in results:
        result.threshold_used = threshold
        (flagged if result.score < threshold else retained).append(result)
    return flagged, retained


class HashingEmbeddingProvider:
    """Offline deterministic provider: seeded character-n-gram hashing.

    Character 1/2/3-grams are hashed (keyed BLAKE2, stable across runs and
    platforms) into a d-dimensional signed-count vector, then L2-normalized.
    Identical strings always produce identical vectors, so exact-substring
    windows score 1.0 without any model download.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self._key = seed.to_bytes(8, "little", signed=True)

    def _vector(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dim, dtype=np.float64)
        encoded = text.encode("utf-8")
        # 2/3/4-grams; bare unigrams only for strings too short to have any,
        # so common-letter mass does not swamp the signal.
        sizes = (2, 3, 4) if len(encoded) >= 2 else (1,)
        for n in sizes:
            for i in range(len(encoded) - n + 1):
                digest = hashlib.blake2b(
                    encoded[i : i + n], key=self._key, digest_size=8, person=b"ngram-%d" % n
                ).digest()
                value = int.from_bytes(digest, "little")
                index = value % self.dim
                sign = 1.0 if (value >> 63) & 1 else -1.0
                vector[index] += sign
        norm = np.linalg.norm(vector)
        if norm == 0.0:
            # Degenerate cancellation; pin a deterministic unit vector.
            vector[0] = 1.0
            norm = 1.0
        return vector / norm

    def embed(self, batch: list[str]) -> np.ndarray:
        if any(not text for text in batch):
            raise ValueError("cannot embed empty strings")
        return np.stack([self._vector(text) for text in batch])


class HttpEmbeddingProvider:
    """Client for an embeddings endpoint: request {input, model}, response
    data[i].embedding. Retries transient failures with exponential backoff;
    4xx responses are configuration errors and are not retried.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.25,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self.session = session or requests.Session()

    def embed(self, batch: list[str]) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"input": batch, "model": self.model}
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                response = self.session.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
            else:
                if response.status_code < 400:
                    data = response.json()["data"]
                    vectors = np.array(
                        [item["embedding"] for item in data], dtype=np.float64
                    )
                    norms = np.linalg.norm(vectors, axis=1)
                    if np.any(np.abs(norms - 1.0) > 1e-6):
                        vectors = vectors / norms[:, None]
                    return vectors
                if response.status_code < 500:
                    raise ConfigError(
                        f"embeddings endpoint rejected request: HTTP {response.status_code}"
                    )
                last_error = TransportError(
                    f"HTTP {response.status_code}", retries=attempt
                )
            if attempt < self.max_retries:
                time.sleep(self.backoff_base * (2**attempt))
        raise TransportError(
            f"embeddings request failed after {self.max_retries} retries: {last_error}",
            retries=self.max_retries,
        )
