"""Embedding acquisition, caching, and cosine-based dense ranking.

Texts are embedded through a provider behind the OpenAI-compatible wire
shape (POST {endpoint}/v1/embeddings, batches of at most 64, exponential
backoff on 429/5xx). Role prefixes ("query: ", "passage: ", instruction
prefixes) live in the EmbeddingProfile and are applied exactly once, before
hashing; the cache key is SHA-256 of the prefixed text, so a cache hit never
touches the provider.

Vectors persist in an append-only store: raw little-endian float32 in a
.f32 file plus a JSONL sidecar mapping (model, content hash) -> offset/dim.

Scoring follows the averaged-cosine rule: a broad-CS user with m evidence
items scores a candidate by the mean of the m cosines, not by the cosine of
a mean vector (these differ for unnormalized embeddings).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .benchgen import HistoryEvidence, Task
from .evaluation import Ranking
from .sparse import tokenize

log = logging.getLogger(__name__)

MAX_BATCH = 64


class EmbeddingError(Exception):
    pass


@dataclass(frozen=True)
class EmbeddingProfile:
    model_name: str
    dimension: int
    query_prefix: str = ""
    passage_prefix: str = ""
    endpoint: str = ""  # "http(s)://...", "builtin:hash", or "" for store-only
    api_key_env: str = ""
    parallel: int = 8   # in-flight request batches for HTTP providers

    def prefix_for(self, role: str) -> str:
        if role == "query":
            return self.query_prefix
        if role == "passage":
            return self.passage_prefix
        raise ValueError(f"role must be 'query' or 'passage', got {role!r}")


def text_hash(prefixed_text: str) -> str:
    return hashlib.sha256(prefixed_text.encode("utf-8")).hexdigest()


class EmbeddingStore:
    """Append-only (model, text hash) -> vector store.

    When backed by files, vectors go to ``<stem>.f32`` and the index to
    ``<stem>.index.jsonl``; with path=None the store is memory-only.
    One writer, many readers: writes are serialized by a lock.
    """

    def __init__(self, path: str | Path | None = None):
        self._vectors: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()
        self._data_path: Path | None = None
        self._index_path: Path | None = None
        if path is not None:
            stem = Path(path)
            stem.parent.mkdir(parents=True, exist_ok=True)
            # append (model names may contain dots)
            self._data_path = stem.with_name(stem.name + ".f32")
            self._index_path = stem.with_name(stem.name + ".index.jsonl")
            self._load()

    def _load(self) -> None:
        if not (self._index_path and self._index_path.exists() and self._data_path.exists()):
            return
        raw = np.fromfile(self._data_path, dtype="<f4")
        with open(self._index_path, encoding="utf-8") as fh:
            for line in fh:
                entry = json.loads(line)
                start = entry["offset"]
                dim = entry["dim"]
                vec = raw[start : start + dim].astype(np.float64)
                self._vectors[(entry["model"], entry["hash"])] = vec

    def __len__(self) -> int:
        return len(self._vectors)

    def get(self, model: str, key: str) -> np.ndarray | None:
        return self._vectors.get((model, key))

    def put(self, model: str, key: str, vector: np.ndarray) -> None:
        with self._lock:
            if (model, key) in self._vectors:
                return
            vec32 = np.asarray(vector, dtype="<f4")
            self._vectors[(model, key)] = vec32.astype(np.float64)
            if self._data_path is not None:
                offset = self._data_path.stat().st_size // 4 if self._data_path.exists() else 0
                with open(self._data_path, "ab") as fh:
                    fh.write(vec32.tobytes())
                with open(self._index_path, "a", encoding="utf-8") as fh:
                    fh.write(
                        json.dumps(
                            {"hash": key, "model": model, "offset": offset, "dim": len(vec32)},
                            sort_keys=True,
                        )
                        + "\n"
                    )


# ---------------------------------------------------------------------------
# providers

class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


class HttpEmbeddingProvider:
    """OpenAI-compatible /v1/embeddings client with batching and retries."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "",
        max_attempts: int = 5,
        parallel: int = 8,
        timeout: float = 60.0,
        session=None,
    ):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.max_attempts = max_attempts
        self.parallel = parallel
        self.timeout = timeout
        self.session = session or requests.Session()
        self.headers = {"Content-Type": "application/json"}
        key = os.environ.get(api_key_env, "") if api_key_env else ""
        if key:
            self.headers["Authorization"] = f"Bearer {key}"

    def _post_batch(self, batch: list[str]) -> list[list[float]]:
        url = f"{self.endpoint}/v1/embeddings"
        delay = 1.0
        for attempt in range(1, self.max_attempts + 1):
            resp = self.session.post(
                url,
                json={"model": self.model, "input": list(batch)},
                headers=self.headers,
                timeout=self.timeout,
            )
            if resp.status_code == 429 or resp.status_code >= 500:
                if attempt == self.max_attempts:
                    raise EmbeddingError(f"{url} failed with {resp.status_code} after {attempt} attempts")
                time.sleep(delay)
                delay *= 2
                continue
            if resp.status_code != 200:
                raise EmbeddingError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
            data = resp.json()["data"]
            ordered = sorted(data, key=lambda entry: entry["index"])
            return [entry["embedding"] for entry in ordered]
        raise EmbeddingError("unreachable")

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        batches = [list(texts[i : i + MAX_BATCH]) for i in range(0, len(texts), MAX_BATCH)]
        if len(batches) <= 1:
            return self._post_batch(batches[0]) if batches else []
        with ThreadPoolExecutor(max_workers=self.parallel) as pool:
            results = list(pool.map(self._post_batch, batches))
        return [vec for batch in results for vec in batch]


class HashedBowProvider:
    """Deterministic offline embedder: tokens feature-hashed into ``dim`` buckets.

    Shares the sparse module's tokenizer; bucket = SHA-256(token) mod dim.
    Useful as a mock provider and as a cheap lexical-overlap embedding.
    """

    def __init__(self, dim: int = 512):
        self.dim = dim

    def _bucket(self, token: str) -> int:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") % self.dim

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            vec = np.zeros(self.dim)
            for token in tokenize(text):
                vec[self._bucket(token)] += 1.0
            out.append(vec.tolist())
        return out


class StoreOnlyProvider:
    """Refuses to embed: every text must already be cached (offline mode)."""

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        raise EmbeddingError(f"no provider configured and {len(texts)} texts missing from the store")


class CountingProvider:
    """Wraps a provider and counts calls/texts (used to assert cache behavior)."""

    def __init__(self, inner: EmbeddingProvider):
        self.inner = inner
        self.calls = 0
        self.texts_embedded = 0

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        self.calls += 1
        self.texts_embedded += len(texts)
        return self.inner.embed(texts)


def provider_for(profile: EmbeddingProfile) -> EmbeddingProvider:
    endpoint = profile.endpoint
    if endpoint.startswith(("http://", "https://")):
        return HttpEmbeddingProvider(
            endpoint, profile.model_name, profile.api_key_env, parallel=profile.parallel
        )
    if endpoint == "builtin:hash":
        return HashedBowProvider(profile.dimension)
    if endpoint == "":
        return StoreOnlyProvider()
    raise EmbeddingError(f"unrecognized embedding endpoint {endpoint!r}")


# ---------------------------------------------------------------------------
# operations

def embed_texts(
    profile: EmbeddingProfile,
    texts: Sequence[str],
    role: str,
    store: EmbeddingStore,
    provider: EmbeddingProvider | None = None,
) -> list[np.ndarray]:
    """Embed texts in order, applying the role prefix once and caching results."""
    prefix = profile.prefix_for(role)
    prefixed = [prefix + t for t in texts]
    hashes = [text_hash(t) for t in prefixed]
    missing_idx = [i for i, h in enumerate(hashes) if store.get(profile.model_name, h) is None]
    if missing_idx:
        if provider is None:
            provider = provider_for(profile)
        unique: dict[str, int] = {}
        to_embed: list[str] = []
        for i in missing_idx:
            if hashes[i] not in unique:
                unique[hashes[i]] = len(to_embed)
                to_embed.append(prefixed[i])
        vectors = provider.embed(to_embed)
        for h, vec in zip(unique, vectors):
            arr = np.asarray(vec, dtype=float)
            if arr.ndim != 1 or len(arr) != profile.dimension:
                raise EmbeddingError(
                    f"provider returned dimension {arr.shape} for profile "
                    f"{profile.model_name!r} (expected {profile.dimension})"
                )
            store.put(profile.model_name, h, arr)
    return [store.get(profile.model_name, h) for h in hashes]


def cosine(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine undefined for zero-norm vectors")
    return float(np.dot(x, y) / (nx * ny))


def dense_user_score(user_vectors: Sequence[np.ndarray], item_vector: np.ndarray) -> float:
    """Mean cosine between each user vector and the item vector."""
    if len(user_vectors) == 0:
        raise ValueError("dense_user_score requires at least one user vector")
    return float(np.mean([cosine(v, item_vector) for v in user_vectors]))


def rank_dense(
    task: Task,
    profile: EmbeddingProfile,
    store: EmbeddingStore,
    item_texts: dict[str, str],
    provider: EmbeddingProvider | None = None,
    method: str = "dense",
) -> Ranking:
    """Rank candidates by averaged cosine to the user's evidence embeddings."""
    if isinstance(task.evidence, HistoryEvidence):
        user_texts = list(task.evidence.texts)
    else:
        user_texts = [task.evidence.text]
    user_vecs = embed_texts(profile, user_texts, "query", store, provider)
    cand_texts = [item_texts[i] for i in task.candidate_ids]
    cand_vecs = embed_texts(profile, cand_texts, "passage", store, provider)
    scores = {
        item_id: dense_user_score(user_vecs, vec)
        for item_id, vec in zip(task.candidate_ids, cand_vecs)
    }
    ordered = sorted(task.candidate_ids, key=lambda i: (-scores[i], i))
    return Ranking(user_id=task.user_id, item_ids=tuple(ordered), method=method, seed=task.seed)
