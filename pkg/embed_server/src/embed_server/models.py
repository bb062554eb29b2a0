"""Model loading: sentence-transformers hub models or the built-in hash model."""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

_TOKEN = re.compile(r"[\W_]+", re.UNICODE)


class ModelLoadError(Exception):
    pass


@dataclass(frozen=True)
class ModelSpec:
    model_id: str          # hub name, local path, or "hash:<dim>"
    device: str = "cpu"
    max_batch: int = 64
    normalize: bool = False


class HashingModel:
    """Deterministic bag-of-words feature hashing; no weights, no tokenizer limit.

    Exists so the server (and anything speaking its protocol) can run without
    model downloads; cosine similarity reflects lexical overlap.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ModelLoadError(f"hash model dimension must be >= 1, got {dim}")
        self.name = f"hash:{dim}"
        self.dimension = dim

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float32)
        for row, text in enumerate(texts):
            for token in _TOKEN.split(text.lower()):
                if not token:
                    continue
                digest = hashlib.sha256(token.encode("utf-8")).digest()
                out[row, int.from_bytes(digest[:8], "big") % self.dimension] += 1.0
        return out


class SentenceTransformerModel:
    """Wraps a sentence-transformers model in eval mode (deterministic)."""

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise ModelLoadError(
                "sentence-transformers is not installed; install embed-server[models] "
                "or use the built-in 'hash:<dim>' model"
            ) from exc
        try:
            self._model = SentenceTransformer(model_id, device=device)
        except Exception as exc:
            raise ModelLoadError(f"failed to load model {model_id!r}: {exc}") from exc
        self.name = model_id
        self.dimension = int(self._model.get_sentence_embedding_dimension())
        self._max_tokens = getattr(self._model, "max_seq_length", None)

    def encode(self, texts: list[str]) -> np.ndarray:
        if self._max_tokens:
            # crude char-per-token bound; the tokenizer truncates the rest
            limit = self._max_tokens * 8
            for text in texts:
                if len(text) > limit:
                    log.warning(
                        "input of %d chars likely exceeds the %d-token limit; truncating",
                        len(text), self._max_tokens,
                    )
        vectors = self._model.encode(
            texts, convert_to_numpy=True, normalize_embeddings=False, show_progress_bar=False
        )
        return np.asarray(vectors, dtype=np.float32)


def load_model(spec: ModelSpec):
    if spec.model_id.startswith("hash:"):
        try:
            dim = int(spec.model_id.split(":", 1)[1])
        except ValueError as exc:
            raise ModelLoadError(f"bad hash model id {spec.model_id!r}") from exc
        return HashingModel(dim)
    return SentenceTransformerModel(spec.model_id, spec.device)


SANITY_FIXTURE = (
    "a quick brown fox jumps over the lazy dog",   # paraphrase pair...
    "the quick brown fox leapt over a lazy dog",
    "quarterly monetary policy and interest rates",  # ...vs an unrelated text
)


def sanity_check(model) -> bool:
    """Paraphrase pair should out-score the unrelated text; logged at startup."""
    vecs = model.encode(list(SANITY_FIXTURE)).astype(np.float64)
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(norms == 0):
        log.warning("sanity check skipped: zero-norm embedding in fixture")
        return False
    unit = vecs / norms[:, None]
    para = float(unit[0] @ unit[1])
    unrelated = float(max(unit[0] @ unit[2], unit[1] @ unit[2]))
    ok = para > unrelated
    log.info(
        "sanity check: paraphrase cos=%.4f vs unrelated cos=%.4f -> %s",
        para, unrelated, "ok" if ok else "SUSPICIOUS",
    )
    return ok
