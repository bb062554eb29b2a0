"""FastAPI app exposing /v1/embeddings and /healthz for one loaded model."""

from __future__ import annotations

import logging
import threading

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .models import ModelSpec, load_model, sanity_check

log = logging.getLogger(__name__)


class EmbeddingsRequest(BaseModel):
    model: str = ""
    input: list[str] | str


def create_app(spec: ModelSpec) -> FastAPI:
    model = load_model(spec)
    sanity_check(model)
    app = FastAPI(title="embed-server", version="0.1.0")
    inference_lock = threading.Lock()  # single-model serialized inference

    def embed_batch(texts: list[str]) -> np.ndarray:
        vectors = model.encode(texts)
        if spec.normalize:
            norms = np.linalg.norm(vectors, axis=1, keepdims=True)
            vectors = vectors / np.where(norms == 0.0, 1.0, norms)
        return vectors

    @app.get("/healthz")
    def healthz():
        return {"model": model.name, "dimension": model.dimension}

    @app.post("/v1/embeddings")
    def embeddings(request: EmbeddingsRequest):
        texts = [request.input] if isinstance(request.input, str) else list(request.input)
        if not texts:
            raise HTTPException(status_code=400, detail="input must be non-empty")
        data = []
        with inference_lock:
            for start in range(0, len(texts), spec.max_batch):
                chunk = texts[start : start + spec.max_batch]
                for offset, vector in enumerate(embed_batch(chunk)):
                    data.append(
                        {
                            "object": "embedding",
                            "index": start + offset,
                            "embedding": [float(x) for x in vector],
                        }
                    )
        return {"object": "list", "model": model.name, "data": data}

    return app
