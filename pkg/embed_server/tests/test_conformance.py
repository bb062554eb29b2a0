"""Protocol conformance: the ranking harness's dense client consumes this shim
with zero code changes, over a real socket."""

import socket
import threading
import time

import numpy as np
import pytest
import uvicorn

from embed_server.models import ModelSpec
from embed_server.server import create_app

coldrank_dense = pytest.importorskip(
    "coldrank.dense", reason="conformance check needs the ranking harness installed"
)


@pytest.fixture(scope="module")
def server_url():
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    app = create_app(ModelSpec(model_id="hash:24"))
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("server did not start")
        time.sleep(0.02)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


def test_primary_client_consumes_shim_unmodified(server_url):
    profile = coldrank_dense.EmbeddingProfile(
        model_name="hash:24",
        dimension=24,
        query_prefix="query: ",
        passage_prefix="passage: ",
        endpoint=server_url,
    )
    store = coldrank_dense.EmbeddingStore()
    vectors = coldrank_dense.embed_texts(
        profile, ["economics jobs", "office manager roles"], "query", store
    )
    assert len(vectors) == 2
    assert all(len(v) == 24 for v in vectors)


def test_identical_text_twice_identical_vectors(server_url):
    provider = coldrank_dense.HttpEmbeddingProvider(server_url, "hash:24")
    first = provider.embed(["same text"])
    second = provider.embed(["same text"])
    assert first == second


def test_batch_index_order_preserved(server_url):
    provider = coldrank_dense.HttpEmbeddingProvider(server_url, "hash:24")
    texts = [f"text number {i}" for i in range(9)]
    together = provider.embed(texts)
    one_by_one = [provider.embed([t])[0] for t in texts]
    assert together == one_by_one


def test_prefix_distinguishes_roles_through_the_wire(server_url):
    # the harness applies prefixes; the shim must embed exactly what it gets
    profile = coldrank_dense.EmbeddingProfile(
        model_name="hash:24",
        dimension=24,
        query_prefix="query: ",
        passage_prefix="passage: ",
        endpoint=server_url,
    )
    store = coldrank_dense.EmbeddingStore()
    as_query = coldrank_dense.embed_texts(profile, ["shared text"], "query", store)[0]
    as_passage = coldrank_dense.embed_texts(profile, ["shared text"], "passage", store)[0]
    assert not np.array_equal(as_query, as_passage)
