"""coldrank: a training-free cold-start recommendation evaluation harness.

Builds seeded cold-start benchmarks from interaction logs, ranks candidates
with sparse (BM25), dense (text-embedding), multi-vector (Max-Sum / entropic
EMD) and LLM-reranker methods, and compares methods with paired significance
tests. No model training happens anywhere in this package; embeddings and
chat completions are fetched from OpenAI-compatible endpoints (or supplied by
offline providers) and cached on disk.
"""

__version__ = "0.1.0"
