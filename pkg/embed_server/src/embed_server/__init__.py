"""A thin local inference shim for open-weight text-embedding models.

Exposes POST /v1/embeddings (OpenAI-compatible request/response shape) and
GET /healthz over any model loadable through sentence-transformers, plus a
built-in deterministic feature-hashing model ("hash:<dim>") for offline use
and protocol testing. The shim never applies role prefixes; prefixing
belongs to the consuming harness, keeping a single source of truth and
preventing double-prefixed embeddings.
"""

__version__ = "0.1.0"
