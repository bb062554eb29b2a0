"""BM25 ranking over candidate items from user text.

Tokenization is lowercase runs of alphanumeric characters (no stemming, no
stopwords). The idf uses the always-positive ln(1 + (N - df + 0.5)/(df + 0.5))
variant so scores stay >= 0 on small corpora. Query terms contribute once
regardless of multiplicity (set semantics): concatenated broad-CS histories
would otherwise overweight repeated boilerplate. Index statistics come from
the full domain item corpus, not just a task's candidates.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping

from .benchgen import HistoryEvidence, Task
from .evaluation import Ranking

_SPLIT = re.compile(r"[\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return [t for t in _SPLIT.split(text.lower()) if t]


@dataclass
class Bm25Index:
    doc_term_counts: dict[str, Counter]
    doc_lengths: dict[str, int]
    doc_freq: Counter
    n_docs: int
    avg_doc_len: float
    k1: float
    b: float


def build_bm25_index(doc_texts: Mapping[str, str], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    if not doc_texts:
        raise ValueError("cannot build a BM25 index over an empty corpus")
    term_counts: dict[str, Counter] = {}
    lengths: dict[str, int] = {}
    doc_freq: Counter = Counter()
    for doc_id, text in doc_texts.items():
        tokens = tokenize(text)
        term_counts[doc_id] = Counter(tokens)
        lengths[doc_id] = len(tokens)
        doc_freq.update(set(tokens))
    n_docs = len(doc_texts)
    avg_len = sum(lengths.values()) / n_docs
    return Bm25Index(term_counts, lengths, doc_freq, n_docs, avg_len, k1, b)


def bm25_idf(index: Bm25Index, term: str) -> float:
    df = index.doc_freq.get(term, 0)
    return math.log(1.0 + (index.n_docs - df + 0.5) / (df + 0.5))


def bm25_score(index: Bm25Index, query_text: str, doc_id: str) -> float:
    if doc_id not in index.doc_term_counts:
        raise KeyError(f"doc_id {doc_id!r} not indexed")
    counts = index.doc_term_counts[doc_id]
    dl = index.doc_lengths[doc_id]
    norm = index.k1 * (1.0 - index.b + index.b * dl / index.avg_doc_len)
    score = 0.0
    for term in set(tokenize(query_text)):
        tf = counts.get(term, 0)
        if tf == 0:
            continue
        score += bm25_idf(index, term) * tf * (index.k1 + 1.0) / (tf + norm)
    return score


def user_query_text(task: Task) -> str:
    """Profile text (narrow) or space-joined evidence item texts (broad)."""
    if isinstance(task.evidence, HistoryEvidence):
        return " ".join(task.evidence.texts)
    return task.evidence.text


def rank_bm25(index: Bm25Index, task: Task) -> Ranking:
    query = user_query_text(task)
    scored = sorted(
        task.candidate_ids,
        key=lambda item_id: (-bm25_score(index, query, item_id), item_id),
    )
    return Ranking(user_id=task.user_id, item_ids=tuple(scored), method="bm25", seed=task.seed)
