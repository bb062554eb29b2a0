"""Query-expansion representations and set-to-set similarities.

A user or item can be represented as Raw (one vector for the original text),
CQ (one vector for the newline-joined LLM-generated queries), or MQ (one
vector per generated query). Vector sets carry uniform weights. Two set
similarities are provided:

 * Max-Sum: sum over user-side vectors of the best cosine on the item side
   (late-interaction style). Asymmetric by construction.
 * EMD: 1 - w where w is the optimal-transport cost between the two uniform
   weighted sets under ground cost 1 - cosine. The ground metric is a
   documented choice (1 - cosine keeps the score on the cosine scale and
   collapses the singleton case to plain cosine).

The OT cost is solved in the log domain with epsilon scaling down to the
target regularization (default 1e-4; naive scaling underflows there), and
the final plan is rounded onto the marginal polytope, so reported plans
satisfy the uniform marginals to machine precision even when the last digits
of the dual iteration have not settled. Equal-size uniform problems small
enough for an exact assignment solve (n <= 8) take that route automatically.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy.optimize import linear_sum_assignment

from .benchgen import HistoryEvidence, Task
from .dense import EmbeddingProfile, EmbeddingProvider, EmbeddingStore, cosine, embed_texts, text_hash
from .evaluation import Ranking

if TYPE_CHECKING:
    from .llm import ChatClient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuerySet:
    source_text_hash: str
    queries: tuple[str, ...]
    model: str
    prompt_hash: str


@dataclass
class VectorSet:
    vectors: np.ndarray  # (K, dim), uniform weight 1/K each
    provenance: str      # "raw" | "cq" | "mq"

    def __len__(self) -> int:
        return len(self.vectors)


# ---------------------------------------------------------------------------
# query expansion

USER_EXPANSION_TEMPLATE = (
    "I am planning to make a recommender system, so please enrich the following user's information.\n"
    "# User profile\n"
    "{subject}\n"
    "# Task\n"
    "The items to recommend are in the {domain} domain. \n"
    "Please generate {K} distinct and comprehensive search queries."
)

# the item-side wording is not pinned anywhere; mirror the user template
ITEM_EXPANSION_TEMPLATE = (
    "I am planning to make a recommender system, so please enrich the following item's information.\n"
    "# Item description\n"
    "{subject}\n"
    "# Task\n"
    "The items to recommend are in the {domain} domain. \n"
    "Please generate {K} distinct and comprehensive search queries."
)

_QUOTED = re.compile(r'"((?:[^"\\]|\\.)+)"')


def expansion_prompt(subject_text: str, side: str, domain_name: str, k: int) -> str:
    template = USER_EXPANSION_TEMPLATE if side == "user" else ITEM_EXPANSION_TEMPLATE
    return template.format(subject=subject_text, domain=domain_name, K=k)


def parse_query_list(raw: str) -> list[str]:
    """Extract double-quoted query strings from a model response."""
    queries = [m.group(1).strip() for m in _QUOTED.finditer(raw)]
    return [q for q in queries if q]


class QueryCache:
    """queries.jsonl-backed cache keyed by (text hash, side, model, K)."""

    def __init__(self, path: str | Path | None = None):
        self._entries: dict[tuple[str, str, str, int], tuple[str, ...]] = {}
        self._path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        if self._path is not None and self._path.exists():
            with open(self._path, encoding="utf-8") as fh:
                for line in fh:
                    row = json.loads(line)
                    key = (row["text_hash"], row["side"], row["model"], row["K"])
                    self._entries[key] = tuple(row["queries"])

    def get(self, key: tuple[str, str, str, int]) -> tuple[str, ...] | None:
        return self._entries.get(key)

    def put(self, key: tuple[str, str, str, int], queries: tuple[str, ...]) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = queries
            if self._path is not None:
                self._path.parent.mkdir(parents=True, exist_ok=True)
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(
                        json.dumps(
                            {
                                "text_hash": key[0],
                                "side": key[1],
                                "model": key[2],
                                "K": key[3],
                                "queries": list(queries),
                            },
                            ensure_ascii=False,
                            sort_keys=True,
                        )
                        + "\n"
                    )


def expand_queries(
    client: "ChatClient",
    subject_text: str,
    side: str,
    domain_name: str,
    k: int,
    seed: int = 0,
    cache: QueryCache | None = None,
) -> QuerySet:
    """Generate K search queries for a user profile or item description.

    Short outputs are re-prompted once with an explicit count reminder, then
    padded by duplicating the last query (logged as a warning).
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    if side not in ("user", "item"):
        raise ValueError("side must be 'user' or 'item'")
    subj_hash = text_hash(subject_text)
    cache_key = (subj_hash, side, client.model, k)
    if cache is not None:
        hit = cache.get(cache_key)
        if hit is not None:
            prompt = expansion_prompt(subject_text, side, domain_name, k)
            return QuerySet(subj_hash, hit, client.model, text_hash(prompt))

    prompt = expansion_prompt(subject_text, side, domain_name, k)
    queries = parse_query_list(client.chat(prompt))
    if len(queries) < k:
        retry_prompt = prompt + f"\nPlease output exactly {k} distinct quoted queries."
        queries += [q for q in parse_query_list(client.chat(retry_prompt)) if q not in queries]
    if len(queries) < k:
        if not queries:
            queries = [subject_text]  # degenerate model: fall back to the raw text
        log.warning(
            "query expansion for %s %s yielded %d/%d queries; padding by duplication",
            side, subj_hash[:8], len(queries), k,
        )
        queries += [queries[-1]] * (k - len(queries))
    result = tuple(queries[:k])
    if cache is not None:
        cache.put(cache_key, result)
    return QuerySet(subj_hash, result, client.model, text_hash(prompt))


# ---------------------------------------------------------------------------
# representations

def build_representation(
    mode: str,
    raw_text: str,
    queries: QuerySet | None,
    profile: EmbeddingProfile,
    store: EmbeddingStore,
    role: str = "query",
    provider: EmbeddingProvider | None = None,
) -> VectorSet:
    """Raw -> one vector for raw_text; CQ -> one vector for the joined
    queries; MQ -> one vector per query."""
    mode = mode.lower()
    if mode == "raw":
        vecs = embed_texts(profile, [raw_text], role, store, provider)
    elif mode == "cq":
        if queries is None:
            raise ValueError("CQ representation requires a QuerySet")
        vecs = embed_texts(profile, ["\n".join(queries.queries)], role, store, provider)
    elif mode == "mq":
        if queries is None:
            raise ValueError("MQ representation requires a QuerySet")
        vecs = embed_texts(profile, list(queries.queries), role, store, provider)
    else:
        raise ValueError(f"unknown representation mode {mode!r}")
    return VectorSet(np.stack(vecs), mode)


# ---------------------------------------------------------------------------
# similarities

def _unit_rows(vs: VectorSet) -> np.ndarray:
    arr = np.asarray(vs.vectors, dtype=float)
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("vector sets must not contain zero vectors")
    return arr / norms


def max_sum_similarity(u: VectorSet, v: VectorSet) -> float:
    """Sum over user-side vectors of the best item-side cosine (asymmetric)."""
    if len(u) == 0 or len(v) == 0:
        raise ValueError("vector sets must be non-empty")
    uu, vv = _unit_rows(u), _unit_rows(v)
    if uu.shape[1] != vv.shape[1]:
        raise ValueError(f"dimension mismatch: {uu.shape[1]} vs {vv.shape[1]}")
    return float((uu @ vv.T).max(axis=1).sum())


class SinkhornError(Exception):
    def __init__(self, message: str, iterations: int, marginal_error: float):
        super().__init__(f"{message} (iterations={iterations}, marginal_error={marginal_error:.3e})")
        self.iterations = iterations
        self.marginal_error = marginal_error


@dataclass
class SinkhornResult:
    cost: float
    plan: np.ndarray
    iterations: int
    converged: bool          # marginal tolerance reached before rounding
    marginal_error: float    # violation before rounding
    cost_trace: list[float] = field(default_factory=list)   # primal <C, P_t>; not monotone
    dual_trace: list[float] = field(default_factory=list)   # dual objective; ascends


def _logsumexp(m: np.ndarray, axis: int) -> np.ndarray:
    mx = m.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(m - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def _round_to_marginals(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # scale rows then columns down to their targets, patch the residual rank-1
    row = plan.sum(axis=1)
    plan = plan * np.minimum(a / np.where(row > 0, row, 1.0), 1.0)[:, None]
    col = plan.sum(axis=0)
    plan = plan * np.minimum(b / np.where(col > 0, col, 1.0), 1.0)[None, :]
    ea = a - plan.sum(axis=1)
    eb = b - plan.sum(axis=0)
    total = ea.sum()
    if total > 0:
        plan = plan + np.outer(ea, eb) / total
    return plan


def sinkhorn_log(
    cost: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    reg: float = 1e-4,
    tol: float = 1e-9,
    max_iter: int = 10_000,
    trace: bool = False,
) -> SinkhornResult:
    """Entropic OT in the log domain with epsilon scaling down to ``reg``.

    The regularization is annealed by halving from the cost scale to ``reg``
    (a handful of warm-start iterations per stage), then the final stage runs
    until the marginal violation drops below ``tol``, stalls, or the
    iteration budget is spent. The returned plan is rounded onto the
    marginal polytope, so its marginals match ``a``/``b`` to machine
    precision; ``converged`` records whether the tolerance was met by the
    iteration itself. Raises SinkhornError on numerical breakdown.

    With trace=True, final-stage checkpoints log the primal cost <C, P_t>
    and the dual objective. Only the dual ascends monotonically (Sinkhorn is
    block coordinate ascent on the dual); the primal cost of the infeasible
    iterates can rise toward the optimum from below.
    """
    cost = np.asarray(cost, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(len(a))
    g = np.zeros(len(b))

    eps_stages: list[float] = []
    eps = max(float(cost.max()), reg)
    while eps > reg * 1.0000001:
        eps_stages.append(eps)
        eps /= 2.0
    eps_stages.append(reg)

    iterations = 0
    converged = False
    err = np.inf
    best_err = np.inf
    stall = 0
    cost_trace: list[float] = []
    dual_trace: list[float] = []
    for stage_eps in eps_stages:
        scaled = -cost / stage_eps
        final_stage = stage_eps == reg
        budget = (max_iter - iterations) if final_stage else min(20, max_iter - iterations)
        for _ in range(budget):
            g = log_b - _logsumexp(scaled + f[:, None], axis=0)
            f = log_a - _logsumexp(scaled + g[None, :], axis=1)
            iterations += 1
            if final_stage and iterations % 10 == 0:
                plan = np.exp(scaled + f[:, None] + g[None, :])
                err = max(
                    float(np.abs(plan.sum(axis=0) - b).max()),
                    float(np.abs(plan.sum(axis=1) - a).max()),
                )
                if trace:
                    cost_trace.append(float((plan * cost).sum()))
                    dual_trace.append(reg * float(f @ a + g @ b - plan.sum()))
                if err < tol:
                    converged = True
                    break
                # harmonic tail: cut when the violation stops improving
                if err > best_err * 0.99 and err < 1e-6:
                    stall += 1
                    if stall >= 3:
                        break
                else:
                    stall = 0
                best_err = min(best_err, err)
        if final_stage:
            break

    plan = np.exp(-cost / reg + f[:, None] + g[None, :])
    if not np.all(np.isfinite(plan)):
        raise SinkhornError("sinkhorn produced non-finite transport plan", iterations, float(err))
    err = max(
        float(np.abs(plan.sum(axis=0) - b).max()),
        float(np.abs(plan.sum(axis=1) - a).max()),
    )
    plan = _round_to_marginals(plan, a, b)
    total_cost = float((plan * cost).sum())
    if trace:
        cost_trace.append(total_cost)
    return SinkhornResult(total_cost, plan, iterations, converged, err, cost_trace, dual_trace)


def _cost_matrix(u: VectorSet, v: VectorSet) -> np.ndarray:
    uu, vv = _unit_rows(u), _unit_rows(v)
    if uu.shape[1] != vv.shape[1]:
        raise ValueError(f"dimension mismatch: {uu.shape[1]} vs {vv.shape[1]}")
    return 1.0 - uu @ vv.T


def exact_assignment_cost(cost: np.ndarray) -> float:
    """Mean cost of the optimal assignment (uniform square OT optimum)."""
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / cost.shape[0])


def ot_cost(u: VectorSet, v: VectorSet, reg: float = 1e-4, method: str = "auto") -> float:
    """Transport cost between two uniform vector sets, ground cost 1 - cosine."""
    cost = _cost_matrix(u, v)
    n_u, n_v = cost.shape
    if method == "auto":
        method = "exact" if (n_u == n_v and n_u <= 8) else "sinkhorn"
    if method == "exact":
        if n_u != n_v:
            raise ValueError("exact assignment route requires equal-size sets")
        return exact_assignment_cost(cost)
    if method != "sinkhorn":
        raise ValueError(f"unknown OT method {method!r}")
    a = np.full(n_u, 1.0 / n_u)
    b = np.full(n_v, 1.0 / n_v)
    return sinkhorn_log(cost, a, b, reg=reg).cost


def emd_similarity(u: VectorSet, v: VectorSet, reg: float = 1e-4, method: str = "auto") -> float:
    """1 - (transport cost); singleton-vs-singleton reduces to plain cosine."""
    return 1.0 - ot_cost(u, v, reg=reg, method=method)


# ---------------------------------------------------------------------------
# ranking

PAIRINGS = {
    "raw-raw": ("raw", "raw"),
    "cq-cq": ("cq", "cq"),
    "cq-raw": ("cq", "raw"),
    "mq-raw": ("mq", "raw"),
    "mq-mq": ("mq", "mq"),
}


@dataclass
class SetSimContext:
    """Everything rank_setsim needs besides the task itself."""

    profile: EmbeddingProfile
    store: EmbeddingStore
    item_texts: dict[str, str]
    provider: EmbeddingProvider | None = None
    llm_client: "ChatClient | None" = None
    query_cache: QueryCache | None = None
    k_queries: int = 10
    domain_name: str = ""


def _subject_representation(
    ctx: SetSimContext, text: str, mode: str, side: str, seed: int
) -> VectorSet:
    queries = None
    if mode in ("cq", "mq"):
        if ctx.llm_client is None:
            raise ValueError(f"{mode} representation requires an LLM client for expansion")
        queries = expand_queries(
            ctx.llm_client, text, side, ctx.domain_name, ctx.k_queries, seed, ctx.query_cache
        )
    role = "query" if side == "user" else "passage"
    return build_representation(mode, text, queries, ctx.profile, ctx.store, role, ctx.provider)


def rank_setsim(
    task: Task,
    pairing: str,
    sim: str,
    ctx: SetSimContext,
    reg: float = 1e-4,
    method_label: str | None = None,
) -> Ranking:
    """Rank candidates with a (pairing, similarity) combination.

    Broad CS with m > 1 builds one user-side set per evidence item and
    averages per-candidate scores across evidence items, mirroring the dense
    module's averaged-cosine rule.
    """
    if pairing not in PAIRINGS:
        raise ValueError(f"unknown pairing {pairing!r}; expected one of {sorted(PAIRINGS)}")
    if sim not in ("maxsum", "emd"):
        raise ValueError(f"unknown similarity {sim!r}")
    user_mode, item_mode = PAIRINGS[pairing]

    if isinstance(task.evidence, HistoryEvidence):
        user_texts = list(task.evidence.texts)
    else:
        user_texts = [task.evidence.text]
    user_sets = [
        _subject_representation(ctx, text, user_mode, "user", task.seed) for text in user_texts
    ]
    item_sets = {
        item_id: _subject_representation(
            ctx, ctx.item_texts[item_id], item_mode, "item", task.seed
        )
        for item_id in task.candidate_ids
    }

    def pair_score(user_set: VectorSet, item_set: VectorSet) -> float:
        if sim == "maxsum":
            return max_sum_similarity(user_set, item_set)
        return emd_similarity(user_set, item_set, reg=reg)

    scores = {
        item_id: float(np.mean([pair_score(us, item_sets[item_id]) for us in user_sets]))
        for item_id in task.candidate_ids
    }
    ordered = sorted(task.candidate_ids, key=lambda i: (-scores[i], i))
    label = method_label or f"{pairing}/{sim}"
    return Ranking(user_id=task.user_id, item_ids=tuple(ordered), method=label, seed=task.seed)
