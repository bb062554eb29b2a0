"""LLM listwise reranking: prompt construction, transport, output parsing.

The prompt shows the user's evidence and the L candidates numbered 1..L in a
seeded-shuffled order (fresh order per attempt, to dodge position bias and
degenerate outputs), and asks for the top-K ids as a bracketed list. Parsing
is deliberately forgiving: the first bracketed integer list anywhere in the
response is taken, out-of-range ids and duplicates are dropped, long lists
truncated, short lists accepted as partial. A task never aborts a run: after
all parse retries the display order itself is used, flagged as a fallback.

Chat transport is the OpenAI-compatible /v1/chat/completions shape at
temperature 0, with exponential backoff on 429/5xx and a disk-backed cache
keyed by SHA-256(model || prompt). The same client (and cache) serves query
expansion in the setsim module.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .benchgen import ProfileEvidence, Task
from .evaluation import Ranking
from .rng import child_rng

log = logging.getLogger(__name__)


class ChatError(Exception):
    pass


# ---------------------------------------------------------------------------
# transport + cache

class ResponseCache:
    """llm_cache.jsonl-backed map: SHA-256(model || prompt) -> response text."""

    def __init__(self, path: str | Path | None = None):
        self._entries: dict[str, str] = {}
        self._path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        if self._path is not None and self._path.exists():
            with open(self._path, encoding="utf-8") as fh:
                for line in fh:
                    row = json.loads(line)
                    self._entries[row["key_hash"]] = row["response"]

    @staticmethod
    def key(model: str, prompt: str) -> str:
        return hashlib.sha256((model + "\x00" + prompt).encode("utf-8")).hexdigest()

    def get(self, key_hash: str) -> str | None:
        return self._entries.get(key_hash)

    def put(self, key_hash: str, model: str, prompt: str, response: str) -> None:
        with self._lock:
            if key_hash in self._entries:
                return
            self._entries[key_hash] = response
            if self._path is not None:
                self._path.parent.mkdir(parents=True, exist_ok=True)
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(
                        json.dumps(
                            {"key_hash": key_hash, "model": model, "prompt": prompt, "response": response},
                            ensure_ascii=False,
                            sort_keys=True,
                        )
                        + "\n"
                    )


class TokenBucket:
    """Simple token bucket; acquire() blocks until a token is available."""

    def __init__(self, rate_per_sec: float = 10.0, capacity: int = 10):
        self.rate = rate_per_sec
        self.capacity = capacity
        self._tokens = float(capacity)
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


def http_chat_transport(
    endpoint: str,
    model: str,
    api_key_env: str = "",
    temperature: float = 0.0,
    max_attempts: int = 5,
    timeout: float = 120.0,
) -> Callable[[str], str]:
    """POST {endpoint}/v1/chat/completions with retries; returns response text."""
    import requests

    session = requests.Session()
    url = endpoint.rstrip("/") + "/v1/chat/completions"
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(api_key_env, "") if api_key_env else ""
    if key:
        headers["Authorization"] = f"Bearer {key}"

    def transport(prompt: str) -> str:
        body = {
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }
        delay = 1.0
        for attempt in range(1, max_attempts + 1):
            resp = session.post(url, json=body, headers=headers, timeout=timeout)
            if resp.status_code == 429 or resp.status_code >= 500:
                if attempt == max_attempts:
                    raise ChatError(f"{url} failed with {resp.status_code} after {attempt} attempts")
                time.sleep(delay)
                delay *= 2
                continue
            if resp.status_code != 200:
                raise ChatError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
            return resp.json()["choices"][0]["message"]["content"]
        raise ChatError("unreachable")

    return transport


def mock_transport(script: Sequence[str] | Callable[[str], str]) -> Callable[[str], str]:
    """Scripted transport for tests: a fixed response sequence or a function."""
    if callable(script):
        return script
    responses = list(script)
    state = {"i": 0}
    lock = threading.Lock()

    def transport(prompt: str) -> str:
        with lock:
            idx = min(state["i"], len(responses) - 1)
            state["i"] += 1
        return responses[idx]

    return transport


def parrot_transport(top_k: int = 10) -> Callable[[str], str]:
    """Built-in offline model: always answers positions [1..top_k]."""

    def transport(prompt: str) -> str:
        return "[" + ", ".join(str(i) for i in range(1, top_k + 1)) + "]"

    return transport


class ChatClient:
    """Cached, rate-limited chat access for one model."""

    def __init__(
        self,
        model: str,
        transport: Callable[[str], str],
        cache: ResponseCache | None = None,
        rate_limiter: TokenBucket | None = None,
        max_parallel: int = 4,
    ):
        self.model = model
        self.transport = transport
        self.cache = cache if cache is not None else ResponseCache()
        self.rate_limiter = rate_limiter
        self._slots = threading.Semaphore(max_parallel)
        self.network_calls = 0

    def chat(self, prompt: str) -> str:
        key = ResponseCache.key(self.model, prompt)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        with self._slots:
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            self.network_calls += 1
            response = self.transport(prompt)
        self.cache.put(key, self.model, prompt, response)
        return response


# ---------------------------------------------------------------------------
# prompt construction

PROMPT_TEMPLATE = (
    "You must solve the following recommendation task. The task is to select {K} items "
    "from the candidate set that the user might like and arrange them in order of preference. "
    "Output the result as a list consisting of {K} item IDs, like [8, 4, ...]. "
    "{user_info}\n"
    "# Candidate items: {candidates}"
)

USER_INFO_NARROW = "I am giving you the profile of the target user.\n# User Information: {profile}"

USER_INFO_BROAD = (
    "I am giving you the items that the target user has interacted with in the past.\n"
    "# User Item History (Chronological order, 1 is the oldest):\n"
    "{history}"
)


def _numbered_block(texts: Sequence[str]) -> str:
    return "{" + ", ".join(f"{i}: {t}" for i, t in enumerate(texts, start=1)) + "}"


@dataclass(frozen=True)
class RerankRequest:
    task: Task
    permutation: tuple[str, ...]  # display position i (1-based) -> permutation[i-1]
    prompt: str
    model: str
    seed: int
    temperature: float = 0.0


@dataclass
class RerankOutcome:
    ranking: Ranking
    parse_status: str  # "clean" | "repaired" | "fallback"
    raw_response: str
    repairs: list[str] = field(default_factory=list)


def build_rerank_prompt(task: Task, item_texts: dict[str, str], seed: int,
                        top_k: int = 10, model: str = "") -> RerankRequest:
    """Build the listwise prompt with candidates in seeded-shuffled order."""
    rng = child_rng(seed, "rerank-shuffle", task.user_id)
    order = rng.permutation(len(task.candidate_ids))
    permutation = tuple(task.candidate_ids[i] for i in order)
    if isinstance(task.evidence, ProfileEvidence):
        user_info = USER_INFO_NARROW.format(profile=task.evidence.text)
    else:
        user_info = USER_INFO_BROAD.format(history=_numbered_block(task.evidence.texts))
    prompt = PROMPT_TEMPLATE.format(
        K=top_k,
        user_info=user_info,
        candidates=_numbered_block([item_texts[i] for i in permutation]),
    )
    return RerankRequest(task=task, permutation=permutation, prompt=prompt, model=model, seed=seed)


# ---------------------------------------------------------------------------
# output parsing

_BRACKETED = re.compile(r"\[([^\[\]]*)\]")
_INT = re.compile(r"(?<![\d.])-?\d+(?![\d.])")  # whole integers only; skips "1.5"


@dataclass
class ParseResult:
    positions: list[int]  # 1-based display positions, deduplicated, in range
    status: str           # "clean" | "repaired" | "fallback"
    repairs: list[str] = field(default_factory=list)


def parse_rerank_output(raw: str, length: int, top_k: int = 10) -> ParseResult:
    """Extract the first bracketed integer list and repair it.

    Repairs, in order: drop ids outside 1..length, drop duplicates keeping
    the first occurrence, truncate to top_k. Fewer than top_k ids is
    accepted as a partial answer (not itself a repair).
    """
    candidates: list[int] | None = None
    for match in _BRACKETED.finditer(raw):
        ints = [int(m.group(0)) for m in _INT.finditer(match.group(1))]
        if ints:
            candidates = ints
            break
    if candidates is None:
        return ParseResult([], "fallback", ["no bracketed integer list found"])

    repairs: list[str] = []
    in_range = [p for p in candidates if 1 <= p <= length]
    if len(in_range) != len(candidates):
        repairs.append(f"dropped {len(candidates) - len(in_range)} out-of-range ids")
    deduped: list[int] = []
    seen: set[int] = set()
    for p in in_range:
        if p not in seen:
            seen.add(p)
            deduped.append(p)
    if len(deduped) != len(in_range):
        repairs.append(f"dropped {len(in_range) - len(deduped)} duplicate ids")
    if len(deduped) > top_k:
        repairs.append(f"truncated {len(deduped)} ids to top {top_k}")
        deduped = deduped[:top_k]
    if not deduped:
        return ParseResult([], "fallback", repairs or ["list empty after repairs"])
    return ParseResult(deduped, "repaired" if repairs else "clean", repairs)


# ---------------------------------------------------------------------------
# reranking

def rerank_with_llm(
    client: ChatClient,
    task: Task,
    item_texts: dict[str, str],
    seed: int,
    retries: int = 2,
    top_k: int = 10,
    method: str = "llm",
) -> RerankOutcome:
    """Prompt, parse, and assemble a full ranking for one task.

    A fallback parse triggers a retry with a fresh shuffle seed (an identical
    prompt would hit the cache and reproduce the same degenerate output).
    The final ranking is the parsed items followed by the remaining
    candidates in that attempt's display order; if every attempt falls back,
    the display order itself is the ranking.
    """
    attempt_seed = seed
    raw = ""
    request = None
    for attempt in range(retries + 1):
        request = build_rerank_prompt(task, item_texts, attempt_seed, top_k, client.model)
        raw = client.chat(request.prompt)
        parsed = parse_rerank_output(raw, len(task.candidate_ids), top_k)
        if parsed.status != "fallback":
            top = [request.permutation[p - 1] for p in parsed.positions]
            rest = [i for i in request.permutation if i not in set(top)]
            ranking = Ranking(task.user_id, tuple(top + rest), method, seed)
            return RerankOutcome(ranking, parsed.status, raw, parsed.repairs)
        attempt_seed = seed + 1_000_003 * (attempt + 1)  # fresh shuffle for the retry
    log.warning("task %s: all %d rerank attempts unparseable; using display order", task.user_id, retries + 1)
    ranking = Ranking(task.user_id, request.permutation, method, seed)
    return RerankOutcome(ranking, "fallback", raw, ["all attempts unparseable"])


def outcome_stats(outcomes: Sequence[RerankOutcome]) -> dict[str, float]:
    """Fraction of clean/repaired/fallback outcomes for a run."""
    n = max(len(outcomes), 1)
    counts = {"clean": 0, "repaired": 0, "fallback": 0}
    for outcome in outcomes:
        counts[outcome.parse_status] += 1
    return {status: count / n for status, count in counts.items()}
