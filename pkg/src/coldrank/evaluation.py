"""Per-user ranking metrics, paired significance tests, and report assembly.

Recall@k and nDCG@k use binary relevance; nDCG discounts by log2(rank+1) and
normalizes by the ideal ordering of min(k, n_positives) hits. The one-sided
Wilcoxon signed-rank test drops zero differences, mid-ranks ties, and computes
the exact tail by dynamic programming over the rank multiset (identical to
enumerating all 2^n sign assignments) up to n=25; larger samples use the
normal approximation with tie-corrected variance and continuity correction.

Reports mirror the usual method-by-dataset layout: per-cell metric means with
a "*" marker when the method is significantly above the baseline and a
triangle when significantly below, plus an "All" column over the pooled
per-user scores.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .rng import child_rng

if TYPE_CHECKING:
    from .benchgen import BenchmarkSuite, Task


@dataclass(frozen=True)
class Ranking:
    """An ordered candidate list for one task, with method/seed provenance."""

    user_id: str
    item_ids: tuple[str, ...]
    method: str
    seed: int


@dataclass
class RunResult:
    """Per-user recall/ndcg for one method on one suite."""

    method: str
    recall: dict[str, float]
    ndcg: dict[str, float]
    config: dict = field(default_factory=dict)

    @property
    def mean_recall(self) -> float:
        return float(np.mean(list(self.recall.values())))

    @property
    def mean_ndcg(self) -> float:
        return float(np.mean(list(self.ndcg.values())))


def recall_at_k(ranking: Ranking, positives: Iterable[str], k: int) -> float:
    """Fraction of positives appearing in the top k."""
    pos = set(positives)
    if not pos:
        raise ValueError("positives must be non-empty")
    if k > len(ranking.item_ids):
        raise ValueError(f"k={k} exceeds ranking length {len(ranking.item_ids)}")
    hits = sum(1 for item in ranking.item_ids[:k] if item in pos)
    return hits / len(pos)


def ndcg_at_k(ranking: Ranking, positives: Iterable[str], k: int) -> float:
    """Binary-gain nDCG with log2(rank+1) discount."""
    pos = set(positives)
    if not pos:
        raise ValueError("positives must be non-empty")
    if k > len(ranking.item_ids):
        raise ValueError(f"k={k} exceeds ranking length {len(ranking.item_ids)}")
    dcg = sum(
        1.0 / math.log2(rank + 1)
        for rank, item in enumerate(ranking.item_ids[:k], start=1)
        if item in pos
    )
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(k, len(pos)) + 1))
    return dcg / idcg


def random_ranking(task: "Task", seed: int) -> Ranking:
    """The random-ranking baseline: a seeded shuffle of the candidates."""
    rng = child_rng(seed, "random-ranking", task.user_id)
    order = rng.permutation(len(task.candidate_ids))
    return Ranking(
        user_id=task.user_id,
        item_ids=tuple(task.candidate_ids[i] for i in order),
        method="random",
        seed=seed,
    )


def evaluate_run(suite: "BenchmarkSuite", rankings: Sequence[Ranking], k: int) -> RunResult:
    """Score one ranking per task; stores per-user metrics and config echo."""
    by_user = {r.user_id: r for r in rankings}
    suite_users = {t.user_id for t in suite.tasks}
    if set(by_user) != suite_users:
        missing = sorted(suite_users - set(by_user))[:5]
        extra = sorted(set(by_user) - suite_users)[:5]
        raise ValueError(f"ranking/suite user mismatch (missing={missing}, extra={extra})")
    method = rankings[0].method if rankings else ""
    recall: dict[str, float] = {}
    ndcg: dict[str, float] = {}
    for task in suite.tasks:
        ranking = by_user[task.user_id]
        recall[task.user_id] = recall_at_k(ranking, task.positive_ids, k)
        ndcg[task.user_id] = ndcg_at_k(ranking, task.positive_ids, k)
    cfg = {"m": suite.config.m, "L": suite.config.L, "dataset": suite.domain_name, "k": k}
    return RunResult(method=method, recall=recall, ndcg=ndcg, config=cfg)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test

@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    statistic: float  # W+ = sum of ranks with positive difference
    n_effective: int  # pairs remaining after dropping zero differences
    method: str       # "exact" | "normal" | "degenerate"
    degenerate: bool = False


def _mid_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_tail(ranks: np.ndarray, w_obs: float, alternative: str) -> float:
    # Count sign assignments by DP over doubled ranks (integers even with
    # mid-rank ties); equivalent to summing over all 2^n subsets.
    doubled = np.rint(2 * ranks).astype(int)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    w2 = 2 * w_obs
    if alternative == "greater":
        cutoff = int(math.ceil(w2 - 1e-9))
        numerator = int(sum(counts[cutoff:]))
    else:
        cutoff = int(math.floor(w2 + 1e-9))
        numerator = int(sum(counts[: cutoff + 1]))
    return numerator / 2 ** len(ranks)


def _normal_tail(ranks: np.ndarray, w_obs: float, alternative: str) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    # tie correction: subtract sum(t^3 - t)/48 over tie groups of |d|
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(np.sum(tie_counts.astype(float) ** 3 - tie_counts)) / 48.0
    sd = math.sqrt(var)
    if alternative == "greater":
        z = (w_obs - mean - 0.5) / sd
        return 0.5 * math.erfc(z / math.sqrt(2))
    z = (w_obs - mean + 0.5) / sd
    return 0.5 * math.erfc(-z / math.sqrt(2))


def wilcoxon_one_sided(
    x: Mapping[str, float] | Sequence[float],
    y: Mapping[str, float] | Sequence[float],
    alternative: str = "greater",
    exact_threshold: int = 25,
) -> WilcoxonResult:
    """One-sided Wilcoxon signed-rank test on paired per-user scores.

    ``x`` and ``y`` are either mappings keyed by user id (paired on keys) or
    equal-length sequences paired by position. ``alternative="greater"``
    tests whether x tends to exceed y.
    """
    if alternative not in ("greater", "less"):
        raise ValueError("alternative must be 'greater' or 'less'")
    if isinstance(x, Mapping) != isinstance(y, Mapping):
        raise ValueError("x and y must both be mappings or both sequences")
    if isinstance(x, Mapping):
        if set(x) != set(y):
            raise ValueError("paired samples must share the same user ids")
        keys = sorted(x)
        diffs = np.array([x[k] - y[k] for k in keys], dtype=float)
    else:
        if len(x) != len(y):
            raise ValueError("paired samples must have equal length")
        diffs = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)

    diffs = diffs[diffs != 0.0]
    n = len(diffs)
    if n == 0:
        return WilcoxonResult(1.0, 0.0, 0, "degenerate", degenerate=True)
    ranks = _mid_ranks(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    if n <= exact_threshold:
        p = _exact_tail(ranks, w_plus, alternative)
        return WilcoxonResult(min(p, 1.0), w_plus, n, "exact")
    p = _normal_tail(ranks, w_plus, alternative)
    return WilcoxonResult(min(max(p, 0.0), 1.0), w_plus, n, "normal")


# ---------------------------------------------------------------------------
# win/loss/same and report tables

@dataclass(frozen=True)
class WinLossSame:
    a_wins: int
    b_wins: int
    same: int


def win_loss_same(a: RunResult, b: RunResult, metric: str) -> WinLossSame:
    """Strict per-user comparison of two methods on the same user panel."""
    scores_a = a.recall if metric == "recall" else a.ndcg
    scores_b = b.recall if metric == "recall" else b.ndcg
    if set(scores_a) != set(scores_b):
        raise ValueError("win/loss comparison requires identical user panels")
    a_wins = sum(1 for u in scores_a if scores_a[u] > scores_b[u])
    b_wins = sum(1 for u in scores_a if scores_a[u] < scores_b[u])
    return WinLossSame(a_wins, b_wins, len(scores_a) - a_wins - b_wins)


MARKER_HIGHER = "*"
MARKER_LOWER = "▽"


@dataclass
class ReportCell:
    mean: float
    marker: str = ""  # "", "*", or "▽"

    def text(self) -> str:
        return f"{self.mean:.3f}{self.marker}"


@dataclass
class ReportTable:
    datasets: list[str]              # column groups, "All" last
    methods: list[str]               # row order, baseline first
    cells: dict[tuple[str, str, str], ReportCell]  # (method, dataset, metric)
    baseline: str
    alpha: float
    k: int
    all_mean_of_means: dict[tuple[str, str], float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        header = ["method"]
        for ds in self.datasets:
            header += [f"{ds}/recall", f"{ds}/recall_marker", f"{ds}/ndcg", f"{ds}/ndcg_marker"]
        buf.write(",".join(header) + "\n")
        for method in self.methods:
            row = [method]
            for ds in self.datasets:
                for metric in ("recall", "ndcg"):
                    cell = self.cells[(method, ds, metric)]
                    row += [f"{cell.mean:.6f}", cell.marker]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(m) for m in self.methods) + 2
        col = 11
        lines = []
        head1 = " " * width + "".join(f"{ds:^{2 * col}}" for ds in self.datasets)
        head2 = " " * width + "".join(f"{'Recall':>{col}}{'nDCG':>{col}}" for _ in self.datasets)
        lines.append(head1)
        lines.append(head2)
        for method in self.methods:
            row = f"{method:<{width}}"
            for ds in self.datasets:
                for metric in ("recall", "ndcg"):
                    row += f"{self.cells[(method, ds, metric)].text():>{col}}"
            lines.append(row)
        lines.append("")
        lines.append(
            f"k={self.k}; '{MARKER_HIGHER}'/'{MARKER_LOWER}': one-sided Wilcoxon "
            f"signed-rank vs {self.baseline} at p<={self.alpha:g}"
        )
        return "\n".join(lines) + "\n"


def build_report(
    results: Sequence[RunResult],
    baseline: str,
    alpha: float = 1e-4,
    k: int = 10,
) -> ReportTable:
    """Assemble the method-by-dataset table with significance markers.

    The "All" column averages per-user scores pooled across datasets (each
    dataset contributes its user count); the mean-of-dataset-means variant is
    kept alongside in ``all_mean_of_means``.
    """
    datasets: list[str] = []
    methods: list[str] = []
    by_key: dict[tuple[str, str], RunResult] = {}
    for res in results:
        ds = str(res.config.get("dataset", ""))
        if ds not in datasets:
            datasets.append(ds)
        if res.method not in methods:
            methods.append(res.method)
        by_key[(res.method, ds)] = res
    if baseline not in methods:
        raise ValueError(f"baseline method {baseline!r} not among results")
    methods.sort(key=lambda m: (m != baseline,))  # stable: baseline first

    def pooled(method: str, metric: str) -> dict[str, float]:
        merged: dict[str, float] = {}
        for ds in datasets:
            res = by_key.get((method, ds))
            if res is None:
                continue
            scores = res.recall if metric == "recall" else res.ndcg
            for user, value in scores.items():
                merged[f"{ds}:{user}"] = value
        return merged

    cells: dict[tuple[str, str, str], ReportCell] = {}
    all_mom: dict[tuple[str, str], float] = {}
    for method in methods:
        for metric in ("recall", "ndcg"):
            ds_means = []
            for ds in datasets:
                res = by_key.get((method, ds))
                base = by_key.get((baseline, ds))
                if res is None or base is None:
                    raise ValueError(f"missing result for ({method!r}, {ds!r})")
                scores = res.recall if metric == "recall" else res.ndcg
                base_scores = base.recall if metric == "recall" else base.ndcg
                mean = float(np.mean(list(scores.values())))
                ds_means.append(mean)
                marker = ""
                if method != baseline:
                    if wilcoxon_one_sided(scores, base_scores, "greater").p_value <= alpha:
                        marker = MARKER_HIGHER
                    elif wilcoxon_one_sided(scores, base_scores, "less").p_value <= alpha:
                        marker = MARKER_LOWER
                cells[(method, ds, metric)] = ReportCell(mean, marker)
            pooled_scores = pooled(method, metric)
            pooled_base = pooled(baseline, metric)
            mean = float(np.mean(list(pooled_scores.values())))
            marker = ""
            if method != baseline:
                if wilcoxon_one_sided(pooled_scores, pooled_base, "greater").p_value <= alpha:
                    marker = MARKER_HIGHER
                elif wilcoxon_one_sided(pooled_scores, pooled_base, "less").p_value <= alpha:
                    marker = MARKER_LOWER
            cells[(method, "All", metric)] = ReportCell(mean, marker)
            all_mom[(method, metric)] = float(np.mean(ds_means))

    return ReportTable(
        datasets=datasets + ["All"],
        methods=methods,
        cells=cells,
        baseline=baseline,
        alpha=alpha,
        k=k,
        all_mean_of_means=all_mom,
    )


# ---------------------------------------------------------------------------
# persistence

def save_results_jsonl(result: RunResult, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user_id in sorted(result.recall):
            fh.write(
                json.dumps(
                    {
                        "method": result.method,
                        "user_id": user_id,
                        "recall": result.recall[user_id],
                        "ndcg": result.ndcg[user_id],
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_results_jsonl(path: str | Path, config: dict | None = None) -> RunResult:
    recall: dict[str, float] = {}
    ndcg: dict[str, float] = {}
    method = ""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            method = row["method"]
            recall[row["user_id"]] = float(row["recall"])
            ndcg[row["user_id"]] = float(row["ndcg"])
    return RunResult(method=method, recall=recall, ndcg=ndcg, config=dict(config or {}))


def save_winloss_csv(rows: Sequence[tuple[str, str, WinLossSame]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pair,metric,a_wins,b_wins,same\n")
        for pair, metric, wls in rows:
            fh.write(f"{pair},{metric},{wls.a_wins},{wls.b_wins},{wls.same}\n")
