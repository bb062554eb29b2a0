"""Acceptance suite: one test per exit criterion, one printed line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the pass lines.
Every expected value here is produced by an independent in-test reference
implementation (brute force, exhaustive enumeration, closed form) or frozen
from a hand evaluation.
"""

import json
import math
import time
from itertools import permutations

import numpy as np
import pytest

from coldrank import evaluation, llm, setsim
from coldrank.benchgen import SuiteConfig, build_tasks, suite_to_jsonl, validate_suite
from coldrank.cli import run_experiment
from coldrank.corpus import save_dataset
from coldrank.dense import EmbeddingProfile, EmbeddingStore, HashedBowProvider, rank_dense
from coldrank.evaluation import Ranking, ndcg_at_k, recall_at_k, wilcoxon_one_sided
from coldrank.setsim import VectorSet, emd_similarity, max_sum_similarity, ot_cost
from conftest import make_planted_dataset, make_synthetic_dataset


def report(name: str) -> None:
    print(f"\nACCEPTANCE {name}: PASS")


def test_random_baseline_anchor():
    """Uniformly random rankings, L=50, k=10, 3 positives -> mean recall 0.200 +- 0.01."""
    n_trials = 100_000
    started = time.monotonic()
    rng = np.random.default_rng(2024)
    item_ids = [f"i{j}" for j in range(50)]
    positives = {"i0", "i1", "i2"}
    orders = rng.permuted(np.tile(np.arange(50), (n_trials, 1)), axis=1)
    total = 0.0
    for row in orders:
        ranking = Ranking("u", tuple(item_ids[j] for j in row), "rand", 0)
        total += recall_at_k(ranking, positives, 10)
    mean = total / n_trials
    elapsed = time.monotonic() - started
    assert abs(mean - 0.200) <= 0.01, mean
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    report(f"random-baseline anchor (mean={mean:.4f}, {elapsed:.1f}s)")


def test_metric_oracle():
    """recall/ndcg match an independent brute-force reference to 1e-12."""

    def ref_recall(items, positives, k):
        hits = 0
        for rank in range(k):
            if items[rank] in positives:
                hits += 1
        return hits / len(positives)

    def ref_ndcg(items, positives, k):
        dcg = 0.0
        for rank in range(k):  # 0-based rank -> discount log2(rank+2)
            if items[rank] in positives:
                dcg += 1.0 / math.log2(rank + 2)
        ideal = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(positives))))
        return dcg / ideal

    rng = np.random.default_rng(7)
    ids = [f"i{j}" for j in range(50)]
    for _ in range(500):
        order = list(rng.permutation(ids))
        positives = set(rng.choice(ids, size=3, replace=False))
        ranking = Ranking("u", tuple(order), "m", 0)
        k = int(rng.integers(1, 50))
        assert recall_at_k(ranking, positives, k) == pytest.approx(
            ref_recall(order, positives, k), abs=1e-12
        )
        assert ndcg_at_k(ranking, positives, k) == pytest.approx(
            ref_ndcg(order, positives, k), abs=1e-12
        )

    # frozen worked example: positives at ranks 2 and 5, third outside top-10
    items = [f"n{j}" for j in range(15)]
    items[1], items[4] = "p1", "p2"
    items.append("p3")
    value = ndcg_at_k(Ranking("u", tuple(items), "m", 0), {"p1", "p2", "p3"}, 10)
    assert value == pytest.approx(0.47762, abs=1e-5)
    report(f"metric oracle (500 rankings; worked nDCG={value:.5f})")


def test_ot_oracle():
    """Sinkhorn cost within 1e-3 of the n! assignment oracle on 200 random sets."""
    started = time.monotonic()
    rng = np.random.default_rng(11)

    def unit_set(n):
        raw = rng.normal(size=(n, 5))
        return VectorSet(raw / np.linalg.norm(raw, axis=1, keepdims=True), "mq")

    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 7))
        u, v = unit_set(n), unit_set(n)
        sink = ot_cost(u, v, method="sinkhorn")
        cost = 1.0 - u.vectors @ v.vectors.T
        brute = min(sum(cost[i, p[i]] for i in range(n)) for p in permutations(range(n))) / n
        gap = abs(sink - brute)
        worst = max(worst, gap)
        assert gap <= 1e-3, (n, gap)

    for _ in range(20):
        u = unit_set(int(rng.integers(2, 7)))
        assert emd_similarity(u, u) == pytest.approx(1.0, abs=1e-6)

    for _ in range(20):
        u, v = unit_set(1), unit_set(1)
        expected = float(u.vectors[0] @ v.vectors[0])
        assert emd_similarity(u, v) == pytest.approx(expected, abs=1e-9)

    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    report(f"OT oracle (worst gap {worst:.2e}, {elapsed:.1f}s)")


def test_max_sum_oracle():
    """Max-Sum equals the double loop to 1e-12; Raw-Raw reproduces rank_dense."""
    rng = np.random.default_rng(13)

    def unit_set(n):
        raw = rng.normal(size=(n, 6))
        return VectorSet(raw / np.linalg.norm(raw, axis=1, keepdims=True), "mq")

    for _ in range(200):
        u = unit_set(int(rng.integers(1, 7)))
        v = unit_set(int(rng.integers(1, 7)))
        brute = 0.0
        for uv in u.vectors:
            best = -np.inf
            for iv in v.vectors:
                best = max(best, float(np.dot(uv, iv)))
            brute += best
        assert max_sum_similarity(u, v) == pytest.approx(brute, abs=1e-12)

    # Raw-Raw pairing vs rank_dense on 50 synthetic narrow tasks
    ds = make_synthetic_dataset(n_users=50, n_items=120, interactions_per_user=10, seed=17)
    suite = build_tasks(ds, SuiteConfig(0, 10, 50, 3, "narrow"))
    assert len(suite.tasks) == 50
    item_texts = ds.item_texts()
    profile = EmbeddingProfile("m", 128)
    provider = HashedBowProvider(128)
    mismatches = 0
    for task in suite.tasks:
        ctx = setsim.SetSimContext(
            profile=profile, store=EmbeddingStore(), item_texts=item_texts,
            provider=provider, domain_name="toy",
        )
        for sim in ("maxsum", "emd"):
            via_setsim = setsim.rank_setsim(task, "raw-raw", sim, ctx)
            via_dense = rank_dense(task, profile, EmbeddingStore(), item_texts, provider)
            if via_setsim.item_ids != via_dense.item_ids:
                mismatches += 1
    assert mismatches == 0
    report("Max-Sum oracle (200 pairs exact; Raw-Raw == rank_dense on 50 tasks)")


def test_wilcoxon_oracle():
    """Exact path == literal 2^n enumeration; approximation sane at the boundary."""

    def midranks(values):
        order = np.argsort(values, kind="stable")
        ranks = np.empty(len(values))
        sorted_vals = values[order]
        i = 0
        while i < len(sorted_vals):
            j = i
            while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
                j += 1
            ranks[order[i : j + 1]] = (i + j) / 2 + 1
            i = j + 1
        return ranks

    def enumerate_all(diffs, alternative):
        diffs = np.asarray(diffs, dtype=float)
        diffs = diffs[diffs != 0]
        n = len(diffs)
        ranks = midranks(np.abs(diffs))
        w_obs = ranks[diffs > 0].sum()
        masks = np.arange(2**n, dtype=np.uint64)
        w_all = np.zeros(2**n)
        for bit in range(n):
            w_all += np.where((masks >> np.uint64(bit)) & np.uint64(1), ranks[bit], 0.0)
        if alternative == "greater":
            return float((w_all >= w_obs - 1e-12).mean())
        return float((w_all <= w_obs + 1e-12).mean())

    rng = np.random.default_rng(23)
    for n in (5, 9, 14, 20):
        for _ in range(3):
            x = np.round(rng.normal(size=n), 1)
            y = np.round(rng.normal(size=n), 1)
            if np.all(x - y == 0):
                continue
            for alternative in ("greater", "less"):
                ours = wilcoxon_one_sided(list(x), list(y), alternative).p_value
                oracle = enumerate_all(x - y, alternative)
                assert ours == pytest.approx(oracle, abs=1e-12), (n, alternative)

    for n in (6, 12, 20):
        all_positive = wilcoxon_one_sided([1.0 + i for i in range(n)], [0.0] * n, "greater")
        assert all_positive.p_value == pytest.approx(2.0**-n, abs=1e-15)

    # approximation path at n=26 within 0.01 of the exact tail at the boundary
    d = rng.normal(0.25, 1.0, size=26)
    d[d == 0] = 0.05
    approx = wilcoxon_one_sided(list(d), [0.0] * 26, "greater")
    assert approx.method == "normal"
    exact = wilcoxon_one_sided(list(d), [0.0] * 26, "greater", exact_threshold=26)
    assert exact.method == "exact"
    assert approx.p_value == pytest.approx(exact.p_value, abs=0.01)
    report("Wilcoxon oracle (enumeration to n=20; 2^-n tail; boundary approx)")


def test_benchmark_protocol():
    """10k-user dataset: 0 violations over the m x L grid; injected faults caught."""
    ds = make_synthetic_dataset(
        n_users=10_000, n_items=500, interactions_per_user=16, seed=31, domain="big"
    )
    grids = [(m, L) for m in (0, 1, 3, 5, 10) for L in (10, 50)]
    for m, L in grids:
        mode = "narrow" if m == 0 else "broad"
        suite = build_tasks(ds, SuiteConfig(m, L, 500, 47, mode))
        assert len(suite.tasks) == 500
        result = validate_suite(suite, ds)
        assert result.ok, (m, L, result.violations[:3])

    cfg = SuiteConfig(1, 10, 500, 47, "broad")
    assert suite_to_jsonl(build_tasks(ds, cfg)) == suite_to_jsonl(build_tasks(ds, cfg))

    # injected faults: drop one positive from task 0, leak history into task 1
    import dataclasses

    suite = build_tasks(ds, SuiteConfig(0, 10, 500, 47, "narrow"))
    t0, t1 = suite.tasks[0], suite.tasks[1]
    suite.tasks[0] = dataclasses.replace(
        t0, candidate_ids=tuple(i for i in t0.candidate_ids if i != t0.positive_ids[0])
    )
    history = [i for i, _ in ds.users[t1.user_id].interactions]
    leak = next(i for i in history if i not in t1.positive_ids)
    negatives = [i for i in t1.candidate_ids if i not in t1.positive_ids]
    suite.tasks[1] = dataclasses.replace(
        t1, candidate_ids=tuple(leak if i == negatives[0] else i for i in t1.candidate_ids)
    )
    result = validate_suite(suite, ds)
    flagged_users = {v.split(":")[0] for v in result.violations}
    assert flagged_users == {t0.user_id, t1.user_id}
    assert sum("positives not contained" in v for v in result.violations) == 1
    assert sum("expected L=" in v for v in result.violations) == 1  # dropped candidate
    assert sum("leaked" in v for v in result.violations) == 1
    report("benchmark protocol (10 grid points clean; injected faults flagged)")


def test_end_to_end_signal_recovery(tmp_path):
    """Planted corpus: BM25 and hashed-BoW dense recall >= 0.9 vs ~0.2 random,
    both marked '*' against the random baseline at alpha=1e-4. Offline."""
    started = time.monotonic()
    ds = make_planted_dataset(n_users=60, n_filler=40)
    save_dataset(ds, tmp_path / "data" / "planted")
    cfg = {
        "experiment": {"name": "signal", "seed": 9, "k": 10, "alpha": 1e-4, "baseline": "random"},
        "scenario": {"mode": "narrow", "m": 0, "L": 50, "n_users": 60},
        "datasets": [{"name": "planted", "path": str(tmp_path / "data" / "planted")}],
        "methods": [
            {"label": "random", "kind": "random"},
            {"label": "bm25", "kind": "bm25"},
            {
                "label": "hashbow",
                "kind": "dense",
                "model": "hashed-bow",
                "dimension": 4096,
                "endpoint": "builtin:hash",
            },
        ],
    }
    run_dir = run_experiment(cfg, tmp_path / "out", offline=True)

    def mean_recall(method):
        path = run_dir / "results" / f"planted.m0.{method}.jsonl"
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        return float(np.mean([r["recall"] for r in rows]))

    random_mean = mean_recall("random")
    bm25_mean = mean_recall("bm25")
    dense_mean = mean_recall("hashbow")
    assert bm25_mean >= 0.9, bm25_mean
    assert dense_mean >= 0.9, dense_mean
    assert 0.1 <= random_mean <= 0.35, random_mean

    header, *rows = (run_dir / "report.csv").read_text().splitlines()
    columns = header.split(",")
    marker_idx = columns.index("planted/recall_marker")
    ndcg_marker_idx = columns.index("planted/ndcg_marker")
    by_method = {row.split(",")[1]: row.split(",") for row in rows}
    assert by_method["bm25"][marker_idx] == "*"
    assert by_method["bm25"][ndcg_marker_idx] == "*"
    assert by_method["hashbow"][marker_idx] == "*"
    assert by_method["hashbow"][ndcg_marker_idx] == "*"

    elapsed = time.monotonic() - started
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    report(
        "end-to-end signal recovery "
        f"(bm25={bm25_mean:.3f}, dense={dense_mean:.3f}, random={random_mean:.3f}, {elapsed:.1f}s)"
    )


# (raw response, L, top_k) -> expected (positions, status)
MALFORMED_CORPUS = [
    ("[1,2,3,4,5,6,7,8,9,10]", 50, 10, [1, 2, 3, 4, 5, 6, 7, 8, 9, 10], "clean"),
    ("[8, 4, 1]", 50, 10, [8, 4, 1], "clean"),
    ("Sure! Here is my ranking: [5, 3] enjoy", 50, 10, [5, 3], "clean"),
    ("[3, 3, 99, 2]", 50, 10, [3, 2], "repaired"),
    ("[51, 0, -2, 7]", 50, 10, [7], "repaired"),
    ("[1,1,1,1]", 50, 10, [1], "repaired"),
    ("[1,2,3,4,5,6,7,8,9,10,11,12]", 50, 10, [1, 2, 3, 4, 5, 6, 7, 8, 9, 10], "repaired"),
    ("I cannot rank these items.", 50, 10, [], "fallback"),
    ("", 50, 10, [], "fallback"),
    ("[]", 50, 10, [], "fallback"),
    ("[abc]", 50, 10, [], "fallback"),
    ("[ 9 , 2 ]", 50, 10, [9, 2], "clean"),
    ("[10 9 8]", 50, 10, [10, 9, 8], "clean"),
    ("ranking = [2, 4]; alt = [9, 9]", 50, 10, [2, 4], "clean"),
    ("[-1, 5]", 50, 10, [5], "repaired"),
    ("[05, 003]", 50, 10, [5, 3], "clean"),
    ("text [not numbers] then [6]", 50, 10, [6], "clean"),
    ("[1.5, 2]", 50, 10, [2], "clean"),
    ("Top picks:\n1. Item 5\n2. Item 3", 50, 10, [], "fallback"),
    ("[11, 2]", 10, 10, [2], "repaired"),
]


def test_llm_plumbing():
    """Malformed-output corpus parses exactly; permutation bookkeeping holds;
    the fallback path completes a whole run."""
    assert len(MALFORMED_CORPUS) == 20
    for raw, length, top_k, expected_positions, expected_status in MALFORMED_CORPUS:
        result = llm.parse_rerank_output(raw, length, top_k)
        assert result.positions == expected_positions, raw
        assert result.status == expected_status, raw

    # positions-[1..10] mock: top-10 item ids == the first 10 shuffled candidates
    ds = make_synthetic_dataset(n_users=8, n_items=80, interactions_per_user=10, seed=41)
    suite = build_tasks(ds, SuiteConfig(0, 20, 8, 5, "narrow"))
    item_texts = ds.item_texts()
    parrot = llm.ChatClient("parrot", llm.parrot_transport(10))
    for task in suite.tasks:
        outcome = llm.rerank_with_llm(parrot, task, item_texts, seed=5)
        request = llm.build_rerank_prompt(task, item_texts, seed=5, model="parrot")
        assert outcome.ranking.item_ids[:10] == request.permutation[:10]
        assert sorted(outcome.ranking.item_ids) == sorted(task.candidate_ids)

    # a model that never produces a list must still yield a full run
    garbage = llm.ChatClient("broken", llm.mock_transport(lambda prompt: "no answer"))
    outcomes = [
        llm.rerank_with_llm(garbage, task, item_texts, seed=5, retries=2) for task in suite.tasks
    ]
    assert all(o.parse_status == "fallback" for o in outcomes)
    rankings = [o.ranking for o in outcomes]
    result = evaluation.evaluate_run(suite, rankings, k=10)
    assert set(result.recall) == {t.user_id for t in suite.tasks}
    stats = llm.outcome_stats(outcomes)
    assert stats["fallback"] == 1.0
    report("LLM plumbing (20-case corpus exact; bookkeeping; fallback completes)")
