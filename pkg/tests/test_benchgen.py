import dataclasses

import numpy as np
import pytest

from coldrank.benchgen import (
    HistoryEvidence,
    ProfileEvidence,
    SuiteConfig,
    build_cross_domain_sweep,
    build_cross_domain_tasks,
    build_task_sweep,
    build_tasks,
    load_suite,
    save_suite,
    suite_to_jsonl,
    validate_suite,
)
from coldrank.corpus import Dataset, Item, UserRecord, render_item_text
from conftest import make_synthetic_dataset


def cfg(m=0, L=10, n_users=5, seed=7, mode=None):
    if mode is None:
        mode = "narrow" if m == 0 else "broad"
    return SuiteConfig(m=m, L=L, n_users=n_users, seed=seed, mode=mode)


class TestBuildTasks:
    def test_narrow_shape(self, toy_dataset):
        suite = build_tasks(toy_dataset, cfg(m=0, L=10, n_users=5))
        assert len(suite.tasks) == 5
        for task in suite.tasks:
            assert len(task.candidate_ids) == 10
            assert len(set(task.candidate_ids)) == 10
            assert len(task.positive_ids) == 3
            assert set(task.positive_ids) <= set(task.candidate_ids)
            assert isinstance(task.evidence, ProfileEvidence)

    def test_broad_shape(self, toy_dataset):
        suite = build_tasks(toy_dataset, cfg(m=2, L=10, n_users=5))
        for task in suite.tasks:
            assert isinstance(task.evidence, HistoryEvidence)
            assert len(task.evidence.texts) == 2

    def test_seeded_determinism(self, toy_dataset):
        a = suite_to_jsonl(build_tasks(toy_dataset, cfg(m=1, L=10)))
        b = suite_to_jsonl(build_tasks(toy_dataset, cfg(m=1, L=10)))
        assert a == b

    def test_different_seed_differs(self, toy_dataset):
        a = suite_to_jsonl(build_tasks(toy_dataset, cfg(seed=1)))
        b = suite_to_jsonl(build_tasks(toy_dataset, cfg(seed=2)))
        assert a != b

    def test_insertion_order_of_dataset_dicts_irrelevant(self, toy_dataset):
        from coldrank.corpus import Dataset

        reversed_ds = Dataset(
            toy_dataset.domain_name,
            dict(reversed(list(toy_dataset.items.items()))),
            dict(reversed(list(toy_dataset.users.items()))),
        )
        assert reversed_ds.fingerprint() == toy_dataset.fingerprint()
        a = suite_to_jsonl(build_tasks(toy_dataset, cfg(m=1, L=10)))
        b = suite_to_jsonl(build_tasks(reversed_ds, cfg(m=1, L=10)))
        assert a == b

    def test_no_leakage(self):
        ds = make_synthetic_dataset(n_users=30, n_items=60, interactions_per_user=15, seed=5)
        suite = build_tasks(ds, cfg(m=3, L=20, n_users=30))
        for task in suite.tasks:
            history = {i for i, _ in ds.users[task.user_id].interactions}
            negatives = set(task.candidate_ids) - set(task.positive_ids)
            assert not (negatives & history)

    def test_recency(self, toy_dataset):
        suite = build_tasks(toy_dataset, cfg(m=2, L=10, n_users=5))
        for task in suite.tasks:
            events = toy_dataset.users[task.user_id].interactions
            by_ts = sorted(events, key=lambda e: e[1])
            assert list(task.positive_ids) == [i for i, _ in by_ts[-3:]]
            expected_evidence = tuple(
                render_item_text(toy_dataset.items[i]) for i, _ in by_ts[-5:-3]
            )
            assert task.evidence.texts == expected_evidence

    def test_narrow_requires_m_zero(self, toy_dataset):
        with pytest.raises(ValueError, match="narrow"):
            build_tasks(toy_dataset, SuiteConfig(1, 10, 5, 0, "narrow"))

    def test_shortfall_warning(self, toy_dataset):
        suite = build_tasks(toy_dataset, cfg(n_users=10_000))
        assert len(suite.tasks) == len(toy_dataset.users)
        assert any("eligible users" in w for w in suite.warnings)

    def test_user_without_enough_unseen_items_skipped(self):
        # 12 items, users interact with 10 -> only 2 unseen, L-3=7 needed
        ds = make_synthetic_dataset(n_users=4, n_items=12, interactions_per_user=10)
        suite = build_tasks(ds, cfg(m=0, L=10, n_users=4))
        assert len(suite.tasks) == 0
        assert all("unseen items" in w for w in suite.warnings)

    def test_repeat_interactions_still_three_distinct_positives(self):
        items = {f"i{k}": Item(f"i{k}", {"t": f"x{k}"}) for k in range(8)}
        events = tuple((f"i{k % 4}", ts) for ts, k in enumerate([0, 1, 2, 3, 0, 1], start=1))
        users = {"u": UserRecord("u", {"a": "1"}, events)}
        ds = Dataset("d", items, users)
        suite = build_tasks(ds, cfg(m=0, L=7, n_users=1))
        task = suite.tasks[0]
        assert len(set(task.positive_ids)) == 3
        # most recent by final occurrence: i3 (ts 4), i0 (ts 5), i1 (ts 6)
        assert list(task.positive_ids) == ["i3", "i0", "i1"]


class TestCrossDomain:
    @pytest.fixture
    def domains(self):
        source = make_synthetic_dataset(n_users=20, n_items=40, seed=11, domain="music")
        target = make_synthetic_dataset(n_users=20, n_items=40, seed=12, domain="movie")
        # one user exists only in the source domain
        only_source = UserRecord("lonely", {}, (("i0001", 1), ("i0002", 2), ("i0003", 3)))
        source.users["lonely"] = only_source
        return source, target

    def test_evidence_from_source_candidates_from_target(self, domains):
        source, target = domains
        suite = build_cross_domain_tasks(source, target, cfg(m=1, L=10, n_users=5, mode="cross"))
        assert suite.domain_name == "movie"
        for task in suite.tasks:
            assert len(task.evidence.texts) == 1
            assert set(task.candidate_ids) <= set(target.items)
            source_events = source.users[task.user_id].interactions
            newest = max(source_events, key=lambda e: e[1])[0]
            assert task.evidence.texts[0] == render_item_text(source.items[newest])

    def test_sweep_shares_user_sample(self, domains):
        source, target = domains
        # a user eligible only at small m' must not perturb the shared panel
        source.users["shallow"] = UserRecord("shallow", {}, (("i0001", 1), ("i0002", 2)))
        target.users["shallow"] = target.users["u0000"]
        suites = build_cross_domain_sweep(
            source, target, cfg(m=1, L=10, n_users=8, mode="cross"), [1, 3, 5, 10]
        )
        panels = {m: [t.user_id for t in s.tasks] for m, s in suites.items()}
        assert panels[1] == panels[3] == panels[5] == panels[10]
        assert "shallow" not in panels[1]

    def test_source_only_user_excluded(self, domains):
        source, target = domains
        suite = build_cross_domain_tasks(source, target, cfg(m=1, L=10, n_users=50, mode="cross"))
        assert "lonely" not in {t.user_id for t in suite.tasks}

    def test_empty_overlap_is_error(self):
        a = make_synthetic_dataset(n_users=3, domain="a")
        b = make_synthetic_dataset(n_users=3, domain="b")
        b.users = {f"x{u}": rec for u, rec in enumerate(b.users.values())}
        with pytest.raises(ValueError, match="overlap"):
            build_cross_domain_tasks(a, b, cfg(m=1, L=10, mode="cross"))


class TestValidateSuite:
    def test_fresh_suite_clean(self, toy_dataset):
        suite = build_tasks(toy_dataset, cfg(m=1, L=10, n_users=5))
        report = validate_suite(suite, toy_dataset)
        assert report.ok and report.tasks_checked == 5

    def test_positive_removed_from_candidates_flagged(self, toy_dataset):
        suite = build_tasks(toy_dataset, cfg(m=0, L=10, n_users=5))
        task = suite.tasks[0]
        mutated = dataclasses.replace(
            task, candidate_ids=tuple(i for i in task.candidate_ids if i != task.positive_ids[0])
        )
        suite.tasks[0] = mutated
        report = validate_suite(suite, toy_dataset)
        assert sum("positives not contained" in v for v in report.violations) == 1

    def test_leaked_history_item_flagged(self, toy_dataset):
        suite = build_tasks(toy_dataset, cfg(m=0, L=10, n_users=5))
        task = suite.tasks[0]
        history = [i for i, _ in toy_dataset.users[task.user_id].interactions]
        leak = next(i for i in history if i not in task.positive_ids)
        negatives = [i for i in task.candidate_ids if i not in task.positive_ids]
        swapped = tuple(leak if i == negatives[0] else i for i in task.candidate_ids)
        suite.tasks[0] = dataclasses.replace(task, candidate_ids=swapped)
        report = validate_suite(suite, toy_dataset)
        assert any("leaked" in v for v in report.violations)


class TestSweep:
    def test_fixed_panel_shares_users(self):
        ds = make_synthetic_dataset(n_users=40, n_items=80, interactions_per_user=16, seed=2)
        suites = build_task_sweep(ds, cfg(m=0, L=10, n_users=10), [0, 1, 3, 5, 10])
        panels = {m: [t.user_id for t in s.tasks] for m, s in suites.items()}
        assert all(panels[m] == panels[0] for m in panels)
        assert suites[0].config.mode == "narrow"
        assert suites[5].config.mode == "broad"

    def test_negatives_stable_across_m(self):
        ds = make_synthetic_dataset(n_users=40, n_items=80, interactions_per_user=16, seed=2)
        suites = build_task_sweep(ds, cfg(m=0, L=10, n_users=10), [0, 3])
        neg = {
            m: {t.user_id: set(t.candidate_ids) - set(t.positive_ids) for t in s.tasks}
            for m, s in suites.items()
        }
        assert neg[0] == neg[3]


class TestSamplingUniformity:
    def test_negative_inclusion_matches_hypergeometric(self):
        # one user, pool of eligible negatives, 1000 seeds: per-item inclusion
        # frequency within 3 sigma of n_draw/pool_size
        items = {f"i{k:02d}": Item(f"i{k:02d}", {"t": f"x{k}"}) for k in range(17)}
        events = tuple((f"i{k:02d}", k) for k in range(3))  # history = 3 items
        users = {"u": UserRecord("u", {"a": "1"}, events)}
        ds = Dataset("d", items, users)
        pool = 14  # 17 items - 3 history
        draws = 7  # L=10 -> 7 negatives
        counts = {f"i{k:02d}": 0 for k in range(3, 17)}
        n_seeds = 1000
        for seed in range(n_seeds):
            suite = build_tasks(ds, cfg(m=0, L=10, n_users=1, seed=seed))
            for item in set(suite.tasks[0].candidate_ids) - set(suite.tasks[0].positive_ids):
                counts[item] += 1
        p = draws / pool
        sigma = np.sqrt(n_seeds * p * (1 - p))
        for item, count in counts.items():
            assert abs(count - n_seeds * p) <= 3 * sigma, (item, count)


class TestSerialization:
    def test_suite_round_trip(self, tmp_path, toy_dataset):
        suite = build_tasks(toy_dataset, cfg(m=2, L=10, n_users=5))
        path = save_suite(suite, tmp_path, stem="toy.m2.tasks")
        again = load_suite(path)
        assert again.tasks == suite.tasks
        assert again.config == suite.config
        assert again.dataset_fingerprint == suite.dataset_fingerprint

    def test_jsonl_schema(self, toy_dataset):
        import json

        suite = build_tasks(toy_dataset, cfg(m=0, L=10, n_users=2))
        row = json.loads(suite_to_jsonl(suite).decode().splitlines()[0])
        assert set(row) == {"user_id", "mode", "evidence", "candidates", "positives", "seed"}
        assert row["mode"] == "narrow"
        assert "profile" in row["evidence"]
