"""Seeded construction of cold-start evaluation task suites.

One task = one user: their evidence (profile text for narrow CS, the m item
texts preceding the held-out positives for broad CS), L candidate item ids
containing exactly 3 hidden positives, and (L-3) negatives sampled uniformly
from items the user never touched. Per-user timelines are de-duplicated by
item keeping the most recent occurrence, so the 3 positives are always 3
distinct items.

Everything is driven by named child streams of a single seed (one stream for
the user sample, one per user for negatives), so suites are reproducible and
user-order independent. Tasks are emitted sorted by user_id.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .corpus import Dataset, render_item_text, render_profile_text
from .rng import child_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProfileEvidence:
    text: str


@dataclass(frozen=True)
class HistoryEvidence:
    texts: tuple[str, ...]  # oldest first


@dataclass(frozen=True)
class Task:
    user_id: str
    evidence: ProfileEvidence | HistoryEvidence
    candidate_ids: tuple[str, ...]
    positive_ids: tuple[str, ...]  # chronological (oldest of the three first)
    domain_name: str
    seed: int


@dataclass(frozen=True)
class SuiteConfig:
    m: int
    L: int
    n_users: int
    seed: int
    mode: str  # "narrow" | "broad" | "cross"


@dataclass
class BenchmarkSuite:
    tasks: list[Task]
    config: SuiteConfig
    domain_name: str
    dataset_fingerprint: str
    warnings: list[str] = field(default_factory=list)


def _timeline(user) -> list[tuple[str, int]]:
    """Interactions de-duplicated by item, ordered by each item's last occurrence."""
    last: dict[str, int] = {}
    order: dict[str, int] = {}
    for idx, (item_id, ts) in enumerate(user.interactions):
        last[item_id] = ts
        order[item_id] = idx
    return sorted(last.items(), key=lambda kv: (kv[1], order[kv[0]]))


def _sample_panel(eligible: list[str], n_users: int, seed: int, warnings: list[str]) -> list[str]:
    if len(eligible) <= n_users:
        if len(eligible) < n_users:
            warnings.append(f"only {len(eligible)} eligible users (requested {n_users})")
        return eligible
    rng = child_rng(seed, "bench", "users")
    picked = rng.choice(len(eligible), size=n_users, replace=False)
    return [eligible[i] for i in sorted(picked)]


def _user_task(
    user_id: str,
    evidence: ProfileEvidence | HistoryEvidence,
    positives: Sequence[str],
    history_ids: set[str],
    item_pool: Sequence[str],
    cfg: SuiteConfig,
    domain_name: str,
    warnings: list[str],
) -> Task | None:
    pool = [i for i in item_pool if i not in history_ids]
    n_neg = cfg.L - 3
    if len(pool) < n_neg:
        warnings.append(f"user {user_id}: only {len(pool)} unseen items for {n_neg} negatives; skipped")
        return None
    rng = child_rng(cfg.seed, "bench", "user", user_id)
    negatives = [pool[i] for i in rng.choice(len(pool), size=n_neg, replace=False)]
    candidates = list(positives) + negatives
    order = rng.permutation(len(candidates))
    return Task(
        user_id=user_id,
        evidence=evidence,
        candidate_ids=tuple(candidates[i] for i in order),
        positive_ids=tuple(positives),
        domain_name=domain_name,
        seed=cfg.seed,
    )


def build_tasks(
    dataset: Dataset,
    cfg: SuiteConfig,
    user_panel: Sequence[str] | None = None,
) -> BenchmarkSuite:
    """Build a narrow (m=0, profile evidence) or broad (m>=1) CS suite.

    ``user_panel`` bypasses user sampling (used by sweeps that hold the user
    sample fixed across m values); panel members that fail eligibility at
    this m are skipped with a warning.
    """
    if cfg.mode == "narrow":
        if cfg.m != 0:
            raise ValueError("narrow mode requires m=0")
    elif cfg.mode == "broad":
        if cfg.m < 1:
            raise ValueError("broad mode requires m >= 1")
    else:
        raise ValueError(f"build_tasks handles narrow/broad, not {cfg.mode!r}")
    if cfg.L <= 3:
        raise ValueError("L must exceed 3")

    warnings: list[str] = []
    item_pool = sorted(dataset.items)

    def eligible(user) -> bool:
        if len(_timeline(user)) < cfg.m + 3:
            return False
        if cfg.mode == "narrow" and not user.profile_fields:
            return False
        return True

    if user_panel is None:
        candidates = sorted(u for u, rec in dataset.users.items() if eligible(rec))
        panel = _sample_panel(candidates, cfg.n_users, cfg.seed, warnings)
    else:
        panel = []
        for user_id in sorted(user_panel):
            if user_id in dataset.users and eligible(dataset.users[user_id]):
                panel.append(user_id)
            else:
                warnings.append(f"panel user {user_id} not eligible at m={cfg.m}; skipped")

    tasks: list[Task] = []
    for user_id in panel:
        user = dataset.users[user_id]
        timeline = _timeline(user)
        positives = [item_id for item_id, _ in timeline[-3:]]
        if cfg.mode == "narrow":
            evidence: ProfileEvidence | HistoryEvidence = ProfileEvidence(render_profile_text(user))
        else:
            history_slice = timeline[-(cfg.m + 3) : -3]
            evidence = HistoryEvidence(
                tuple(render_item_text(dataset.items[item_id]) for item_id, _ in history_slice)
            )
        history_ids = {item_id for item_id, _ in user.interactions}
        task = _user_task(user_id, evidence, positives, history_ids, item_pool, cfg, dataset.domain_name, warnings)
        if task is not None:
            tasks.append(task)

    for message in warnings:
        log.warning("%s", message)
    return BenchmarkSuite(tasks, cfg, dataset.domain_name, dataset.fingerprint(), warnings)


def build_cross_domain_tasks(
    source: Dataset,
    target: Dataset,
    cfg: SuiteConfig,
    user_panel: Sequence[str] | None = None,
) -> BenchmarkSuite:
    """Cross-domain suite: evidence from ``source``, positives/candidates from ``target``.

    cfg.m is m' (source-side history size, >= 1). Negatives come from target
    items outside the user's target-domain history. ``user_panel`` pins the
    user sample (m' sweeps sample once at the largest m').
    """
    if cfg.m < 1:
        raise ValueError("cross-domain mode requires m' >= 1")
    if cfg.L <= 3:
        raise ValueError("L must exceed 3")
    overlap = sorted(set(source.users) & set(target.users))
    if not overlap:
        raise ValueError(f"no user overlap between {source.domain_name} and {target.domain_name}")

    warnings: list[str] = []
    cfg = replace(cfg, mode="cross")

    def eligible(u: str, m: int) -> bool:
        return len(_timeline(target.users[u])) >= 3 and len(_timeline(source.users[u])) >= m

    if user_panel is None:
        panel = _sample_panel([u for u in overlap if eligible(u, cfg.m)], cfg.n_users, cfg.seed, warnings)
    else:
        panel = []
        for user_id in sorted(user_panel):
            if user_id in source.users and user_id in target.users and eligible(user_id, cfg.m):
                panel.append(user_id)
            else:
                warnings.append(f"panel user {user_id} not eligible at m'={cfg.m}; skipped")
    item_pool = sorted(target.items)

    tasks: list[Task] = []
    for user_id in panel:
        target_timeline = _timeline(target.users[user_id])
        source_timeline = _timeline(source.users[user_id])
        positives = [item_id for item_id, _ in target_timeline[-3:]]
        evidence = HistoryEvidence(
            tuple(render_item_text(source.items[item_id]) for item_id, _ in source_timeline[-cfg.m :])
        )
        history_ids = {item_id for item_id, _ in target.users[user_id].interactions}
        task = _user_task(user_id, evidence, positives, history_ids, item_pool, cfg, target.domain_name, warnings)
        if task is not None:
            tasks.append(task)

    for message in warnings:
        log.warning("%s", message)
    return BenchmarkSuite(tasks, cfg, target.domain_name, target.fingerprint(), warnings)


def build_task_sweep(
    dataset: Dataset,
    cfg: SuiteConfig,
    m_values: Sequence[int],
    fixed_user_panel: bool = True,
) -> dict[int, BenchmarkSuite]:
    """One suite per m. With a fixed panel, users are sampled once with
    eligibility at max(m_values) so every suite shares the same users."""
    suites: dict[int, BenchmarkSuite] = {}
    panel: list[str] | None = None
    if fixed_user_panel:
        m_max = max(m_values)
        warnings: list[str] = []
        eligible = sorted(
            u
            for u, rec in dataset.users.items()
            if len(_timeline(rec)) >= m_max + 3 and (min(m_values) > 0 or rec.profile_fields)
        )
        panel = _sample_panel(eligible, cfg.n_users, cfg.seed, warnings)
    for m in m_values:
        mode = "narrow" if m == 0 else "broad"
        suites[m] = build_tasks(dataset, replace(cfg, m=m, mode=mode), user_panel=panel)
    return suites


def build_cross_domain_sweep(
    source: Dataset,
    target: Dataset,
    cfg: SuiteConfig,
    m_values: Sequence[int],
    fixed_user_panel: bool = True,
) -> dict[int, BenchmarkSuite]:
    """One cross-domain suite per m'; the panel is sampled once at max(m')."""
    panel: list[str] | None = None
    if fixed_user_panel:
        m_max = max(m_values)
        warnings: list[str] = []
        overlap = sorted(set(source.users) & set(target.users))
        eligible = [
            u
            for u in overlap
            if len(_timeline(target.users[u])) >= 3 and len(_timeline(source.users[u])) >= m_max
        ]
        panel = _sample_panel(eligible, cfg.n_users, cfg.seed, warnings)
    return {
        m: build_cross_domain_tasks(source, target, replace(cfg, m=m), user_panel=panel)
        for m in m_values
    }


# ---------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    violations: list[str]
    tasks_checked: int

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_suite(
    suite: BenchmarkSuite,
    dataset: Dataset,
    source_dataset: Dataset | None = None,
) -> ValidationReport:
    """Check every task invariant; report-only (never raises)."""
    v: list[str] = []
    cfg = suite.config
    if len(suite.tasks) != cfg.n_users and not suite.warnings:
        v.append(f"suite has {len(suite.tasks)} tasks but n_users={cfg.n_users} and no warning recorded")
    for task in suite.tasks:
        uid = task.user_id
        if len(task.candidate_ids) != cfg.L:
            v.append(f"{uid}: {len(task.candidate_ids)} candidates, expected L={cfg.L}")
        if len(set(task.candidate_ids)) != len(task.candidate_ids):
            v.append(f"{uid}: duplicate candidate ids")
        if len(set(task.positive_ids)) != 3:
            v.append(f"{uid}: {len(set(task.positive_ids))} positives, expected 3")
        if not set(task.positive_ids) <= set(task.candidate_ids):
            v.append(f"{uid}: positives not contained in candidates")
        user = dataset.users.get(uid)
        if user is None:
            v.append(f"{uid}: unknown user")
            continue
        history = {item_id for item_id, _ in user.interactions}
        leaked = (set(task.candidate_ids) - set(task.positive_ids)) & history
        if leaked:
            v.append(f"{uid}: history items leaked into negatives: {sorted(leaked)[:3]}")
        timeline = _timeline(user)
        expected_pos = tuple(item_id for item_id, _ in timeline[-3:])
        if tuple(task.positive_ids) != expected_pos:
            v.append(f"{uid}: positives are not the 3 most recent items")
        if cfg.mode == "narrow":
            if not isinstance(task.evidence, ProfileEvidence):
                v.append(f"{uid}: narrow task lacks profile evidence")
            elif task.evidence.text != render_profile_text(user):
                v.append(f"{uid}: profile evidence does not match the user profile")
        elif cfg.mode == "broad":
            if not isinstance(task.evidence, HistoryEvidence):
                v.append(f"{uid}: broad task lacks history evidence")
            else:
                expected = tuple(
                    render_item_text(dataset.items[item_id])
                    for item_id, _ in timeline[-(cfg.m + 3) : -3]
                )
                if task.evidence.texts != expected:
                    v.append(f"{uid}: evidence items are not the {cfg.m} interactions preceding the positives")
        elif cfg.mode == "cross":
            if not isinstance(task.evidence, HistoryEvidence):
                v.append(f"{uid}: cross task lacks history evidence")
            elif source_dataset is not None:
                src_user = source_dataset.users.get(uid)
                if src_user is None:
                    v.append(f"{uid}: user missing from source domain")
                else:
                    expected = tuple(
                        render_item_text(source_dataset.items[item_id])
                        for item_id, _ in _timeline(src_user)[-cfg.m :]
                    )
                    if task.evidence.texts != expected:
                        v.append(f"{uid}: evidence is not the m' most recent source items")
    return ValidationReport(v, len(suite.tasks))


# ---------------------------------------------------------------------------
# serialization (tasks.jsonl + suite.json sidecar)

def task_to_json(task: Task, mode: str) -> dict:
    if isinstance(task.evidence, ProfileEvidence):
        evidence = {"profile": task.evidence.text}
    else:
        evidence = {"history": list(task.evidence.texts)}
    return {
        "user_id": task.user_id,
        "mode": mode,
        "evidence": evidence,
        "candidates": list(task.candidate_ids),
        "positives": list(task.positive_ids),
        "seed": task.seed,
    }


def suite_to_jsonl(suite: BenchmarkSuite) -> bytes:
    lines = [
        json.dumps(task_to_json(t, suite.config.mode), ensure_ascii=False, sort_keys=True)
        for t in suite.tasks
    ]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def save_suite(suite: BenchmarkSuite, out_dir: str | Path, stem: str = "tasks") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.jsonl").write_bytes(suite_to_jsonl(suite))
    meta = {
        "m": suite.config.m,
        "L": suite.config.L,
        "n_users": suite.config.n_users,
        "seed": suite.config.seed,
        "mode": suite.config.mode,
        "domain": suite.domain_name,
        "dataset_fingerprint": suite.dataset_fingerprint,
        "n_tasks": len(suite.tasks),
        "warnings": suite.warnings,
    }
    (out / f"{stem}.suite.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out / f"{stem}.jsonl"


def load_suite(tasks_path: str | Path) -> BenchmarkSuite:
    tasks_path = Path(tasks_path)
    sidecar = tasks_path.with_name(tasks_path.name.removesuffix(".jsonl") + ".suite.json")
    meta = json.loads(sidecar.read_text())
    cfg = SuiteConfig(m=meta["m"], L=meta["L"], n_users=meta["n_users"], seed=meta["seed"], mode=meta["mode"])
    tasks: list[Task] = []
    with open(tasks_path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            if "profile" in row["evidence"]:
                evidence: ProfileEvidence | HistoryEvidence = ProfileEvidence(row["evidence"]["profile"])
            else:
                evidence = HistoryEvidence(tuple(row["evidence"]["history"]))
            tasks.append(
                Task(
                    user_id=row["user_id"],
                    evidence=evidence,
                    candidate_ids=tuple(row["candidates"]),
                    positive_ids=tuple(row["positives"]),
                    domain_name=meta["domain"],
                    seed=row["seed"],
                )
            )
    return BenchmarkSuite(tasks, cfg, meta["domain"], meta["dataset_fingerprint"], list(meta["warnings"]))
