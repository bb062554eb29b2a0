"""End-to-end experiment orchestration from a single TOML config.

A run is fully determined by (config, seed): the config hash names the run
directory, all randomness flows from the global seed through named child
streams, caches (embeddings, expansions, chat responses) live outside run
directories and are shared across runs, and a re-run with warm caches
performs no network calls and reproduces every artifact byte for byte.

Layout under --out:

    cache/embeddings/<model>.f32 + .index.jsonl
    cache/queries.jsonl
    cache/llm_cache.jsonl
    runs/<name>-<confighash>/
        manifest.json
        suites/<dataset>.m<m>.tasks.jsonl (+ .suite.json)
        rankings/<dataset>.m<m>.<method>.jsonl
        results/<dataset>.m<m>.<method>.jsonl
        report.csv  report.txt  winloss.csv

Per-task method errors mark the task failed (it falls back to a
deterministic ascending-id ranking so user panels stay aligned) and the run
continues; a method with more than 5% failed tasks is flagged invalid in the
manifest and report.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import benchgen, corpus, dense, evaluation, llm, setsim, sparse

log = logging.getLogger(__name__)

FAILURE_THRESHOLD = 0.05


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config

DEFAULTS = {
    "experiment": {"name": "experiment", "seed": 0, "k": 10, "alpha": 1e-4},
    "scenario": {"L": 50, "n_users": 500, "fixed_user_panel": True},
}


def load_config(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    return normalize_config(cfg)


def normalize_config(cfg: dict) -> dict:
    cfg = json.loads(json.dumps(cfg))  # deep copy, TOML types -> JSON types
    for section, defaults in DEFAULTS.items():
        block = cfg.setdefault(section, {})
        for key, value in defaults.items():
            block.setdefault(key, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    problems: list[str] = []
    scenario = cfg.get("scenario", {})
    mode = scenario.get("mode")
    if mode not in ("narrow", "broad", "cross"):
        problems.append(f"scenario.mode must be narrow|broad|cross, got {mode!r}")
    sweep = scenario.get("sweep_m")
    m = scenario.get("m")
    if sweep is not None and not sweep:
        problems.append("sweep_m must be non-empty when given")
    if sweep is None and m is None:
        problems.append("scenario needs m or sweep_m")
    m_values = [v for v in (sweep if sweep is not None else [m]) if v is not None]
    if mode == "narrow" and any(v != 0 for v in m_values):
        problems.append("narrow mode requires m=0")
    if mode == "broad" and sweep is None and m_values and m_values[0] < 1:
        problems.append("broad mode requires m >= 1")
    if mode == "cross":
        if not scenario.get("pairs"):
            problems.append("cross mode requires scenario.pairs = [[source, target], ...]")
        if any(v < 1 for v in m_values):
            problems.append("cross mode requires m' >= 1")
    if scenario.get("L", 50) <= 3:
        problems.append("L must exceed 3")

    datasets = cfg.get("datasets", [])
    if not datasets:
        problems.append("at least one [[datasets]] entry is required")
    names = [d.get("name") for d in datasets]
    if len(set(names)) != len(names):
        problems.append("dataset names must be unique")

    methods = cfg.get("methods", [])
    if not methods:
        problems.append("at least one [[methods]] entry is required")
    labels = [m_.get("label") for m_ in methods]
    if len(set(labels)) != len(labels):
        problems.append("method labels must be unique")
    for spec in methods:
        if spec.get("kind") not in ("bm25", "random", "dense", "setsim", "llm"):
            problems.append(f"unknown method kind {spec.get('kind')!r} for {spec.get('label')!r}")
    baseline = cfg.get("experiment", {}).get("baseline")
    if baseline and baseline not in labels:
        problems.append(f"baseline {baseline!r} is not a configured method label")
    if problems:
        raise ConfigError("; ".join(problems))


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()[:16]


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# experiment runner

@dataclass
class SuiteJob:
    label: str  # dataset name, or "src->tgt" for cross
    m: int
    suite: benchgen.BenchmarkSuite
    dataset: corpus.Dataset  # target dataset (item texts, validation)
    stem: str                # file stem: "<label>.m<m>"


@dataclass
class MethodStats:
    total: int = 0
    failed: int = 0
    failed_tasks: list[str] = field(default_factory=list)  # "<suite stem>:<user_id>"
    parse: dict[str, int] = field(default_factory=dict)

    @property
    def invalid(self) -> bool:
        return self.total > 0 and self.failed / self.total > FAILURE_THRESHOLD


class ExperimentRunner:
    def __init__(
        self,
        cfg: dict,
        out_dir: str | Path,
        offline: bool = False,
        jobs: int = 1,
        seed_override: int | None = None,
    ):
        self.cfg = cfg
        if seed_override is not None:
            self.cfg = json.loads(json.dumps(cfg))
            self.cfg["experiment"]["seed"] = seed_override
        self.offline = offline
        self.jobs = max(1, jobs)
        self.out = Path(out_dir)
        self.cache_dir = self.out / "cache"
        name = self.cfg["experiment"]["name"]
        self.run_dir = self.out / "runs" / f"{name}-{config_hash(self.cfg)}"
        self.seed = int(self.cfg["experiment"]["seed"])
        self.k = int(self.cfg["experiment"]["k"])
        self.alpha = float(self.cfg["experiment"]["alpha"])
        self.baseline = self.cfg["experiment"].get("baseline") or self.cfg["methods"][0]["label"]
        self._datasets: dict[str, corpus.Dataset] = {}
        self._stores: dict[str, dense.EmbeddingStore] = {}
        self._chat_cache: llm.ResponseCache | None = None
        self._query_cache: setsim.QueryCache | None = None
        self.method_stats: dict[str, MethodStats] = {}

    # -- shared resources

    def dataset(self, name: str) -> corpus.Dataset:
        if name not in self._datasets:
            spec = next(d for d in self.cfg["datasets"] if d["name"] == name)
            options = {k: v for k, v in spec.items() if k not in ("name", "path", "adapter")}
            self._datasets[name] = corpus.load_dataset(
                spec["path"], domain_name=name, adapter=spec.get("adapter", "canonical"), **options
            )
        return self._datasets[name]

    def store(self, model: str) -> dense.EmbeddingStore:
        if model not in self._stores:
            safe = model.replace("/", "__")
            self._stores[model] = dense.EmbeddingStore(self.cache_dir / "embeddings" / safe)
        return self._stores[model]

    def chat_cache(self) -> llm.ResponseCache:
        if self._chat_cache is None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self._chat_cache = llm.ResponseCache(self.cache_dir / "llm_cache.jsonl")
        return self._chat_cache

    def query_cache(self) -> setsim.QueryCache:
        if self._query_cache is None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self._query_cache = setsim.QueryCache(self.cache_dir / "queries.jsonl")
        return self._query_cache

    def _embedding_profile(self, spec: dict) -> dense.EmbeddingProfile:
        endpoint = spec.get("endpoint", "")
        if self.offline and endpoint.startswith(("http://", "https://")):
            endpoint = ""  # store-only: cache misses fail instead of calling out
        return dense.EmbeddingProfile(
            model_name=spec["model"],
            dimension=int(spec["dimension"]),
            query_prefix=spec.get("query_prefix", ""),
            passage_prefix=spec.get("passage_prefix", ""),
            endpoint=endpoint,
            api_key_env=spec.get("api_key_env", ""),
            parallel=int(spec.get("parallel", 8)),
        )

    def _chat_client(self, model: str, endpoint: str, api_key_env: str = "",
                     top_k: int = 10, rate_per_sec: float | None = None,
                     max_parallel: int = 4) -> llm.ChatClient:
        if endpoint == "builtin:parrot":
            transport = llm.parrot_transport(top_k)
        elif endpoint == "" or self.offline:
            def refuse(prompt: str) -> str:
                raise llm.ChatError("no chat endpoint available (offline or unconfigured); response not in cache")
            transport = refuse
        else:
            transport = llm.http_chat_transport(endpoint, model, api_key_env)
        limiter = None
        if rate_per_sec:
            limiter = llm.TokenBucket(rate_per_sec, capacity=max(1, int(rate_per_sec)))
        return llm.ChatClient(
            model, transport, cache=self.chat_cache(),
            rate_limiter=limiter, max_parallel=max_parallel,
        )

    # -- pipeline stages

    def build_suites(self) -> list[SuiteJob]:
        scenario = self.cfg["scenario"]
        mode = scenario["mode"]
        m_values = scenario.get("sweep_m") or [scenario["m"]]
        base = benchgen.SuiteConfig(
            m=0, L=int(scenario["L"]), n_users=int(scenario["n_users"]), seed=self.seed, mode=mode
        )
        jobs: list[SuiteJob] = []
        if mode == "cross":
            for source_name, target_name in scenario["pairs"]:
                source, target = self.dataset(source_name), self.dataset(target_name)
                cfg_cross = benchgen.SuiteConfig(m_values[0], base.L, base.n_users, base.seed, "cross")
                suites = benchgen.build_cross_domain_sweep(
                    source, target, cfg_cross, m_values,
                    bool(scenario.get("fixed_user_panel", True)),
                )
                for m in m_values:
                    jobs.append(SuiteJob(f"{source_name}->{target_name}", m, suites[m], target,
                                         f"{source_name}--{target_name}.m{m}"))
        else:
            for spec in self.cfg["datasets"]:
                ds = self.dataset(spec["name"])
                if len(m_values) > 1:
                    suites = benchgen.build_task_sweep(
                        ds, base, m_values, bool(scenario.get("fixed_user_panel", True))
                    )
                else:
                    m = m_values[0]
                    mode_m = "narrow" if m == 0 else "broad"
                    cfg_m = benchgen.SuiteConfig(m, base.L, base.n_users, base.seed, mode_m)
                    suites = {m: benchgen.build_tasks(ds, cfg_m)}
                for m in m_values:
                    jobs.append(SuiteJob(spec["name"], m, suites[m], ds, f"{spec['name']}.m{m}"))
        suites_dir = self.run_dir / "suites"
        suites_dir.mkdir(parents=True, exist_ok=True)
        for job in jobs:
            benchgen.save_suite(job.suite, suites_dir, stem=f"{job.stem}.tasks")
        return jobs

    def load_suites(self) -> list[SuiteJob]:
        jobs: list[SuiteJob] = []
        scenario = self.cfg["scenario"]
        m_values = scenario.get("sweep_m") or [scenario["m"]]
        if scenario["mode"] == "cross":
            specs = [(f"{s}->{t}", f"{s}--{t}", t) for s, t in scenario["pairs"]]
        else:
            specs = [(d["name"], d["name"], d["name"]) for d in self.cfg["datasets"]]
        for label, stem_base, target_name in specs:
            for m in m_values:
                stem = f"{stem_base}.m{m}"
                path = self.run_dir / "suites" / f"{stem}.tasks.jsonl"
                suite = benchgen.load_suite(path)
                jobs.append(SuiteJob(label, m, suite, self.dataset(target_name), stem))
        return jobs

    def _rank_tasks(self, job: SuiteJob, spec: dict) -> list[evaluation.Ranking]:
        label = spec["label"]
        kind = spec["kind"]
        item_texts = job.dataset.item_texts()
        stats = self.method_stats.setdefault(label, MethodStats())

        if kind == "bm25":
            index = sparse.build_bm25_index(
                item_texts, k1=float(spec.get("k1", 1.2)), b=float(spec.get("b", 0.75))
            )
            def rank_one(task):
                r = sparse.rank_bm25(index, task)
                return evaluation.Ranking(r.user_id, r.item_ids, label, r.seed)
        elif kind == "random":
            def rank_one(task):
                r = evaluation.random_ranking(task, self.seed)
                return evaluation.Ranking(r.user_id, r.item_ids, label, r.seed)
        elif kind == "dense":
            profile = self._embedding_profile(spec)
            store = self.store(profile.model_name)
            provider = dense.provider_for(profile)
            def rank_one(task):
                return dense.rank_dense(task, profile, store, item_texts, provider, method=label)
        elif kind == "setsim":
            profile = self._embedding_profile(spec)
            ctx = setsim.SetSimContext(
                profile=profile,
                store=self.store(profile.model_name),
                item_texts=item_texts,
                provider=dense.provider_for(profile),
                llm_client=(
                    self._chat_client(
                        spec.get("expander_model", "expander"),
                        spec.get("expander_endpoint", ""),
                        spec.get("expander_api_key_env", ""),
                        rate_per_sec=spec.get("expander_rate_per_sec"),
                    )
                    if spec.get("pairing", "raw-raw") != "raw-raw"
                    else None
                ),
                query_cache=self.query_cache(),
                k_queries=int(spec.get("K", 10)),
                domain_name=job.dataset.domain_name,
            )
            def rank_one(task):
                return setsim.rank_setsim(
                    task, spec["pairing"], spec["sim"], ctx,
                    reg=float(spec.get("reg", 1e-4)), method_label=label,
                )
        elif kind == "llm":
            client = self._chat_client(
                spec["model"], spec.get("endpoint", ""), spec.get("api_key_env", ""),
                int(spec.get("top_k", 10)),
                rate_per_sec=spec.get("rate_per_sec"),
                max_parallel=int(spec.get("max_parallel", 4)),
            )
            stats_lock = threading.Lock()
            def rank_one(task):
                outcome = llm.rerank_with_llm(
                    client, task, item_texts, self.seed,
                    retries=int(spec.get("retries", 2)), top_k=int(spec.get("top_k", 10)),
                    method=label,
                )
                with stats_lock:
                    stats.parse[outcome.parse_status] = stats.parse.get(outcome.parse_status, 0) + 1
                return outcome.ranking
        else:
            raise ConfigError(f"unknown method kind {kind!r}")

        def safe_rank(task):
            try:
                return rank_one(task), False
            except Exception:
                log.exception("method %s failed on task %s", label, task.user_id)
                fallback = evaluation.Ranking(
                    task.user_id, tuple(sorted(task.candidate_ids)), label, task.seed
                )
                return fallback, True

        tasks = job.suite.tasks
        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                outcomes = list(pool.map(safe_rank, tasks))
        else:
            outcomes = [safe_rank(t) for t in tasks]
        stats.total += len(tasks)
        stats.failed += sum(1 for _, failed in outcomes if failed)
        stats.failed_tasks.extend(
            f"{job.stem}:{r.user_id}" for r, failed in outcomes if failed
        )
        return [r for r, _ in outcomes]

    def rank(self, jobs: list[SuiteJob], only_method: str | None = None) -> None:
        rankings_dir = self.run_dir / "rankings"
        rankings_dir.mkdir(parents=True, exist_ok=True)
        for spec in self.cfg["methods"]:
            if only_method and spec["label"] != only_method:
                continue
            for job in jobs:
                rankings = self._rank_tasks(job, spec)
                lines = [
                    json.dumps(
                        {"user_id": r.user_id, "items": list(r.item_ids),
                         "method": r.method, "seed": r.seed},
                        ensure_ascii=False, sort_keys=True,
                    )
                    for r in sorted(rankings, key=lambda r: r.user_id)
                ]
                _write_atomic(
                    rankings_dir / f"{job.stem}.{spec['label']}.jsonl",
                    ("\n".join(lines) + "\n").encode("utf-8"),
                )

    def evaluate(self, jobs: list[SuiteJob]) -> list[tuple[SuiteJob, evaluation.RunResult]]:
        results_dir = self.run_dir / "results"
        results_dir.mkdir(parents=True, exist_ok=True)
        out: list[tuple[SuiteJob, evaluation.RunResult]] = []
        for spec in self.cfg["methods"]:
            for job in jobs:
                path = self.run_dir / "rankings" / f"{job.stem}.{spec['label']}.jsonl"
                rankings = []
                with open(path, encoding="utf-8") as fh:
                    for line in fh:
                        row = json.loads(line)
                        rankings.append(
                            evaluation.Ranking(row["user_id"], tuple(row["items"]),
                                               row["method"], row["seed"])
                        )
                result = evaluation.evaluate_run(job.suite, rankings, self.k)
                result.config["dataset"] = job.label
                result.config["m"] = job.m
                evaluation.save_results_jsonl(result, results_dir / f"{job.stem}.{spec['label']}.jsonl")
                out.append((job, result))
        return out

    def report(self, evaluated: list[tuple[SuiteJob, evaluation.RunResult]]) -> None:
        by_m: dict[int, list[evaluation.RunResult]] = {}
        for job, result in evaluated:
            by_m.setdefault(job.m, []).append(result)
        csv_parts: list[str] = []
        text_parts: list[str] = []
        winloss_rows: list[tuple[str, str, evaluation.WinLossSame]] = []
        for m in sorted(by_m):
            table = evaluation.build_report(by_m[m], self.baseline, self.alpha, self.k)
            csv_lines = table.to_csv().splitlines()
            if not csv_parts:
                csv_parts.append("m," + csv_lines[0])
            csv_parts.extend(f"{m},{line}" for line in csv_lines[1:])
            text_parts.append(f"m={m}\n" + table.to_text())
            by_method_ds: dict[tuple[str, str], evaluation.RunResult] = {}
            for result in by_m[m]:
                by_method_ds[(result.method, result.config["dataset"])] = result
            for (method, ds), result in sorted(by_method_ds.items()):
                if method == self.baseline:
                    continue
                base = by_method_ds.get((self.baseline, ds))
                if base is None:
                    continue
                for metric in ("recall", "ndcg"):
                    wls = evaluation.win_loss_same(result, base, metric)
                    winloss_rows.append((f"{method} vs {self.baseline} [{ds} m={m}]", metric, wls))
        _write_atomic(self.run_dir / "report.csv", ("\n".join(csv_parts) + "\n").encode("utf-8"))
        _write_atomic(self.run_dir / "report.txt", ("\n".join(text_parts)).encode("utf-8"))
        buf = ["pair,metric,a_wins,b_wins,same"]
        buf += [f"{pair},{metric},{w.a_wins},{w.b_wins},{w.same}" for pair, metric, w in winloss_rows]
        _write_atomic(self.run_dir / "winloss.csv", ("\n".join(buf) + "\n").encode("utf-8"))

    def write_manifest(self, jobs: list[SuiteJob]) -> None:
        manifest = {
            "config": self.cfg,
            "config_hash": config_hash(self.cfg),
            "datasets": {name: ds.fingerprint() for name, ds in sorted(self._datasets.items())},
            "suites": [
                {"label": job.label, "m": job.m, "n_tasks": len(job.suite.tasks),
                 "warnings": job.suite.warnings}
                for job in jobs
            ],
            "methods": {
                label: {
                    "total_tasks": stats.total,
                    "failed_tasks": stats.failed,
                    "invalid": stats.invalid,
                    **({"failed_task_ids": sorted(stats.failed_tasks)} if stats.failed_tasks else {}),
                    **({"parse_status": dict(sorted(stats.parse.items()))} if stats.parse else {}),
                }
                for label, stats in sorted(self.method_stats.items())
            },
        }
        _write_atomic(
            self.run_dir / "manifest.json",
            (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"),
        )

    def run(self) -> Path:
        jobs = self.build_suites()
        self.rank(jobs)
        evaluated = self.evaluate(jobs)
        self.report(evaluated)
        self.write_manifest(jobs)
        return self.run_dir


def run_experiment(
    config: dict | str | Path,
    out_dir: str | Path,
    offline: bool = False,
    jobs: int = 1,
    seed_override: int | None = None,
) -> Path:
    """Execute the full pipeline for a config; returns the run directory."""
    cfg = load_config(config) if isinstance(config, (str, Path)) else normalize_config(config)
    runner = ExperimentRunner(cfg, out_dir, offline=offline, jobs=jobs, seed_override=seed_override)
    return runner.run()


def run_dir_content_hash(run_dir: str | Path) -> str:
    """SHA-256 over (relative path, file hash) pairs; for determinism checks."""
    run_dir = Path(run_dir)
    digest = hashlib.sha256()
    for path in sorted(run_dir.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(run_dir)).encode("utf-8"))
            digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# cache gc

def cache_gc(
    out_dir: str | Path,
    max_age_days: float | None = None,
    max_total_bytes: int | None = None,
) -> int:
    """Delete stale unpinned run directories and (if no run is pinned) stale
    cache files. A run is pinned by a file named PINNED in its directory.
    Returns freed bytes."""
    out = Path(out_dir)
    runs_root = out / "runs"
    now = time.time()
    freed = 0

    def dir_size(path: Path) -> int:
        return sum(p.stat().st_size for p in path.rglob("*") if p.is_file())

    runs = (
        sorted((p for p in runs_root.iterdir() if p.is_dir()), key=lambda p: p.stat().st_mtime)
        if runs_root.exists()
        else []
    )
    pinned = {run for run in runs if (run / "PINNED").exists()}

    if max_age_days is not None:
        cutoff = now - max_age_days * 86400
        for run in list(runs):
            if run in pinned or run.stat().st_mtime >= cutoff:
                continue
            freed += dir_size(run)
            shutil.rmtree(run)
            runs.remove(run)
        cache_root = out / "cache"
        if not pinned and cache_root.exists():
            for path in sorted(cache_root.rglob("*")):
                if path.is_file() and path.stat().st_mtime < cutoff:
                    freed += path.stat().st_size
                    path.unlink()

    if max_total_bytes is not None:
        total = sum(dir_size(run) for run in runs)
        for run in list(runs):  # oldest first
            if total <= max_total_bytes:
                break
            if run in pinned:
                continue
            size = dir_size(run)
            freed += size
            total -= size
            shutil.rmtree(run)
            runs.remove(run)
    return freed


# ---------------------------------------------------------------------------
# CLI

@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable info-level logging.")
def main(verbose: bool) -> None:
    """coldrank: training-free cold-start recommendation evaluation harness."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path(exists=True))(fn)
    fn = click.option("--out", "out_dir", required=True, type=click.Path())(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    fn = click.option("--offline", is_flag=True, help="Fail instead of calling providers.")(fn)
    fn = click.option("--jobs", type=int, default=1, help="Worker threads per method.")(fn)
    return fn


def _runner(config_path, out_dir, seed, offline, jobs) -> ExperimentRunner:
    cfg = load_config(config_path)
    return ExperimentRunner(cfg, out_dir, offline=offline, jobs=jobs, seed_override=seed)


@main.command()
@_common_options
def run(config_path, out_dir, seed, offline, jobs):
    """Run the full pipeline: suites, rankings, metrics, reports."""
    runner = _runner(config_path, out_dir, seed, offline, jobs)
    run_dir = runner.run()
    click.echo(f"run complete: {run_dir}")


@main.command()
@_common_options
def sweep(config_path, out_dir, seed, offline, jobs):
    """Run a sweep config (scenario.sweep_m) end to end."""
    runner = _runner(config_path, out_dir, seed, offline, jobs)
    if not runner.cfg["scenario"].get("sweep_m"):
        raise click.UsageError("sweep requires scenario.sweep_m in the config")
    run_dir = runner.run()
    click.echo(f"sweep complete: {run_dir}")


@main.group()
def bench():
    """Benchmark suite commands."""


@bench.command("build")
@_common_options
def bench_build(config_path, out_dir, seed, offline, jobs):
    """Build and validate task suites only."""
    runner = _runner(config_path, out_dir, seed, offline, jobs)
    jobs_list = runner.build_suites()
    for job in jobs_list:
        report = benchgen.validate_suite(job.suite, job.dataset)
        status = "ok" if report.ok else f"{len(report.violations)} violations"
        click.echo(f"{job.stem}: {len(job.suite.tasks)} tasks ({status})")
    runner.write_manifest(jobs_list)


@main.command()
@_common_options
def embed(config_path, out_dir, seed, offline, jobs):
    """Pre-embed all item and evidence texts for dense/setsim methods."""
    runner = _runner(config_path, out_dir, seed, offline, jobs)
    suite_jobs = runner.load_suites()
    n = 0
    for spec in runner.cfg["methods"]:
        if spec["kind"] not in ("dense", "setsim"):
            continue
        profile = runner._embedding_profile(spec)
        store = runner.store(profile.model_name)
        provider = dense.provider_for(profile)
        for job in suite_jobs:
            texts = list(job.dataset.item_texts().values())
            dense.embed_texts(profile, texts, "passage", store, provider)
            for task in job.suite.tasks:
                ev = task.evidence
                user_texts = list(ev.texts) if isinstance(ev, benchgen.HistoryEvidence) else [ev.text]
                dense.embed_texts(profile, user_texts, "query", store, provider)
                n += len(user_texts)
            n += len(texts)
    click.echo(f"embedded (or cache-verified) {n} texts")


@main.command()
@_common_options
def expand(config_path, out_dir, seed, offline, jobs):
    """Pre-expand user/item queries for setsim methods."""
    runner = _runner(config_path, out_dir, seed, offline, jobs)
    suite_jobs = runner.load_suites()
    n = 0
    for spec in runner.cfg["methods"]:
        if spec["kind"] != "setsim" or spec.get("pairing", "raw-raw") == "raw-raw":
            continue
        user_mode, item_mode = setsim.PAIRINGS[spec["pairing"]]
        client = runner._chat_client(
            spec.get("expander_model", "expander"),
            spec.get("expander_endpoint", ""),
            spec.get("expander_api_key_env", ""),
        )
        cache = runner.query_cache()
        k_q = int(spec.get("K", 10))
        for job in suite_jobs:
            domain = job.dataset.domain_name
            if user_mode in ("cq", "mq"):
                for task in job.suite.tasks:
                    ev = task.evidence
                    texts = list(ev.texts) if isinstance(ev, benchgen.HistoryEvidence) else [ev.text]
                    for text in texts:
                        setsim.expand_queries(client, text, "user", domain, k_q, runner.seed, cache)
                        n += 1
            if item_mode in ("cq", "mq"):
                for text in job.dataset.item_texts().values():
                    setsim.expand_queries(client, text, "item", domain, k_q, runner.seed, cache)
                    n += 1
    click.echo(f"expanded {n} subjects")


@main.command()
@_common_options
@click.option("--method", default=None, help="Rank with a single method label.")
def rank(config_path, out_dir, seed, offline, jobs, method):
    """Produce rankings for existing suites."""
    runner = _runner(config_path, out_dir, seed, offline, jobs)
    suite_jobs = runner.load_suites()
    runner.rank(suite_jobs, only_method=method)
    runner.write_manifest(suite_jobs)
    click.echo("rankings written")


@main.command("eval")
@_common_options
def eval_cmd(config_path, out_dir, seed, offline, jobs):
    """Compute per-user metrics from existing rankings."""
    runner = _runner(config_path, out_dir, seed, offline, jobs)
    suite_jobs = runner.load_suites()
    runner.evaluate(suite_jobs)
    click.echo("results written")


@main.command()
@_common_options
def report(config_path, out_dir, seed, offline, jobs):
    """Assemble report tables from existing results."""
    runner = _runner(config_path, out_dir, seed, offline, jobs)
    suite_jobs = runner.load_suites()
    evaluated = runner.evaluate(suite_jobs)
    runner.report(evaluated)
    click.echo(f"report written to {runner.run_dir}")


@main.group()
def cache():
    """Cache maintenance."""


@cache.command("gc")
@click.option("--out", "out_dir", required=True, type=click.Path(exists=True))
@click.option("--max-age-days", type=float, default=None)
@click.option("--max-total-mb", type=float, default=None)
def cache_gc_cmd(out_dir, max_age_days, max_total_mb):
    """Remove stale unpinned runs and cache files."""
    max_bytes = int(max_total_mb * 1024 * 1024) if max_total_mb is not None else None
    freed = cache_gc(out_dir, max_age_days=max_age_days, max_total_bytes=max_bytes)
    click.echo(f"freed {freed} bytes")


if __name__ == "__main__":
    main()
