"""Dataset loading, canonical schema, and text rendering.

A Dataset is one recommendation domain: items with text fields, users with
optional profile fields, and timestamped implicit-positive interactions.
The canonical on-disk form is three JSON-lines files

    items.jsonl         {"item_id": str, "fields": {str: str}}
    users.jsonl         {"user_id": str, "profile": {str: str}}
    interactions.jsonl  {"user_id": str, "item_id": str, "ts": int}

Adapters translate raw dataset layouts (MovieLens ml-1m, Amazon reviews,
the job-recommendation TSV dump) into that schema. Timestamps are integer
epoch seconds; sources that only provide an ordering get synthetic
increasing timestamps so "most recent" is always well defined.

User and item records are rendered into Python-dict-style text
("{'title': 'A', ...}") before any method sees them; that rendering is the
single source of the strings used for BM25, embeddings, and LLM prompts.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

log = logging.getLogger(__name__)


class CorpusError(Exception):
    """Raised for unreadable paths, schema violations, and integrity errors."""


@dataclass
class Item:
    item_id: str
    text_fields: dict[str, str]


@dataclass
class UserRecord:
    user_id: str
    profile_fields: dict[str, str]
    interactions: tuple[tuple[str, int], ...] = ()  # (item_id, epoch seconds), ascending


@dataclass
class LoadReport:
    malformed_rows: int = 0
    implicit_users: int = 0
    notes: list[str] = field(default_factory=list)


@dataclass
class Dataset:
    domain_name: str
    items: dict[str, Item]
    users: dict[str, UserRecord]
    load_report: LoadReport = field(default_factory=LoadReport, compare=False)

    def fingerprint(self) -> str:
        """Content hash over the canonical serialization (order-insensitive)."""
        h = hashlib.sha256()
        h.update(self.domain_name.encode("utf-8"))
        for item_id in sorted(self.items):
            item = self.items[item_id]
            h.update(_json_line({"item_id": item.item_id, "fields": item.text_fields}))
        for user_id in sorted(self.users):
            user = self.users[user_id]
            h.update(_json_line({"user_id": user.user_id, "profile": user.profile_fields}))
            for item_id, ts in user.interactions:
                h.update(_json_line({"user_id": user.user_id, "item_id": item_id, "ts": int(ts)}))
        return h.hexdigest()

    def item_text(self, item_id: str, field_order: Sequence[str] | None = None) -> str:
        return render_item_text(self.items[item_id], field_order)

    def item_texts(self, field_order: Sequence[str] | None = None) -> dict[str, str]:
        """Rendered text for every item, keyed by item_id."""
        return {i: render_item_text(it, field_order) for i, it in self.items.items()}


def _json_line(obj: object) -> bytes:
    return (json.dumps(obj, ensure_ascii=False, sort_keys=False, separators=(", ", ": ")) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# text rendering

def render_kv_text(fields: Mapping[str, str]) -> str:
    """Dict-style rendering: "{'k1': 'v1', 'k2': 'v2'}", stable in field order."""
    inner = ", ".join(f"{k!r}: {v!r}" for k, v in fields.items())
    return "{" + inner + "}"


def render_item_text(item: Item, field_order: Sequence[str] | None = None) -> str:
    """Render an item's text fields in ``field_order`` (missing names skipped)."""
    if field_order is None:
        return render_kv_text(item.text_fields)
    picked = {k: item.text_fields[k] for k in field_order if k in item.text_fields}
    return render_kv_text(picked)


def render_profile_text(user: UserRecord) -> str:
    if not user.profile_fields:
        raise CorpusError(f"user {user.user_id!r} has an empty profile")
    return render_kv_text(user.profile_fields)


# ---------------------------------------------------------------------------
# canonical JSONL

def _read_jsonl(path: Path, report: LoadReport) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                report.malformed_rows += 1
                report.notes.append(f"{path.name}:{lineno}: unparseable JSON")
                continue
            if not isinstance(row, dict):
                report.malformed_rows += 1
                report.notes.append(f"{path.name}:{lineno}: not an object")
                continue
            yield row


def _load_canonical(root: Path, domain_name: str) -> Dataset:
    report = LoadReport()
    items: dict[str, Item] = {}
    dupes: list[str] = []
    for row in _read_jsonl(root / "items.jsonl", report):
        item_id, fields = row.get("item_id"), row.get("fields")
        if not isinstance(item_id, str) or not isinstance(fields, dict):
            report.malformed_rows += 1
            continue
        fields = {str(k): str(v) for k, v in fields.items()}
        if not any(v for v in fields.values()):
            report.malformed_rows += 1
            report.notes.append(f"item {item_id!r}: no non-empty text field")
            continue
        if item_id in items:
            dupes.append(item_id)
            continue
        items[item_id] = Item(item_id, fields)
    if dupes:
        raise CorpusError(f"duplicate item_id(s): {sorted(set(dupes))}")

    users: dict[str, UserRecord] = {}
    users_path = root / "users.jsonl"
    if users_path.exists():
        for row in _read_jsonl(users_path, report):
            user_id, profile = row.get("user_id"), row.get("profile", {})
            if not isinstance(user_id, str) or not isinstance(profile, dict):
                report.malformed_rows += 1
                continue
            users[user_id] = UserRecord(user_id, {str(k): str(v) for k, v in profile.items()})

    interactions: dict[str, list[tuple[str, int]]] = {}
    for row in _read_jsonl(root / "interactions.jsonl", report):
        user_id, item_id, ts = row.get("user_id"), row.get("item_id"), row.get("ts")
        if not isinstance(user_id, str) or not isinstance(item_id, str) or not isinstance(ts, int):
            report.malformed_rows += 1
            continue
        if item_id not in items:
            raise CorpusError(f"interaction references unknown item_id {item_id!r}")
        if user_id not in users:
            users[user_id] = UserRecord(user_id, {})
            report.implicit_users += 1
        interactions.setdefault(user_id, []).append((item_id, ts))

    return _assemble(domain_name, items, users, interactions, report)


def _assemble(
    domain_name: str,
    items: dict[str, Item],
    users: dict[str, UserRecord],
    interactions: dict[str, list[tuple[str, int]]],
    report: LoadReport,
) -> Dataset:
    for user_id, events in interactions.items():
        for item_id, _ in events:
            if item_id not in items:
                raise CorpusError(f"interaction references unknown item_id {item_id!r}")
        # stable: equal timestamps keep input order
        users[user_id].interactions = tuple(sorted(events, key=lambda e: e[1]))
    if report.malformed_rows:
        log.warning("%s: skipped %d malformed rows", domain_name, report.malformed_rows)
    return Dataset(domain_name, items, users, report)


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write a Dataset in canonical JSONL form; returns the directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "items.jsonl", "wb") as fh:
        for item_id in sorted(dataset.items):
            item = dataset.items[item_id]
            fh.write(_json_line({"item_id": item.item_id, "fields": item.text_fields}))
    with open(out / "users.jsonl", "wb") as fh:
        for user_id in sorted(dataset.users):
            user = dataset.users[user_id]
            fh.write(_json_line({"user_id": user.user_id, "profile": user.profile_fields}))
    with open(out / "interactions.jsonl", "wb") as fh:
        for user_id in sorted(dataset.users):
            for item_id, ts in dataset.users[user_id].interactions:
                fh.write(_json_line({"user_id": user_id, "item_id": item_id, "ts": int(ts)}))
    return out


# ---------------------------------------------------------------------------
# adapters: raw layouts -> canonical schema

# ml-1m verbalization. The raw dump encodes age as a bracket code and
# occupation as an integer; the mapping below fixes how they read as text
# (the dataset README's vocabulary). Documented here because it is a free
# choice that affects every downstream method.
ML1M_AGE = {
    "1": "Under 18", "18": "18-24", "25": "25-34", "35": "35-44",
    "45": "45-49", "50": "50-55", "56": "56+",
}
ML1M_OCCUPATION = {
    "0": "other", "1": "academic/educator", "2": "artist",
    "3": "clerical/admin", "4": "college/grad student", "5": "customer service",
    "6": "doctor/health care", "7": "executive/managerial", "8": "farmer",
    "9": "homemaker", "10": "K-12 student", "11": "lawyer", "12": "programmer",
    "13": "retired", "14": "sales/marketing", "15": "scientist",
    "16": "self-employed", "17": "technician/engineer",
    "18": "tradesman/craftsman", "19": "unemployed", "20": "writer",
}
ML1M_GENDER = {"M": "male", "F": "female"}


def _load_movielens(root: Path, domain_name: str) -> Dataset:
    """ml-1m layout: movies.dat / users.dat / ratings.dat with '::' separators."""
    report = LoadReport()
    items: dict[str, Item] = {}
    for parts in _split_dat(root / "movies.dat", 3, report):
        movie_id, title, genres = parts
        if movie_id in items:
            raise CorpusError(f"duplicate item_id(s): ['{movie_id}']")
        items[movie_id] = Item(movie_id, {"title": title, "genres": genres.replace("|", ", ")})

    users: dict[str, UserRecord] = {}
    for parts in _split_dat(root / "users.dat", 5, report):
        user_id, gender, age, occupation, _zip = parts
        profile = {
            "age": ML1M_AGE.get(age, age),
            "gender": ML1M_GENDER.get(gender, gender),
            "occupation": ML1M_OCCUPATION.get(occupation, occupation),
        }
        users[user_id] = UserRecord(user_id, profile)

    interactions: dict[str, list[tuple[str, int]]] = {}
    for parts in _split_dat(root / "ratings.dat", 4, report):
        user_id, movie_id, _rating, ts = parts
        if movie_id not in items:
            report.malformed_rows += 1
            continue
        if user_id not in users:
            users[user_id] = UserRecord(user_id, {})
            report.implicit_users += 1
        try:
            interactions.setdefault(user_id, []).append((movie_id, int(ts)))
        except ValueError:
            report.malformed_rows += 1
    return _assemble(domain_name, items, users, interactions, report)


def _split_dat(path: Path, n_fields: int, report: LoadReport) -> Iterator[list[str]]:
    with open(path, encoding="latin-1") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != n_fields:
                report.malformed_rows += 1
                continue
            yield parts


def _open_maybe_gzip(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def _load_amazon(
    root: Path,
    domain_name: str,
    meta_file: str = "meta.jsonl",
    reviews_file: str = "reviews.jsonl",
    item_text_fields: Sequence[str] = ("title", "categories"),
    time_unit: str = "s",
) -> Dataset:
    """Amazon review dumps: a metadata JSONL and a reviews JSONL (optionally .gz).

    Review timestamps in the 2023 dump are milliseconds; pass time_unit="ms".
    Users have no profiles (the source omits them), so only broad CS applies.
    """
    report = LoadReport()
    items: dict[str, Item] = {}
    divisor = 1000 if time_unit == "ms" else 1
    meta_path = root / meta_file
    if not meta_path.exists() and (root / (meta_file + ".gz")).exists():
        meta_path = root / (meta_file + ".gz")
    with _open_maybe_gzip(meta_path) as fh:
        for line in fh:
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                report.malformed_rows += 1
                continue
            asin = row.get("parent_asin") or row.get("asin")
            if not asin or asin in items:
                continue
            fields: dict[str, str] = {}
            for name in item_text_fields:
                value = row.get(name)
                if isinstance(value, list):
                    value = ", ".join(str(v) for v in value if v)
                if value:
                    fields[name] = str(value)
            if not fields:
                report.malformed_rows += 1
                continue
            items[asin] = Item(str(asin), fields)

    users: dict[str, UserRecord] = {}
    interactions: dict[str, list[tuple[str, int]]] = {}
    reviews_path = root / reviews_file
    if not reviews_path.exists() and (root / (reviews_file + ".gz")).exists():
        reviews_path = root / (reviews_file + ".gz")
    with _open_maybe_gzip(reviews_path) as fh:
        for line in fh:
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                report.malformed_rows += 1
                continue
            asin = row.get("parent_asin") or row.get("asin")
            user_id = row.get("user_id") or row.get("reviewerID")
            ts = row.get("timestamp") or row.get("unixReviewTime")
            if not asin or not user_id or ts is None or asin not in items:
                report.malformed_rows += 1
                continue
            user_id = str(user_id)
            if user_id not in users:
                users[user_id] = UserRecord(user_id, {})
            interactions.setdefault(user_id, []).append((str(asin), int(ts) // divisor))
    return _assemble(domain_name, items, users, interactions, report)


def _load_jobs(
    root: Path,
    domain_name: str,
    include_work_history: bool = True,
    profile_fields: Sequence[str] = (
        "DegreeType", "Major", "GraduationDate", "WorkHistoryCount",
        "TotalYearsExperience", "CurrentlyEmployed", "ManagedOthers", "ManagedHowMany",
    ),
) -> Dataset:
    """Job-recommendation TSV dump: jobs.tsv, users.tsv, apps.tsv (+user_history.tsv).

    With include_work_history=False only users whose history file carries no
    entries keep a profile (the "no-exp" variant drops the field entirely).
    """
    report = LoadReport()
    items: dict[str, Item] = {}
    for row in _read_tsv(root / "jobs.tsv", report):
        job_id = row.get("JobID")
        if not job_id:
            report.malformed_rows += 1
            continue
        fields = {}
        for name in ("Title", "Description", "Requirements"):
            if row.get(name):
                fields[name.lower() if name == "Title" else name] = row[name]
        if not fields:
            report.malformed_rows += 1
            continue
        if job_id in items:
            raise CorpusError(f"duplicate item_id(s): ['{job_id}']")
        items[job_id] = Item(job_id, fields)

    history: dict[str, dict[str, str]] = {}
    hist_path = root / "user_history.tsv"
    if include_work_history and hist_path.exists():
        for row in _read_tsv(hist_path, report):
            uid, seq, title = row.get("UserID"), row.get("Sequence"), row.get("JobTitle")
            if uid and seq and title:
                history.setdefault(uid, {})[seq] = title

    users: dict[str, UserRecord] = {}
    for row in _read_tsv(root / "users.tsv", report):
        uid = row.get("UserID")
        if not uid:
            report.malformed_rows += 1
            continue
        profile = {name: row[name] for name in profile_fields if row.get(name)}
        if include_work_history and uid in history:
            ordered = dict(sorted(history[uid].items(), key=lambda kv: int(kv[0])))
            profile["work history"] = render_kv_text(ordered)
        users[uid] = UserRecord(uid, profile)

    interactions: dict[str, list[tuple[str, int]]] = {}
    synthetic_ts = 0
    for row in _read_tsv(root / "apps.tsv", report):
        uid, job_id = row.get("UserID"), row.get("JobID")
        if not uid or not job_id or job_id not in items:
            report.malformed_rows += 1
            continue
        ts = _parse_epoch(row.get("ApplicationDate"))
        if ts is None:
            synthetic_ts += 1  # file order stands in for time
            ts = synthetic_ts
        if uid not in users:
            users[uid] = UserRecord(uid, {})
            report.implicit_users += 1
        interactions.setdefault(uid, []).append((job_id, ts))
    return _assemble(domain_name, items, users, interactions, report)


def _read_tsv(path: Path, report: LoadReport) -> Iterator[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for row in reader:
            if None in row:
                report.malformed_rows += 1
                continue
            yield {k: (v or "").strip() for k, v in row.items()}


def _parse_epoch(value: str | None) -> int | None:
    if not value:
        return None
    from datetime import datetime, timezone

    for fmt in ("%Y-%m-%d %H:%M:%S.%f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d"):
        try:
            return int(datetime.strptime(value, fmt).replace(tzinfo=timezone.utc).timestamp())
        except ValueError:
            continue
    return None


ADAPTERS: dict[str, Callable[..., Dataset]] = {
    "canonical": _load_canonical,
    "movielens": _load_movielens,
    "amazon": _load_amazon,
    "jobs": _load_jobs,
}


def load_dataset(
    path: str | Path,
    domain_name: str | None = None,
    adapter: str = "canonical",
    **adapter_options,
) -> Dataset:
    """Load a Dataset from ``path`` using the named adapter.

    The resulting Dataset satisfies all invariants: interactions sorted
    ascending by timestamp (stable on ties), every interaction's item
    resolves, item ids unique. Malformed rows are counted in
    ``dataset.load_report``; duplicate item ids and unresolvable
    interactions are hard errors.
    """
    root = Path(path)
    if not root.exists():
        raise CorpusError(f"dataset path does not exist: {root}")
    if adapter not in ADAPTERS:
        raise CorpusError(f"unknown adapter {adapter!r}; available: {sorted(ADAPTERS)}")
    name = domain_name or root.name
    return ADAPTERS[adapter](root, name, **adapter_options)
