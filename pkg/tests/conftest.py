import json

import numpy as np
import pytest

from coldrank.corpus import Dataset, Item, UserRecord


def make_synthetic_dataset(
    n_users: int = 20,
    n_items: int = 100,
    interactions_per_user: int = 12,
    seed: int = 0,
    domain: str = "toy",
    with_profiles: bool = True,
) -> Dataset:
    """Random implicit-feedback dataset with two-field items."""
    rng = np.random.default_rng(seed)
    items = {
        f"i{j:04d}": Item(f"i{j:04d}", {"title": f"object {j}", "tags": f"tok{j % 11} tok{j % 7}"})
        for j in range(n_items)
    }
    users = {}
    for u in range(n_users):
        uid = f"u{u:04d}"
        picked = rng.choice(n_items, size=min(interactions_per_user, n_items), replace=False)
        events = tuple((f"i{int(j):04d}", 1_000 + rank) for rank, j in enumerate(picked))
        profile = {"age": f"{20 + u % 40}", "group": f"g{u % 5}"} if with_profiles else {}
        users[uid] = UserRecord(uid, profile, events)
    return Dataset(domain, items, users)


def make_planted_dataset(n_users: int = 60, n_filler: int = 40, domain: str = "planted") -> Dataset:
    """Corpus where each user's 3 positives share a rare token with the profile.

    User u has profile {'interests': 'sigNNN'} and interacts with exactly the
    3 items tagged sigNNN; every other item carries a different tag, so any
    lexical method should put the positives on top.
    """
    items = {}
    users = {}
    for u in range(n_users):
        tag = f"sig{u:03d}"
        own = []
        for j in range(3):
            iid = f"p{u:03d}x{j}"
            items[iid] = Item(iid, {"title": f"object {u * 3 + j}", "tag": tag})
            own.append(iid)
        uid = f"u{u:03d}"
        users[uid] = UserRecord(
            uid, {"interests": tag}, tuple((iid, 10 + j) for j, iid in enumerate(own))
        )
    for j in range(n_filler):
        iid = f"f{j:03d}"
        items[iid] = Item(iid, {"title": f"object {90_000 + j}", "tag": f"fill{j:03d}"})
    return Dataset(domain, items, users)


def write_canonical(root, items, users, interactions) -> None:
    """Write raw canonical JSONL rows (dicts) for loader tests."""
    root.mkdir(parents=True, exist_ok=True)
    for name, rows in (("items", items), ("users", users), ("interactions", interactions)):
        with open(root / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write((row if isinstance(row, str) else json.dumps(row)) + "\n")


@pytest.fixture
def toy_dataset() -> Dataset:
    return make_synthetic_dataset()


@pytest.fixture
def planted_dataset() -> Dataset:
    return make_planted_dataset()
