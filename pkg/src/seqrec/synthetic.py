"""Synthetic logs with a known sequential rule, for learning checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import Transaction


@dataclass(frozen=True)
class PlantedLog:
    transactions: list
    analysis_date: int
    trigger: str  # "A"
    follower: str  # "B", always bought after a history ending in A
    control: str  # "C", unrelated to B
    ends_in: dict  # user -> last observation item


def planted_pattern_log(n_users: int = 200, n_items: int = 10, seed: int = 0, *,
                        trigger_share: float = 0.2, noise_rate: float = 0.1,
                        min_len: int = 2, max_len: int = 6,
                        follower_noise: bool = False) -> PlantedLog:
    """Users whose history ends in item A always interact with B afterwards.

    Histories draw items uniformly; a ``trigger_share`` of users get A as the
    final item, the rest end in some other item. In the performance window
    every user also picks up each non-B item with probability ``noise_rate``;
    B joins that noise only when ``follower_noise`` is set.
    """
    rng = np.random.default_rng(seed)
    items = [f"i{k}" for k in range(n_items)]
    trigger, follower, control = items[0], items[1], items[2]
    analysis_date = 1_000_000
    rows = []
    ends_in = {}
    for u in range(n_users):
        user = f"u{u:04d}"
        length = int(rng.integers(min_len, max_len + 1))
        hist = [items[k] for k in rng.integers(0, n_items, size=length)]
        if rng.random() < trigger_share:
            hist[-1] = trigger
        elif hist[-1] == trigger:
            hist[-1] = items[int(rng.integers(1, n_items))]
        ends_in[user] = hist[-1]
        for step, item in enumerate(hist):
            rows.append(Transaction(user, item, analysis_date - 10_000 + 100 * step))
        bought = [it for it in items if rng.random() < noise_rate and (follower_noise or it != follower)]
        if hist[-1] == trigger and follower not in bought:
            bought.append(follower)
        for step, item in enumerate(sorted(bought)):
            rows.append(Transaction(user, item, analysis_date + 100 * step))
    return PlantedLog(rows, analysis_date, trigger, follower, control, ends_in)


def write_generic_csv(transactions, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "timestamp"])
        for t in transactions:
            w.writerow([t.user_id, t.item_id, t.timestamp])
