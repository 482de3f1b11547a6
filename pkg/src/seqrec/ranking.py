"""Uplift ranking over the recommendable items, with a popularity fallback."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BASE_FLOOR = 1e-6


def estimate_base_popularity(targets: dict, train_users, floor: float = BASE_FLOOR) -> np.ndarray:
    """Share of training users with a performance interaction per item, floored."""
    users = list(train_users)
    if not users:
        raise ValueError("base popularity needs at least one training user")
    counts = np.zeros(len(targets[users[0]]), dtype=np.int64)
    for u in users:
        counts += targets[u]
    return np.maximum(counts / len(users), floor)


def uplift(probabilities, base) -> np.ndarray:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if probabilities.shape != base.shape:
        raise ValueError(f"uplift shape mismatch: {probabilities.shape} vs {base.shape}")
    return probabilities / base


@dataclass(frozen=True)
class Recommendation:
    user_id: str
    items: tuple  # indices into the recommendable list
    uplift: tuple
    probability: tuple
    fallback: bool = False


def _order(scores, candidates) -> np.ndarray:
    # descending score, ascending index on ties
    return candidates[np.lexsort((candidates, -scores[candidates]))]


def top_k(R, K: int, allowed=None, *, user_id: str = "", probabilities=None,
          fallback_popularity=None) -> Recommendation:
    """Top ``K`` recommendable indices by uplift ``R``.

    ``allowed`` restricts the candidates (indices into the recommendable
    list). When ``fallback_popularity`` is given the user is treated as
    cold: items come in base-popularity order and the result is flagged.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    R = np.asarray(R, dtype=np.float64)
    candidates = np.arange(len(R)) if allowed is None else np.unique(np.asarray(allowed, dtype=np.int64))
    if candidates.size == 0:
        raise ValueError("no allowed items to recommend")
    if fallback_popularity is not None:
        chosen = _order(np.asarray(fallback_popularity, dtype=np.float64), candidates)[:K]
    else:
        chosen = _order(R, candidates)[:K]
    probs = np.full(len(R), np.nan) if probabilities is None else np.asarray(probabilities, dtype=np.float64)
    return Recommendation(
        user_id=user_id,
        items=tuple(int(i) for i in chosen),
        uplift=tuple(float(R[i]) for i in chosen),
        probability=tuple(float(probs[i]) for i in chosen),
        fallback=fallback_popularity is not None,
    )


def rank_scores(scores, depth: int, allowed=None) -> list[int]:
    """Indices of the ``depth`` highest scores (ties by index), for baselines."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.arange(len(scores)) if allowed is None else np.unique(np.asarray(allowed, dtype=np.int64))
    return [int(i) for i in _order(scores, candidates)[:depth]]


def write_recommendations(recs, item_ids, path) -> None:
    """CSV ``user_id,rank,item_id,uplift,probability,fallback``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "rank", "item_id", "uplift", "probability", "fallback"])
        for rec in recs:
            for rank, (i, r, p) in enumerate(zip(rec.items, rec.uplift, rec.probability), start=1):
                w.writerow([rec.user_id, rank, item_ids[i], repr(r), repr(p), int(rec.fallback)])
