"""Ranking metrics: DCG/NDCG and AP@K/MAP, plus the cross-system evaluator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path


def dcg(relevances, p: int) -> float:
    """``sum_{k=1..p} rel_k / log2(k + 1)``."""
    if p < 0 or p > len(relevances):
        raise ValueError(f"p={p} outside [0, {len(relevances)}]")
    total = 0.0
    for k in range(1, p + 1):
        total += relevances[k - 1] / math.log2(k + 1)
    return total


def ndcg(ranked, relevant, p: int) -> float:
    """NDCG@p of a ranked list of item ids against a set of relevant ids.

    The ideal list packs ``min(|relevant|, p)`` hits at the top. Lists shorter
    than ``p`` are scored on the positions they have.
    """
    relevant = set(relevant)
    if not relevant:
        raise ValueError("NDCG is undefined for a user with no relevant items")
    depth = min(p, len(ranked))
    rel = [1 if item in relevant else 0 for item in ranked[:depth]]
    ideal = dcg([1] * min(len(relevant), p), min(len(relevant), p))
    return dcg(rel, depth) / ideal


def ap_at_k(ranked, relevant, K: int, normalization: str = "hits") -> float:
    """Average precision over the relevant positions of the top ``K``.

    ``normalization="hits"`` divides by the number of relevant items inside
    the top K; ``"min"`` divides by ``min(|relevant|, K)``. Zero hits gives 0.
    """
    relevant = set(relevant)
    hits = 0
    total = 0.0
    for k, item in enumerate(ranked[:K], start=1):
        if item in relevant:
            hits += 1
            total += hits / k
    if hits == 0:
        return 0.0
    if normalization == "hits":
        return total / hits
    if normalization == "min":
        return total / min(len(relevant), K)
    raise ValueError(f"unknown AP normalization {normalization!r}")


def map_at_k(per_user_ap) -> float:
    values = list(per_user_ap)
    if not values:
        return 0.0
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


@dataclass
class MetricReport:
    system: str
    map_at: dict
    ndcg: float
    p: int
    evaluated_users: int
    skipped_users: int
    skip_reasons: dict = field(default_factory=dict)
    fallback_users: int = 0

    def row(self, ks) -> dict:
        out = {"system": self.system}
        for k in ks:
            out[f"MAP@{k}"] = self.map_at[k]
        out["NDCG"] = self.ndcg
        out["evaluated_users"] = self.evaluated_users
        out["skipped_users"] = self.skipped_users
        out["fallback_users"] = self.fallback_users
        return out


def evaluate_system(rankings: dict, judgments: dict, ks=(1, 10), p: int = 10, *,
                    ap_normalization: str = "hits", zero_relevant_in_map: bool = False,
                    fallback_users=None) -> list[MetricReport]:
    """Score several systems on one user population.

    ``rankings`` maps system name -> {user: ranked item list}; every system
    must cover exactly the users in ``judgments`` (user -> relevant items).
    Users with no relevant item are skipped for NDCG, and for MAP unless
    ``zero_relevant_in_map`` is set, in which case they count as AP = 0.
    """
    users = sorted(judgments)
    for name, per_user in rankings.items():
        if set(per_user) != set(users):
            extra = sorted(set(per_user) - set(users))[:3]
            missing = sorted(set(users) - set(per_user))[:3]
            raise ValueError(f"system {name!r} scored a different user set (extra {extra}, missing {missing})")
    fallback_users = fallback_users or {}
    reports = []
    for name, per_user in rankings.items():
        aps = {k: [] for k in ks}
        ndcgs = []
        skipped = 0
        for u in users:
            rel = judgments[u]
            if not rel:
                skipped += 1
                if zero_relevant_in_map:
                    for k in ks:
                        aps[k].append(0.0)
                continue
            ranked = per_user[u]
            for k in ks:
                aps[k].append(ap_at_k(ranked, rel, k, ap_normalization))
            ndcgs.append(ndcg(ranked, rel, p))
        reports.append(MetricReport(
            system=name,
            map_at={k: map_at_k(aps[k]) for k in ks},
            ndcg=map_at_k(ndcgs),
            p=p,
            evaluated_users=len(ndcgs),
            skipped_users=skipped,
            skip_reasons={"no_relevant_items": skipped} if skipped else {},
            fallback_users=len(set(fallback_users.get(name, ())) & set(users)),
        ))
    return reports


def write_report_csv(reports, path, ks=(1, 10)) -> None:
    rows = [r.row(ks) for r in reports]
    fields = ["system", *[f"MAP@{k}" for k in ks], "NDCG", "evaluated_users", "skipped_users", "fallback_users"]
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def read_report_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
