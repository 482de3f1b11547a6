import itertools
import math
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqrec import metrics


# -- independent reference implementations ----------------------------------------

def ref_ndcg(rel_flags, p):
    """NDCG@p from a 0/1 relevance list; the ideal list is the sorted flags."""
    gains = [r / math.log2(pos + 2) for pos, r in enumerate(rel_flags[:p])]
    ideal = sorted(rel_flags, reverse=True)[:p]
    ideal_gains = [r / math.log2(pos + 2) for pos, r in enumerate(ideal)]
    return sum(gains) / sum(ideal_gains)


def ref_ap(rel_flags, K, n_relevant, normalization):
    top = rel_flags[:K]
    precisions = [sum(top[: k + 1]) / (k + 1) for k in range(len(top)) if top[k]]
    if not precisions:
        return 0.0
    denom = len(precisions) if normalization == "hits" else min(n_relevant, K)
    return sum(precisions) / denom


def metric_oracle_cases(max_len: int = 6):
    """Yield (ranked list, relevant set, flags) over every permutation and pattern."""
    for n in range(1, max_len + 1):
        items = [f"i{k}" for k in range(n)]
        for pattern in itertools.product((0, 1), repeat=n):
            relevant = {it for it, r in zip(items, pattern) if r}
            for perm in itertools.permutations(items):
                yield list(perm), relevant, [int(it in relevant) for it in perm]


def run_metric_oracle(max_len: int = 6):
    """Compare against the references; returns (cases, mismatches, seconds)."""
    start = time.perf_counter()
    cases = mismatches = 0
    for ranked, relevant, flags in metric_oracle_cases(max_len):
        cases += 1
        n = len(ranked)
        for K in range(1, n + 1):
            for norm in ("hits", "min"):
                if metrics.ap_at_k(ranked, relevant, K, norm) != ref_ap(flags, K, len(relevant), norm):
                    mismatches += 1
            if relevant and metrics.ndcg(ranked, relevant, K) != ref_ndcg(flags, K):
                mismatches += 1
    return cases, mismatches, time.perf_counter() - start


def test_oracle_small_lists_exact():
    cases, mismatches, _ = run_metric_oracle(max_len=4)
    assert cases == sum(math.factorial(n) * 2**n for n in range(1, 5))
    assert mismatches == 0


# -- hand examples ----------------------------------------------------------------

def test_dcg_hand_value():
    assert metrics.dcg([3, 2, 3, 0, 1, 2], 6) == pytest.approx(6.861126688593502)
    assert metrics.dcg([1, 0], 0) == 0.0
    with pytest.raises(ValueError):
        metrics.dcg([1], 2)


def test_ndcg_perfect_and_reversed():
    assert metrics.ndcg(["a", "b", "c"], {"a"}, 3) == 1.0
    assert metrics.ndcg(["c", "b", "a"], {"a"}, 3) == pytest.approx(1 / math.log2(4))
    assert metrics.ndcg(["x", "y"], {"z"}, 2) == 0.0


def test_ndcg_undefined_without_relevant_items():
    with pytest.raises(ValueError):
        metrics.ndcg(["a"], set(), 1)


def test_ndcg_ideal_uses_min_of_relevant_and_p():
    # two relevant items, p = 1: ideal packs one hit
    assert metrics.ndcg(["a", "b"], {"a", "b"}, 1) == 1.0


def test_ap_worked_example():
    ranked = ["a", "x", "b", "y", "c"]
    relevant = {"a", "b", "c"}
    assert metrics.ap_at_k(ranked, relevant, 5) == pytest.approx((1 + 2 / 3 + 3 / 5) / 3)
    assert metrics.ap_at_k(ranked, relevant, 2) == 1.0
    assert metrics.ap_at_k(ranked, relevant, 2, "min") == pytest.approx(0.5)
    assert metrics.ap_at_k(["x"], relevant, 1) == 0.0
    with pytest.raises(ValueError):
        metrics.ap_at_k(ranked, relevant, 2, "other")


def test_map_is_mean_of_ap():
    aps = [0.5, 0.25, 1.0, 0.0]
    assert metrics.map_at_k(aps) == pytest.approx(sum(aps) / 4)
    assert metrics.map_at_k([]) == 0.0


# -- properties -------------------------------------------------------------------

lists = st.integers(1, 8).flatmap(
    lambda n: st.tuples(st.permutations([f"i{k}" for k in range(n)]), st.lists(st.booleans(), min_size=n, max_size=n))
)


@given(lists, st.integers(1, 8))
def test_ndcg_bounds_and_perfect_ranking(case, p):
    ranked, flags = case
    relevant = {it for it, f in zip(ranked, flags) if f}
    if not relevant:
        return
    value = metrics.ndcg(ranked, relevant, p)
    assert 0.0 <= value <= 1.0 + 1e-12
    ideal = sorted(ranked, key=lambda it: it not in relevant)
    assert metrics.ndcg(ideal, relevant, p) == pytest.approx(1.0)


@given(lists, st.integers(1, 8), st.data())
def test_swapping_relevant_item_up_never_hurts(case, K, data):
    ranked, flags = case
    relevant = {it for it, f in zip(ranked, flags) if f}
    n = len(ranked)
    hi = data.draw(st.integers(0, n - 1))
    lo = data.draw(st.integers(hi, n - 1))
    if not (ranked[lo] in relevant and ranked[hi] not in relevant):
        return
    better = list(ranked)
    better[hi], better[lo] = better[lo], better[hi]
    assert metrics.ap_at_k(better, relevant, K, "min") >= metrics.ap_at_k(ranked, relevant, K, "min") - 1e-12
    assert metrics.ndcg(better, relevant, K) >= metrics.ndcg(ranked, relevant, K) - 1e-12


# -- evaluator ----------------------------------------------------------------------

def test_evaluate_system_recomputes_map_and_counts_skips():
    judgments = {"u1": {"a"}, "u2": {"b", "c"}, "u3": set()}
    rankings = {"s": {"u1": ["a", "b", "c"], "u2": ["a", "b", "c"], "u3": ["c", "b", "a"]}}
    (rep,) = metrics.evaluate_system(rankings, judgments, ks=(1, 3), p=3)
    ap1 = [metrics.ap_at_k(rankings["s"][u], judgments[u], 1) for u in ("u1", "u2")]
    assert rep.map_at[1] == pytest.approx(sum(ap1) / 2)
    assert rep.evaluated_users == 2 and rep.skipped_users == 1
    (rep0,) = metrics.evaluate_system(rankings, judgments, ks=(1,), p=3, zero_relevant_in_map=True)
    assert rep0.map_at[1] == pytest.approx(sum(ap1) / 3)


def test_evaluate_system_requires_identical_users():
    with pytest.raises(ValueError, match="different user set"):
        metrics.evaluate_system({"s": {"u1": ["a"]}}, {"u1": {"a"}, "u2": {"a"}})


def test_report_csv_layout(tmp_path):
    judgments = {"u": {"a"}}
    reports = metrics.evaluate_system({"seq": {"u": ["a", "b"]}, "random": {"u": ["b", "a"]}}, judgments, p=2)
    path = tmp_path / "m.csv"
    metrics.write_report_csv(reports, path)
    rows = metrics.read_report_csv(path)
    assert list(rows[0]) == ["system", "MAP@1", "MAP@10", "NDCG", "evaluated_users", "skipped_users", "fallback_users"]
    assert [r["system"] for r in rows] == ["seq", "random"]
    assert rows[0]["MAP@1"] == "1.000000"
