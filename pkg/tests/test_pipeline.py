import csv
import json
import random

import numpy as np
import pytest

from seqrec import pipeline
from seqrec.config import parse_config
from seqrec.ingest import Transaction
from seqrec.metrics import read_report_csv
from seqrec.ranking import estimate_base_popularity
from seqrec.synthetic import planted_pattern_log, write_generic_csv

PLANTED_RUN = """
data_path = log.csv
analysis_date = {date}
seed = {seed}
output_dir = run
learning_rate = 0.02
momentum = 0.9
batch_size = 8
epochs = {epochs}
mf_epochs = 10
ndcg_p = 5
ks = 1,3
"""

# the manifest's run log of wall-clock start/finish times; no artifact holds them
VOLATILE = ("timestamps",)


def make_run(tmp_path, seed=0, epochs=40, n_users=200, extra="", transactions=None):
    """Write a planted log and config under ``tmp_path``; returns (config, planted log)."""
    tmp_path.mkdir(parents=True, exist_ok=True)
    planted = planted_pattern_log(n_users=n_users, seed=seed)
    write_generic_csv(planted.transactions if transactions is None else transactions, tmp_path / "log.csv")
    text = PLANTED_RUN.format(date=planted.analysis_date, seed=seed, epochs=epochs) + extra
    (tmp_path / "run.cfg").write_text(text)
    return parse_config(text, tmp_path), planted


def full_run(cfg):
    pipeline.cmd_prepare(cfg)
    pipeline.cmd_train(cfg)
    return pipeline.cmd_evaluate(cfg)


def stable_manifest(root):
    manifest = json.loads((root / "manifest.json").read_text())
    for key in VOLATILE:
        manifest.pop(key, None)
    return manifest


def artifact_bytes(root):
    """Every file under ``root`` except the manifest, keyed by relative path."""
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def planted_run(tmp_path_factory):
    cfg, planted = make_run(tmp_path_factory.mktemp("planted"))
    reports = full_run(cfg)
    return cfg, planted, reports


# -- prepare --------------------------------------------------------------------------

def toy_log(n_rows=100, seed=0):
    rng = np.random.default_rng(seed)
    rows = ["user_id,item_id,timestamp"]
    for _ in range(n_rows):
        rows.append(f"u{rng.integers(0, 12)},i{rng.integers(0, 8)},{rng.integers(0, 1000)}")
    return "\n".join(rows) + "\n"


def toy_cfg(tmp_path, extra=""):
    (tmp_path / "log.csv").write_text(toy_log())
    return parse_config("data_path = log.csv\nanalysis_date = 500\nseed = 1\noutput_dir = out\n"
                        "epochs = 1\nmf_epochs = 2\nmf_k = 4\n" + extra, tmp_path)


def test_prepare_writes_manifest_and_is_idempotent(tmp_path):
    cfg = toy_cfg(tmp_path)
    prep = pipeline.cmd_prepare(cfg)
    manifest = json.loads((prep.root / "manifest.json").read_text())
    assert sorted(manifest["artifacts"]) == ["sequences.tsv", "split.json", "targets.tsv", "vocabulary.tsv"]
    assert manifest["config_hash"] == cfg.digest()
    assert set(manifest["versions"]) >= {"python", "numpy"}
    first = dict(manifest["artifacts"])
    pipeline.cmd_prepare(cfg)
    assert json.loads((prep.root / "manifest.json").read_text())["artifacts"] == first


def test_prepared_state_round_trips(tmp_path):
    cfg = toy_cfg(tmp_path)
    prep = pipeline.cmd_prepare(cfg)
    again = pipeline.load_prepared(prep.root)
    assert again.sequences == prep.sequences
    assert all(np.array_equal(again.targets[u], prep.targets[u]) for u in prep.targets)
    assert not set(prep.train_users) & set(prep.validation_users)
    assert set(prep.selection_users) <= set(prep.train_users)
    assert len(prep.train_users) == int(0.8 * len(prep.sequences))


def test_prepare_records_rejects(tmp_path):
    cfg = toy_cfg(tmp_path)
    with (tmp_path / "log.csv").open("a") as fh:
        fh.write("u1,,5\n")
    prep = pipeline.cmd_prepare(cfg)
    assert "rejects.tsv" in json.loads((prep.root / "manifest.json").read_text())["artifacts"]


def test_recommendable_from_file_and_train_performance(tmp_path):
    (tmp_path / "items.txt").write_text("i1\ni3\ni1\n")
    prep = pipeline.cmd_prepare(toy_cfg(tmp_path, "recommendable = items.txt\n"))
    assert prep.items == ["i1", "i3"]
    prep = pipeline.cmd_prepare(toy_cfg(tmp_path, "recommendable = train_performance\n"))
    assert prep.items and set(prep.items) <= set(prep.vocab.items)


def test_missing_inputs_are_pipeline_errors(tmp_path):
    cfg = toy_cfg(tmp_path)
    with pytest.raises(pipeline.PipelineError, match="run prepare"):
        pipeline.cmd_train(cfg)
    (tmp_path / "log.csv").unlink()
    with pytest.raises(pipeline.PipelineError, match="not found"):
        pipeline.cmd_prepare(cfg)


def test_evaluate_without_checkpoint_names_the_method(tmp_path):
    cfg = toy_cfg(tmp_path)
    pipeline.cmd_prepare(cfg)
    with pytest.raises(pipeline.PipelineError, match="train --method cf"):
        pipeline.cmd_evaluate(cfg, ["cf"])


def test_toy_end_to_end_layout(tmp_path):
    cfg = toy_cfg(tmp_path)
    full_run(cfg)
    root = cfg.output_dir
    for rel in ("models/seq.ckpt", "models/cf.ckpt", "models/mf.ckpt", "models/ngram.ckpt",
                "models/seq_loss.png", "reports/metrics.csv", "reports/metrics.png",
                "reports/per_item_precision.csv", "reports/per_item_precision.png"):
        assert (root / rel).is_file(), rel
    rows = read_report_csv(root / "reports/metrics.csv")
    assert [r["system"] for r in rows] == ["seq", "cf", "mf", "ngram", "random"]


# -- planted pattern end to end --------------------------------------------------------

def test_evaluate_layout_on_subset(planted_run, tmp_path):
    cfg, _, _ = planted_run
    reports = pipeline.cmd_evaluate(cfg, ["seq", "ngram"])
    assert [r.system for r in reports] == ["seq", "ngram", "random"]
    rows = read_report_csv(cfg.output_dir / "reports/metrics.csv")
    assert len(rows) == 3 and list(rows[0])[:4] == ["system", "MAP@1", "MAP@3", "NDCG"]


def test_planted_ordering(planted_run):
    cfg, _, _ = planted_run
    by = {r.system: r for r in pipeline.cmd_evaluate(cfg)}
    assert by["seq"].map_at[1] > by["ngram"].map_at[1] > by["random"].map_at[1]


def test_evaluate_is_byte_identical_on_rerun(planted_run):
    cfg, _, _ = planted_run
    pipeline.cmd_evaluate(cfg)
    first = (cfg.output_dir / "reports/metrics.csv").read_bytes()
    per_item = (cfg.output_dir / "reports/per_item_precision.csv").read_bytes()
    pipeline.cmd_evaluate(cfg)
    assert (cfg.output_dir / "reports/metrics.csv").read_bytes() == first
    assert (cfg.output_dir / "reports/per_item_precision.csv").read_bytes() == per_item


def test_workers_do_not_change_results(planted_run):
    cfg, _, _ = planted_run
    prep = pipeline.load_prepared(cfg.output_dir)
    users = prep.validation_users
    one = pipeline.Scorer(cfg, prep, "seq").recommend_all(users, 3)
    four = pipeline.Scorer(cfg.with_overrides(workers=4), prep, "seq").recommend_all(users, 3)
    assert [r.items for r in one] == [r.items for r in four]


def test_recommend_k1_and_unknown_users(planted_run):
    cfg, _, _ = planted_run
    prep = pipeline.load_prepared(cfg.output_dir)
    path, unknown = pipeline.cmd_recommend(cfg, "seq", K=1, users=prep.validation_users[:5] + ["ghost"])
    rows = list(csv.DictReader(path.open()))
    assert unknown == ["ghost"]
    assert [r["user_id"] for r in rows] == prep.validation_users[:5]
    assert all(r["rank"] == "1" and r["item_id"] in prep.items for r in rows)


def test_recommend_exclude_seen(planted_run):
    cfg, _, _ = planted_run
    cfg2 = cfg.with_overrides(exclude_seen=True)
    prep = pipeline.load_prepared(cfg.output_dir)
    scorer = pipeline.Scorer(cfg2, prep, "seq")
    for user in prep.validation_users[:10]:
        seen = {prep.vocab.decode(t) for t in prep.sequences[user].tokens}
        rec = scorer.recommend(user, 2)
        if len(seen) < len(prep.items):
            assert not {prep.items[i] for i in rec.items} & seen


def test_cold_user_gets_popularity_fallback(tmp_path):
    cfg, planted = make_run(tmp_path, epochs=1)
    # a user with only unknown items in history
    rows = planted.transactions + [Transaction("cold", "never-seen", planted.analysis_date - 5)]
    write_generic_csv(rows, tmp_path / "log.csv")
    cfg = cfg.with_overrides(min_count=2)
    pipeline.cmd_prepare(cfg)
    pipeline.cmd_train(cfg, ["seq", "ngram"])
    prep = pipeline.load_prepared(cfg.output_dir)
    base = estimate_base_popularity(prep.targets, prep.train_users)
    top = [prep.items[i] for i in np.argsort(-base, kind="stable")[:3]]
    for method in ("seq", "ngram"):
        path, _ = pipeline.cmd_recommend(cfg, method, K=3, users=["cold"])
        rows = list(csv.DictReader(path.open()))
        assert len(rows) == 3 and all(r["fallback"] == "1" for r in rows)
        assert [r["item_id"] for r in rows] == top


# -- ablation ---------------------------------------------------------------------------

def test_ablation_removes_top_item_everywhere(planted_run):
    cfg, planted, _ = planted_run
    reports, removed = pipeline.cmd_ablate(cfg, methods=["seq", "ngram"])
    assert len(removed) == 1
    root = cfg.output_dir / "ablation"
    assert (root / "removed_items.txt").read_text().split() == sorted(removed)
    prep = pipeline.load_prepared(root)
    assert not set(prep.items) & removed
    for method in ("seq", "ngram", "random"):
        scorer = pipeline.Scorer(cfg, prep, method)
        for rec in scorer.recommend_all(prep.validation_users, len(prep.items)):
            assert not {prep.items[i] for i in rec.items} & removed
    assert [r.system for r in reports] == ["seq", "ngram", "random"]


def test_ablation_with_nothing_removed_matches_evaluate(tmp_path):
    cfg, _ = make_run(tmp_path, epochs=3, n_users=60)
    base = {r.system: r for r in full_run(cfg)}
    reports, removed = pipeline.cmd_ablate(cfg, top_fraction=0.0)
    assert removed == frozenset()
    for r in reports:
        assert r.map_at == base[r.system].map_at and r.ndcg == base[r.system].ndcg


# -- leakage guard and determinism -------------------------------------------------------

def test_validation_performance_rows_do_not_reach_checkpoints(tmp_path):
    cfg_a, planted = make_run(tmp_path / "a", epochs=3, n_users=80)
    pipeline.cmd_prepare(cfg_a)
    pipeline.cmd_train(cfg_a)
    val = set(pipeline.load_prepared(cfg_a.output_dir).validation_users)

    # shuffle which items the validation users interact with after the analysis date
    rng = random.Random(5)
    items = sorted({t.item_id for t in planted.transactions})
    changed = [t if (t.user_id not in val or t.timestamp < planted.analysis_date)
               else Transaction(t.user_id, rng.choice(items), t.timestamp)
               for t in planted.transactions]
    assert changed != planted.transactions
    cfg_b, _ = make_run(tmp_path / "b", epochs=3, n_users=80, transactions=changed)
    pipeline.cmd_prepare(cfg_b)
    pipeline.cmd_train(cfg_b)
    for method in ("seq", "cf", "mf", "ngram"):
        a = (cfg_a.output_dir / f"models/{method}.ckpt").read_bytes()
        b = (cfg_b.output_dir / f"models/{method}.ckpt").read_bytes()
        assert a == b, method


def test_end_to_end_determinism(tmp_path):
    runs = []
    for name in ("first", "second"):
        cfg, _ = make_run(tmp_path / name, epochs=3, n_users=60)
        full_run(cfg)
        pipeline.cmd_ablate(cfg, methods=["seq", "ngram"])
        pipeline.cmd_recommend(cfg, "seq", K=2)
        runs.append(cfg.output_dir)
    assert stable_manifest(runs[0]) == stable_manifest(runs[1])
    a, b = artifact_bytes(runs[0]), artifact_bytes(runs[1])
    assert sorted(a) == sorted(b)
    assert [k for k in a if a[k] != b[k]] == []
