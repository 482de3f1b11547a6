"""Config-driven pipeline: prepare, train, evaluate, ablate, recommend.

Every command reads and writes files under ``config.output_dir``::

    manifest.json
    vocabulary.tsv  sequences.tsv  targets.tsv  split.json  [rejects.tsv]
    models/         <method>.ckpt, seq_train.csv, mf_train.csv, seq_loss.png
    reports/        metrics.csv, metrics.png, per_item_precision.csv/.png
    recommendations/<method>_top<K>.csv
    ablation/       the same layout for the popularity-removed regime
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import math
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, ingest, metrics, plots, ranking
from .checkpoint import CheckpointError
from .config import ExperimentConfig
from .model import SequenceModel, TrainReport, forward, init_model, train

log = logging.getLogger(__name__)

PREPARED = ("vocabulary.tsv", "sequences.tsv", "targets.tsv", "split.json")
RANDOM = "random"


class PipelineError(RuntimeError):
    pass


# -- manifest ------------------------------------------------------------------------

def file_hash(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _versions() -> dict:
    import matplotlib
    import numba
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "matplotlib": matplotlib.__version__}


def update_manifest(root: Path, cfg: ExperimentConfig, command: str, produced, started: str) -> dict:
    """Record ``produced`` files (with content hashes) in ``root/manifest.json``."""
    path = root / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest["config_hash"] = cfg.digest()
    manifest["data_hash"] = file_hash(cfg.data_path)
    manifest["versions"] = _versions()
    artifacts = manifest.setdefault("artifacts", {})
    for p in produced:
        artifacts[Path(p).relative_to(root).as_posix()] = file_hash(p)
    manifest["artifacts"] = dict(sorted(artifacts.items()))
    manifest.setdefault("timestamps", {})[command] = {"started": started, "finished": _now()}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- prepared state -------------------------------------------------------------------

@dataclass
class Prepared:
    root: Path
    vocab: ingest.ItemVocabulary
    sequences: dict
    targets: dict
    train_users: list
    selection_users: list
    validation_users: list
    items: list  # the recommendable set I'
    analysis_date: int

    @property
    def fit_users(self) -> list:
        held = set(self.selection_users)
        return [u for u in self.train_users if u not in held]

    def item_tokens(self) -> np.ndarray:
        return np.array([self.vocab.token_of.get(it, -1) for it in self.items], dtype=np.int64)

    def judgments(self) -> dict:
        return {u: {self.items[k] for k in np.flatnonzero(self.targets[u])} for u in self.validation_users}


def _write_sequences(seqs: dict, path: Path) -> None:
    with path.open("w") as fh:
        for user, s in seqs.items():
            fh.write(f"{user}\t{' '.join(map(str, s.tokens))}\t{' '.join(map(str, s.timestamps))}\n")


def _read_sequences(path: Path, digest: str) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        user, toks, stamps = line.split("\t")
        out[user] = ingest.UserSequence(user, tuple(int(t) for t in toks.split()),
                                        tuple(int(t) for t in stamps.split()), digest)
    return out


def _write_targets(targets: dict, items: list, path: Path) -> None:
    with path.open("w") as fh:
        for user, y in targets.items():
            fh.write(f"{user}\t{' '.join(items[k] for k in np.flatnonzero(y))}\n")


def _read_targets(path: Path, items: list) -> dict:
    index = {it: k for k, it in enumerate(items)}
    out = {}
    for line in path.read_text().splitlines():
        user, rest = line.split("\t")
        y = np.zeros(len(items), dtype=np.int8)
        y[[index[it] for it in rest.split()]] = 1
        out[user] = y
    return out


def _select_items(cfg: ExperimentConfig, vocab, performance, train_users) -> list:
    mode = cfg.recommendable
    if mode == "vocabulary":
        return vocab.items
    if mode == "train_performance":
        train = set(train_users)
        seen = {t.item_id for t in performance if t.user_id in train}
        return [it for it in vocab.items if it in seen]
    path = Path(mode)
    if not path.is_absolute():
        path = Path(cfg.data_path).parent / path
    if not path.is_file():
        raise PipelineError(f"recommendable item list not found: {path}")
    listed = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    return list(dict.fromkeys(listed))


def _selection(train_users: list, fraction: float, seed: int) -> list:
    n = math.floor(round(fraction * len(train_users), 9))
    if n == 0:
        return []
    if n >= len(train_users):
        raise PipelineError("selection_fraction leaves no users to fit on")
    order = np.random.default_rng([seed, 2]).permutation(len(train_users))
    return sorted(train_users[i] for i in order[:n])


def _write_prepared(root: Path, vocab, seqs, targets, items, split: dict) -> list[Path]:
    root.mkdir(parents=True, exist_ok=True)
    paths = [root / name for name in PREPARED]
    paths[0].write_text(vocab.to_text())
    _write_sequences(seqs, paths[1])
    _write_targets(targets, items, paths[2])
    paths[3].write_text(json.dumps(split, indent=2, sort_keys=True) + "\n")
    return paths


def load_prepared(root) -> Prepared:
    root = Path(root)
    for name in PREPARED:
        if not (root / name).is_file():
            raise PipelineError(f"missing prepared artifact {root / name}; run prepare first")
    vocab = ingest.ItemVocabulary.from_text((root / "vocabulary.tsv").read_text())
    split = json.loads((root / "split.json").read_text())
    items = split["recommendable_items"]
    return Prepared(
        root=root, vocab=vocab,
        sequences=_read_sequences(root / "sequences.tsv", vocab.digest()),
        targets=_read_targets(root / "targets.tsv", items),
        train_users=split["train_users"], selection_users=split["selection_users"],
        validation_users=split["validation_users"], items=items, analysis_date=split["analysis_date"],
    )


def _load_log(cfg: ExperimentConfig):
    if not Path(cfg.data_path).is_file():
        raise PipelineError(f"data file not found: {cfg.data_path}")
    try:
        return ingest.load_transactions(cfg.data_path, cfg.data_format)
    except ValueError as exc:
        raise PipelineError(f"{cfg.data_path}: {exc}") from exc


def cmd_prepare(cfg: ExperimentConfig) -> Prepared:
    started = _now()
    root = Path(cfg.output_dir)
    rows, rejects = _load_log(cfg)
    if not rows:
        raise PipelineError(f"{cfg.data_path}: no valid transactions")
    observation, performance = ingest.split_by_analysis_date(rows, cfg.analysis_date)
    if not observation:
        raise PipelineError(f"no transactions before analysis_date {cfg.analysis_date}")
    vocab = ingest.build_vocabulary(observation, cfg.min_count)
    seqs = ingest.build_sequences(observation, vocab, cfg.max_seq_len)
    try:
        train_users, validation_users = ingest.split_users(list(seqs), cfg.train_fraction, cfg.seed)
    except ValueError as exc:
        raise PipelineError(str(exc)) from exc
    items = _select_items(cfg, vocab, performance, train_users)
    if not items:
        raise PipelineError("the recommendable item set is empty")
    targets = ingest.build_targets(performance, items, seqs)
    split = {
        "analysis_date": cfg.analysis_date,
        "train_users": train_users,
        "selection_users": _selection(train_users, cfg.selection_fraction, cfg.seed),
        "validation_users": validation_users,
        "recommendable_items": items,
        "performance_only_users": len({t.user_id for t in performance} - set(seqs)),
    }
    produced = _write_prepared(root, vocab, seqs, targets, items, split)
    if rejects:
        ingest.write_rejects(rejects, root / "rejects.tsv")
        produced.append(root / "rejects.tsv")
        log.warning("%d malformed rows skipped, see %s", len(rejects), root / "rejects.tsv")
    update_manifest(root, cfg, "prepare", produced, started)
    log.info("prepared %d users (%d train, %d validation), %d tokens, %d recommendable items",
             len(seqs), len(train_users), len(validation_users), len(vocab), len(items))
    return load_prepared(root)


# -- training ------------------------------------------------------------------------

def _checkpoint_path(root: Path, method: str) -> Path:
    return root / "models" / f"{method}.ckpt"


def _train_method(cfg: ExperimentConfig, prep: Prepared, method: str) -> list[Path]:
    models = prep.root / "models"
    models.mkdir(parents=True, exist_ok=True)
    digest = prep.vocab.digest()
    ckpt = _checkpoint_path(prep.root, method)
    if method == "seq":
        fit = [u for u in prep.fit_users if prep.sequences[u].tokens]
        sel = [u for u in prep.selection_users if prep.sequences[u].tokens]
        model = init_model(len(prep.vocab), len(prep.items), cfg.model_config(), cfg.seed, digest)
        model, report = train(model, prep.sequences, prep.targets, fit, sel)
        model.save(ckpt)
        report.write_csv(models / "seq_train.csv")
        plots.loss_curve(report, models / "seq_loss.png")
        drop = 1 - report.train_loss[-1] / report.train_loss[0] if report.train_loss[0] else 0.0
        log.info("seq: best epoch %d, training loss down %.1f%%", report.best_epoch, 100 * drop)
        return [ckpt, models / "seq_train.csv", models / "seq_loss.png"]
    train_users = [u for u in prep.train_users if u in prep.sequences]
    if method == "cf":
        matrix = baselines.build_interaction_matrix(prep.sequences, train_users, len(prep.vocab), cfg.cf_binary)
        baselines.ItemKNN.fit(matrix, cfg.cf_neighborhood).save(ckpt, digest)
        return [ckpt]
    if method == "mf":
        matrix = baselines.build_interaction_matrix(prep.sequences, train_users, len(prep.vocab), cfg.mf_binary)
        k = min(cfg.mf_k, *matrix.matrix.shape)
        if k != cfg.mf_k:
            log.warning("mf: k lowered from %d to %d to fit a %dx%d matrix", cfg.mf_k, k, *matrix.matrix.shape)
        factors = baselines.mf_train(matrix, k, cfg.mf_lr, cfg.mf_reg, cfg.mf_epochs, cfg.seed)
        factors.save(ckpt, digest)
        with (models / "mf_train.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "observed_mse"])
            for epoch, mse in enumerate(factors.history, start=1):
                w.writerow([epoch, repr(mse)])
        log.info("mf: observed-entry MSE %.6f after %d epochs", baselines.observed_mse(factors, matrix), cfg.mf_epochs)
        return [ckpt, models / "mf_train.csv"]
    if method == "ngram":
        table = baselines.ngram_train([prep.sequences[u] for u in train_users], cfg.ngram_n, cfg.ngram_alpha,
                                      len(prep.vocab), cfg.ngram_backoff)
        table.save(ckpt, digest)
        log.info("ngram: %d contexts counted", len(table.counts))
        return [ckpt]
    raise PipelineError(f"unknown method {method!r}")


def cmd_train(cfg: ExperimentConfig, methods=None, root=None) -> list[Path]:
    started = _now()
    prep = load_prepared(root or cfg.output_dir)
    produced = []
    for method in methods or cfg.methods:
        produced += _train_method(cfg, prep, method)
    update_manifest(Path(root or cfg.output_dir), cfg, "train", produced, started)
    return produced


# -- scoring -------------------------------------------------------------------------

def _load_system(prep: Prepared, method: str):
    path = _checkpoint_path(prep.root, method)
    if not path.is_file():
        raise PipelineError(f"missing checkpoint {path}; run train --method {method} first")
    digest = prep.vocab.digest()
    try:
        if method == "seq":
            return SequenceModel.load(path, vocab_hash=digest)
        if method == "cf":
            return baselines.ItemKNN.load(path, vocab_hash=digest)
        if method == "mf":
            return baselines.LatentFactors.load(path, vocab_hash=digest)
        if method == "ngram":
            return baselines.NGramTable.load(path, vocab_hash=digest)
    except CheckpointError as exc:
        raise PipelineError(f"{path}: {exc}") from exc
    raise PipelineError(f"unknown method {method!r}")


class Scorer:
    """Turns one system's checkpoint into per-user recommendations."""

    def __init__(self, cfg: ExperimentConfig, prep: Prepared, method: str, allowed=None):
        self.cfg = cfg
        self.prep = prep
        self.method = method
        self.model = None if method == RANDOM else _load_system(prep, method)
        self.base = ranking.estimate_base_popularity(prep.targets, prep.train_users)
        self.tokens = prep.item_tokens()
        self.allowed = np.arange(len(prep.items)) if allowed is None else np.asarray(allowed, dtype=np.int64)
        self.user_pos = {u: n for n, u in enumerate(sorted(prep.sequences))}

    def _allowed_for(self, seq) -> np.ndarray:
        if not self.cfg.exclude_seen:
            return self.allowed
        seen = set(seq.tokens)
        keep = [i for i in self.allowed if self.tokens[i] not in seen]
        return np.asarray(keep or self.allowed, dtype=np.int64)

    def recommend(self, user: str, K: int) -> ranking.Recommendation:
        seq = self.prep.sequences.get(user) or ingest.UserSequence(user, (), (), self.prep.vocab.digest())
        allowed = self._allowed_for(seq)
        if self.method == RANDOM:
            rng = np.random.default_rng([self.cfg.seed, 3, self.user_pos.get(user, len(self.user_pos))])
            scores = np.zeros(len(self.prep.items))
            scores[allowed] = rng.permutation(len(allowed)) + 1.0
            return ranking.top_k(scores, K, allowed, user_id=user)
        if seq.unknown_only:
            return ranking.top_k(np.ones(len(self.prep.items)), K, allowed, user_id=user,
                                 probabilities=self.base, fallback_popularity=self.base)
        if self.method == "seq":
            P = forward(self.model, seq)
            return ranking.top_k(ranking.uplift(P, self.base), K, allowed, user_id=user, probabilities=P)
        scores = baselines.baseline_scores(self.method, self.model, seq, self.tokens)
        return ranking.top_k(scores, K, allowed, user_id=user)

    def recommend_all(self, users, K: int) -> list[ranking.Recommendation]:
        users = list(users)
        if self.cfg.workers <= 1:
            return [self.recommend(u, K) for u in users]
        with ThreadPoolExecutor(self.cfg.workers) as pool:
            return list(pool.map(lambda u: self.recommend(u, K), users))


# -- evaluation ----------------------------------------------------------------------

def _per_item_rows(prep: Prepared, recs: dict, judgments: dict) -> list[dict]:
    rows = []
    for k, item in enumerate(prep.items):
        row = {"item_id": item}
        for system, per_user in recs.items():
            picked = [u for u, r in per_user.items() if r.items and r.items[0] == k]
            hits = sum(item in judgments[u] for u in picked)
            row[f"{system}_top1_users"] = len(picked)
            row[system] = hits / len(picked) if picked else float("nan")
        rows.append(row)
    return rows


def _write_rows(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def evaluate_prepared(cfg: ExperimentConfig, prep: Prepared, judgments: dict, methods, out_dir: Path,
                      title: str = "validation users"):
    """Score every method on ``judgments``' users; returns (reports, produced paths)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    depth = min(max(max(cfg.ks), cfg.ndcg_p), len(prep.items))
    users = sorted(judgments)
    systems = [*methods, RANDOM]
    recs = {}
    for method in systems:
        scorer = Scorer(cfg, prep, method)
        recs[method] = dict(zip(users, scorer.recommend_all(users, depth)))
    rankings = {m: {u: [prep.items[i] for i in r.items] for u, r in per_user.items()} for m, per_user in recs.items()}
    fallback = {m: [u for u, r in per_user.items() if r.fallback] for m, per_user in recs.items()}
    reports = metrics.evaluate_system(rankings, judgments, cfg.ks, cfg.ndcg_p,
                                      ap_normalization=cfg.ap_normalization,
                                      zero_relevant_in_map=cfg.zero_relevant_in_map, fallback_users=fallback)
    csv_path = out_dir / "metrics.csv"
    metrics.write_report_csv(reports, csv_path, cfg.ks)
    item_rows = _per_item_rows(prep, recs, judgments)
    _write_rows(item_rows, out_dir / "per_item_precision.csv")
    produced = [csv_path, out_dir / "per_item_precision.csv",
                plots.metric_bars(reports, cfg.ks, out_dir / "metrics.png", title),
                plots.per_item_precision(item_rows, out_dir / "per_item_precision.png", systems)]
    return reports, produced


def cmd_evaluate(cfg: ExperimentConfig, methods=None):
    started = _now()
    prep = load_prepared(cfg.output_dir)
    reports, produced = evaluate_prepared(cfg, prep, prep.judgments(), methods or cfg.methods,
                                          prep.root / "reports")
    update_manifest(prep.root, cfg, "evaluate", produced, started)
    return reports


# -- ablation ------------------------------------------------------------------------

def cmd_ablate(cfg: ExperimentConfig, methods=None, top_fraction: float | None = None):
    """Remove the most popular items from training, retrain, evaluate on the original judgments."""
    started = _now()
    fraction = cfg.top_fraction if top_fraction is None else top_fraction
    base = load_prepared(cfg.output_dir)
    rows, _ = _load_log(cfg)
    observation, performance = ingest.split_by_analysis_date(rows, cfg.analysis_date)
    train = set(base.train_users)
    training_rows = observation + [t for t in performance if t.user_id in train]
    _, removed = ingest.drop_popular_items(training_rows, fraction)
    log.info("ablation removes %d items: %s", len(removed), ", ".join(sorted(removed)))

    root = base.root / "ablation"
    kept_obs = [t for t in observation if t.item_id not in removed]
    if not kept_obs:
        raise PipelineError("ablation removed every observation row")
    vocab = ingest.build_vocabulary(kept_obs, cfg.min_count)
    seqs = ingest.build_sequences(kept_obs, vocab, cfg.max_seq_len)
    for user in base.sequences:  # users whose whole history was removed become cold
        seqs.setdefault(user, ingest.UserSequence(user, (), (), vocab.digest()))
    seqs = dict(sorted(seqs.items()))
    items = [it for it in base.items if it not in removed]
    if not items:
        raise PipelineError("ablation removed every recommendable item")
    targets = ingest.build_targets([t for t in performance if t.item_id not in removed], items, seqs)
    split = {
        "analysis_date": cfg.analysis_date,
        "train_users": base.train_users,
        "selection_users": base.selection_users,
        "validation_users": base.validation_users,
        "recommendable_items": items,
        "removed_items": sorted(removed),
        "top_fraction": fraction,
    }
    produced = _write_prepared(root, vocab, seqs, targets, items, split)
    removed_path = root / "removed_items.txt"
    removed_path.write_text("".join(f"{it}\n" for it in sorted(removed)))
    produced.append(removed_path)
    prep = load_prepared(root)
    methods = list(methods or cfg.methods)
    for method in methods:
        produced += _train_method(cfg, prep, method)
    reports, paths = evaluate_prepared(cfg, prep, base.judgments(), methods, root / "reports",
                                       f"top {fraction:.0%} popular items removed")
    produced += paths
    update_manifest(base.root, cfg, "ablate", produced, started)
    return reports, removed


# -- recommendation ------------------------------------------------------------------

def cmd_recommend(cfg: ExperimentConfig, method: str, K: int | None = None, users=None, root=None):
    """Write top-K lists; returns (csv path, unknown user ids)."""
    started = _now()
    prep = load_prepared(root or cfg.output_dir)
    K = K or cfg.recommend_k
    if users is None:
        wanted, unknown = list(prep.validation_users), []
    else:
        wanted = [u for u in users if u in prep.sequences]
        unknown = [u for u in users if u not in prep.sequences]
        for u in unknown:
            log.warning("unknown user %r skipped", u)
    scorer = Scorer(cfg, prep, method)
    recs = scorer.recommend_all(wanted, K)
    out = prep.root / "recommendations"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{method}_top{K}.csv"
    ranking.write_recommendations(recs, prep.items, path)
    update_manifest(Path(root or cfg.output_dir), cfg, "recommend", [path], started)
    return path, unknown
