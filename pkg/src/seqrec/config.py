"""Experiment configuration: a flat ``key = value`` text file.

Lines starting with ``#`` and blank lines are ignored. Relative paths are
resolved against the directory holding the config file. Every key and its
default is listed in :data:`SCHEMA`; ``seed`` has no default and must be set.

Example::

    data_path = ratings.csv
    data_format = movielens-ratings
    analysis_date = 1998-01-01
    seed = 7
    output_dir = runs/ml
    epochs = 10
"""

from __future__ import annotations

import datetime as dt
import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .ingest import FORMATS
from .model import ModelConfig

METHODS = ("seq", "cf", "mf", "ngram")

# key -> (type, default, help); None default means required
SCHEMA = {
    "data_path": ("path", None, "transaction log (csv, optionally .gz)"),
    "data_format": ("str", "generic-csv", f"one of {', '.join(FORMATS)}"),
    "analysis_date": ("date", None, "epoch seconds or ISO date (UTC); rows at or after it are performance"),
    "performance_note": ("str", "", "free text describing the performance horizon"),
    "seed": ("int", None, "seeds every random choice in the run"),
    "output_dir": ("path", "runs/default", "where artifacts are written"),
    "train_fraction": ("float", 0.8, "share of users used for training"),
    "selection_fraction": ("float", 0.1, "share of training users held out to pick the best epoch"),
    "min_count": ("int", 1, "items seen fewer times in observation map to UNK"),
    "max_seq_len": ("int", 128, "keep the most recent tokens of each history"),
    "recommendable": ("str", "vocabulary",
                      "vocabulary | train_performance | path to a file of item ids (one per line)"),
    "exclude_seen": ("bool", False, "drop items already in a user's history from their lists"),
    "methods": ("list[str]", "seq,cf,mf,ngram", "systems trained, evaluated and ablated"),
    "embed_dim": ("int", 32, ""),
    "hidden_dim": ("int", 64, ""),
    "mlp_widths": ("list[int]", "64,64,48,32", "hidden widths of the head"),
    "learning_rate": ("float", 0.05, ""),
    "batch_size": ("int", 32, ""),
    "epochs": ("int", 20, ""),
    "clip_norm": ("float", 5.0, "global gradient norm cap"),
    "momentum": ("float", 0.0, "0 gives plain SGD"),
    "loss": ("str", "full", "full | positives_only"),
    "forget_bias": ("float", 1.0, ""),
    "cf_neighborhood": ("int", 50, "J most similar items"),
    "cf_binary": ("bool", False, "use 0/1 entries instead of counts"),
    "mf_k": ("int", 16, ""),
    "mf_lr": ("float", 0.01, ""),
    "mf_reg": ("float", 0.05, ""),
    "mf_epochs": ("int", 30, ""),
    "mf_binary": ("bool", True, ""),
    "ngram_n": ("int", 3, ""),
    "ngram_alpha": ("float", 0.1, ""),
    "ngram_backoff": ("bool", True, ""),
    "ks": ("list[int]", "1,10", "MAP cut-offs"),
    "ndcg_p": ("int", 10, "NDCG list length"),
    "ap_normalization": ("str", "hits", "hits | min"),
    "zero_relevant_in_map": ("bool", False, "count users with no relevant item as AP = 0"),
    "recommend_k": ("int", 10, "list length for the recommend command"),
    "top_fraction": ("float", 0.10, "share of most popular items removed by the ablation"),
    "workers": ("int", 1, "threads for per-user scoring"),
}


class ConfigError(ValueError):
    pass


def _parse_date(raw: str) -> int:
    raw = raw.strip()
    if raw.lstrip("-").isdigit():
        return int(raw)
    try:
        d = dt.datetime.fromisoformat(raw)
    except ValueError as exc:
        raise ConfigError(f"analysis_date {raw!r} is neither epoch seconds nor an ISO date") from exc
    if d.tzinfo is None:
        d = d.replace(tzinfo=dt.timezone.utc)
    return int(d.timestamp())


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def _convert(key: str, kind: str, raw, base: Path):
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return _parse_bool(raw)
        if kind == "date":
            return _parse_date(raw)
        if kind == "path":
            p = Path(raw).expanduser()
            return p if p.is_absolute() else (base / p)
        if kind == "list[int]":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "list[str]":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    data_path: Path
    data_format: str
    analysis_date: int
    performance_note: str
    seed: int
    output_dir: Path
    train_fraction: float
    selection_fraction: float
    min_count: int
    max_seq_len: int
    recommendable: str
    exclude_seen: bool
    methods: tuple
    embed_dim: int
    hidden_dim: int
    mlp_widths: tuple
    learning_rate: float
    batch_size: int
    epochs: int
    clip_norm: float
    momentum: float
    loss: str
    forget_bias: float
    cf_neighborhood: int
    cf_binary: bool
    mf_k: int
    mf_lr: float
    mf_reg: float
    mf_epochs: int
    mf_binary: bool
    ngram_n: int
    ngram_alpha: float
    ngram_backoff: bool
    ks: tuple
    ndcg_p: int
    ap_normalization: str
    zero_relevant_in_map: bool
    recommend_k: int
    top_fraction: float
    workers: int
    source_text: str = ""

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim, hidden_dim=self.hidden_dim, mlp_widths=tuple(self.mlp_widths),
            learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            clip_norm=self.clip_norm, momentum=self.momentum, loss=self.loss, forget_bias=self.forget_bias,
        )

    def with_overrides(self, **values) -> ExperimentConfig:
        clean = {k: v for k, v in values.items() if v is not None}
        unknown = set(clean) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown override(s): {', '.join(sorted(unknown))}")
        cfg = replace(self, **clean)
        cfg.validate()
        return cfg

    def digest(self) -> str:
        """Hash of the effective settings (paths by name, not location)."""
        parts = []
        for f in fields(self):
            if f.name in ("source_text", "output_dir"):
                continue
            v = getattr(self, f.name)
            if isinstance(v, Path):
                v = v.name
            parts.append(f"{f.name}={v!r}")
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]

    def validate(self) -> None:
        problems = []
        if self.data_format not in FORMATS:
            problems.append(f"data_format must be one of {', '.join(FORMATS)}")
        if not 0.0 < self.train_fraction < 1.0:
            problems.append("train_fraction must be in (0, 1)")
        if not 0.0 <= self.selection_fraction < 1.0:
            problems.append("selection_fraction must be in [0, 1)")
        bad_methods = set(self.methods) - set(METHODS)
        if bad_methods or not self.methods:
            problems.append(f"methods must be a non-empty subset of {', '.join(METHODS)}")
        if not self.ks or any(k < 1 for k in self.ks):
            problems.append("ks must list positive cut-offs")
        if self.ndcg_p < 1 or self.recommend_k < 1:
            problems.append("ndcg_p and recommend_k must be >= 1")
        if self.ap_normalization not in ("hits", "min"):
            problems.append("ap_normalization must be hits or min")
        if not 0.0 <= self.top_fraction <= 1.0:
            problems.append("top_fraction must be in [0, 1]")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        problems += self.model_config().problems()
        if problems:
            raise ConfigError("; ".join(problems))


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    base = Path(base_dir)
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {n}: expected 'key = value', got {stripped!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        raw[key] = value
    values = {}
    for key, (kind, default, _) in SCHEMA.items():
        if key in raw:
            values[key] = _convert(key, kind, raw[key], base)
        elif default is None:
            raise ConfigError(f"missing required key {key!r}")
        else:
            values[key] = _convert(key, kind, default, base) if isinstance(default, str) and kind != "str" else default
    cfg = ExperimentConfig(**values, source_text=text)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)


def describe_schema() -> str:
    lines = []
    for key, (kind, default, help_text) in SCHEMA.items():
        shown = "(required)" if default is None else f"[{default}]"
        lines.append(f"{key:<22}{kind:<11}{shown:<20}{help_text}".rstrip())
    return "\n".join(lines)
