"""Transaction loading, temporal/user splits, vocabulary, sequences and targets."""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
UNK = 1
PAD_NAME = "<pad>"
UNK_NAME = "<unk>"

FORMATS = {
    "generic-csv": ["user_id", "item_id", "timestamp"],
    "movielens-ratings": ["userId", "movieId", "rating", "timestamp"],
}


class DegenerateSplitWarning(UserWarning):
    """An analysis date left the observation or performance window empty."""


@dataclass(frozen=True)
class Transaction:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class Reject:
    line_no: int
    reason: str


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return path.open("r", encoding="utf-8", newline="")


def _parse_timestamp(raw: str) -> int:
    value = int(raw.strip())
    if value < 0:
        raise ValueError(f"negative timestamp {value}")
    return value


def load_transactions(path, fmt: str = "generic-csv"):
    """Read a transaction log.

    Returns ``(transactions, rejects)``. Rows that fail validation are not
    dropped silently: each becomes a :class:`Reject` carrying its 1-based file
    line number (the header is line 1). MovieLens ratings are parsed for
    validity and then discarded.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {sorted(FORMATS)}")
    path = Path(path)
    expected = FORMATS[fmt]
    transactions: list[Transaction] = []
    rejects: list[Reject] = []
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise ValueError(f"{path}: header {header!r} does not match {fmt} layout {expected!r}")
        for row in reader:
            line_no = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                rejects.append(Reject(line_no, "empty row"))
                continue
            if len(row) != len(expected):
                rejects.append(Reject(line_no, f"expected {len(expected)} fields, got {len(row)}"))
                continue
            try:
                if fmt == "generic-csv":
                    user, item, ts = row
                else:
                    user, item, rating, ts = row
                    if not math.isfinite(float(rating)):
                        raise ValueError(f"non-finite rating {rating!r}")
                transactions.append(Transaction(user.strip(), item.strip(), _parse_timestamp(ts)))
            except ValueError as exc:
                rejects.append(Reject(line_no, str(exc)))
    log.info("%s: %d transactions, %d rejects", path, len(transactions), len(rejects))
    return transactions, rejects


def write_rejects(rejects, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for r in rejects:
            reason = r.reason.replace("\t", " ").replace("\n", " ")
            fh.write(f"{r.line_no}\t{reason}\n")


def split_by_analysis_date(transactions, analysis_date: int):
    """Partition into ``t < analysis_date`` and ``t >= analysis_date``."""
    observation = [t for t in transactions if t.timestamp < analysis_date]
    performance = [t for t in transactions if t.timestamp >= analysis_date]
    if transactions and not observation:
        warnings.warn(f"analysis date {analysis_date} leaves the observation window empty",
                      DegenerateSplitWarning, stacklevel=2)
    if transactions and not performance:
        warnings.warn(f"analysis date {analysis_date} leaves the performance window empty",
                      DegenerateSplitWarning, stacklevel=2)
    return observation, performance


class ItemVocabulary:
    """Bijection between item ids and dense token indices.

    Tokens 0 and 1 are reserved for padding and unknown items; real items
    start at 2.
    """

    def __init__(self, items):
        items = list(items)
        if len(set(items)) != len(items):
            raise ValueError("duplicate item ids in vocabulary")
        self.item_of: list[str] = [PAD_NAME, UNK_NAME, *items]
        self.token_of: dict[str, int] = {item: tok for tok, item in enumerate(self.item_of) if tok > UNK}

    def __len__(self) -> int:
        return len(self.item_of)

    def __eq__(self, other) -> bool:
        return isinstance(other, ItemVocabulary) and self.item_of == other.item_of

    @property
    def items(self) -> list[str]:
        return self.item_of[2:]

    def encode(self, item_id: str) -> int:
        return self.token_of.get(item_id, UNK)

    def decode(self, token: int) -> str:
        return self.item_of[token]

    def digest(self) -> str:
        h = hashlib.sha256()
        for item in self.item_of:
            h.update(item.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()[:16]

    def to_text(self) -> str:
        return "".join(f"{tok}\t{item}\n" for tok, item in enumerate(self.item_of))

    @classmethod
    def from_text(cls, text: str) -> ItemVocabulary:
        rows = [line.split("\t", 1) for line in text.splitlines() if line]
        if [r[1] for r in rows[:2]] != [PAD_NAME, UNK_NAME]:
            raise ValueError("vocabulary file is missing the reserved tokens")
        for expected, (tok, _) in enumerate(rows):
            if int(tok) != expected:
                raise ValueError(f"vocabulary tokens are not contiguous at {tok}")
        return cls(r[1] for r in rows[2:])


def build_vocabulary(observation, min_count: int = 1) -> ItemVocabulary:
    """Tokenize every item with at least ``min_count`` observation interactions.

    Token order is by descending frequency, ties broken by item id.
    """
    if not observation:
        raise ValueError("cannot build a vocabulary from an empty observation window")
    counts = Counter(t.item_id for t in observation)
    kept = sorted((item for item, n in counts.items() if n >= min_count), key=lambda it: (-counts[it], it))
    return ItemVocabulary(kept)


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    tokens: tuple[int, ...]
    timestamps: tuple[int, ...] = field(default=(), compare=False)
    vocab_hash: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unknown_only(self) -> bool:
        return all(tok == UNK for tok in self.tokens)


def build_sequences(observation, vocabulary: ItemVocabulary, max_seq_len: int = 128):
    """Group observation rows into per-user, time-ordered token sequences.

    Timestamp ties keep input order; only the most recent ``max_seq_len``
    tokens are kept. Keys come back sorted by user id.
    """
    if max_seq_len < 1:
        raise ValueError("max_seq_len must be positive")
    per_user: dict[str, list[Transaction]] = defaultdict(list)
    for t in observation:
        per_user[t.user_id].append(t)
    digest = vocabulary.digest()
    out = {}
    for user in sorted(per_user):
        rows = sorted(per_user[user], key=lambda t: t.timestamp)[-max_seq_len:]
        out[user] = UserSequence(
            user_id=user,
            tokens=tuple(vocabulary.encode(t.item_id) for t in rows),
            timestamps=tuple(t.timestamp for t in rows),
            vocab_hash=digest,
        )
    return out


def build_targets(performance, recommendable_items, users=None):
    """Binary interaction vectors over ``recommendable_items`` (in that order).

    Users listed in ``users`` but absent from ``performance`` get all-zero
    vectors. Items outside the recommendable list are ignored.
    """
    index = {item: k for k, item in enumerate(recommendable_items)}
    hits: dict[str, set[int]] = defaultdict(set)
    for t in performance:
        row = hits[t.user_id]
        k = index.get(t.item_id)
        if k is not None:
            row.add(k)
    keys = sorted(set(hits) if users is None else set(users))
    out = {}
    for user in keys:
        y = np.zeros(len(recommendable_items), dtype=np.int8)
        y[sorted(hits.get(user, ()))] = 1
        out[user] = y
    return out


def split_users(users, train_fraction: float = 0.8, seed: int = 0):
    """Seeded user split; the training side gets ``floor(fraction * n)`` users."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    pool = sorted(set(users))
    if len(pool) < 2:
        raise ValueError(f"need at least 2 users to split, got {len(pool)}")
    n_train = math.floor(round(train_fraction * len(pool), 9))
    if n_train == 0 or n_train == len(pool):
        raise ValueError(f"train_fraction {train_fraction} leaves one side empty for {len(pool)} users")
    order = np.random.default_rng(seed).permutation(len(pool))
    train = sorted(pool[i] for i in order[:n_train])
    validation = sorted(pool[i] for i in order[n_train:])
    return train, validation


def drop_popular_items(transactions, top_fraction: float = 0.10):
    """Remove every row of the most popular items.

    Popularity is the number of distinct users per item; the top
    ``ceil(top_fraction * n_items)`` items are removed, ties broken by item id.
    Returns ``(filtered, removed_items)``.
    """
    if not transactions:
        raise ValueError("cannot rank popularity of an empty log")
    if not 0.0 <= top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in [0, 1], got {top_fraction}")
    users_per_item: dict[str, set[str]] = defaultdict(set)
    for t in transactions:
        users_per_item[t.item_id].add(t.user_id)
    ranked = sorted(users_per_item, key=lambda it: (-len(users_per_item[it]), it))
    n_remove = math.ceil(round(top_fraction * len(ranked), 9))
    removed = frozenset(ranked[:n_remove])
    filtered = [t for t in transactions if t.item_id not in removed]
    return filtered, removed


@dataclass
class DatasetSplit:
    analysis_date: int
    observation: list
    performance: list
    train_users: list
    validation_users: list
    recommendable_items: list

    def __post_init__(self):
        overlap = set(self.train_users) & set(self.validation_users)
        if overlap:
            raise ValueError(f"{len(overlap)} users are in both train and validation")
