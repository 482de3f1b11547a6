"""Comparison systems: item-item collaborative filtering, matrix factorization, n-grams.

All three work in token space (the item vocabulary) and are fit on
observation-window data only. :func:`baseline_scores` adapts each of them to
a score vector over the recommendable items.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CF_FLOOR = 0.0
MF_FLOOR = -1e12
NGRAM_FLOOR = 0.0


# -- interaction matrix ----------------------------------------------------------

@dataclass
class InteractionMatrix:
    """Users x tokens, entries are interaction counts (or 0/1 in binary mode)."""

    matrix: sp.csr_matrix
    users: list
    binary: bool = False

    @property
    def n_items(self) -> int:
        return self.matrix.shape[1]

    def row(self, user) -> np.ndarray:
        return self.matrix[self.users.index(user)].toarray().ravel()


def user_row(tokens, n_items: int, binary: bool = False) -> np.ndarray:
    row = np.bincount(np.asarray(tokens, dtype=np.int64), minlength=n_items).astype(np.float64)
    return np.minimum(row, 1.0) if binary else row


def build_interaction_matrix(sequences: dict, users, n_items: int, binary: bool = False) -> InteractionMatrix:
    users = list(users)
    rows = [user_row(sequences[u].tokens, n_items, binary) for u in users]
    mat = sp.csr_matrix(np.vstack(rows)) if rows else sp.csr_matrix((0, n_items))
    return InteractionMatrix(mat, users, binary)


# -- collaborative filtering ----------------------------------------------------------

def _cosine_all(matrix: sp.csr_matrix) -> np.ndarray:
    gram = (matrix.T @ matrix).toarray()
    norms = np.sqrt(np.diag(gram))
    denom = np.outer(norms, norms)
    with np.errstate(divide="ignore", invalid="ignore"):
        sim = np.where(denom > 0, gram / np.where(denom > 0, denom, 1.0), 0.0)
    return sim


def item_similarity(matrix: InteractionMatrix, i: int, j: int) -> float:
    """Cosine of item columns ``i`` and ``j``; 0 when either column is empty."""
    a = matrix.matrix[:, i].toarray().ravel()
    b = matrix.matrix[:, j].toarray().ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _neighbourhood(sim_row: np.ndarray, i: int, size: int):
    cand = np.flatnonzero(sim_row > 0)
    cand = cand[cand != i]
    cand = cand[np.lexsort((cand, -sim_row[cand]))][:size]
    return cand, sim_row[cand]


def cf_predict(matrix: InteractionMatrix, row, i: int, neighborhood: int = 50):
    """Similarity-weighted average of a user's entries over item ``i``'s neighbourhood.

    The neighbourhood is the ``neighborhood`` items most similar to ``i``
    (positive cosine only, ``i`` itself excluded); the user's entries on those
    items are averaged, zeros included. ``row`` is the user's dense row.
    Returns ``(estimate, has_evidence)``; with no positive neighbour the
    estimate is 0 and ``has_evidence`` is False.
    """
    row = np.asarray(row, dtype=np.float64)
    if not np.any(row):
        raise ValueError("collaborative filtering needs a user with at least one interaction")
    if neighborhood < 1:
        raise ValueError("neighborhood must be >= 1")
    sims = np.array([item_similarity(matrix, i, j) for j in range(matrix.n_items)])
    idx, w = _neighbourhood(sims, i, neighborhood)
    if w.sum() <= 0:
        return 0.0, False
    return float(row[idx] @ w / w.sum()), True


@dataclass
class ItemKNN:
    neighbors: np.ndarray  # (n_items, J) token ids, -1 padded
    weights: np.ndarray  # (n_items, J), 0 where padded
    binary: bool = False

    @classmethod
    def fit(cls, matrix: InteractionMatrix, neighborhood: int = 50) -> ItemKNN:
        if neighborhood < 1:
            raise ValueError("neighborhood must be >= 1")
        sim = _cosine_all(matrix.matrix)
        n = matrix.n_items
        nbrs = np.full((n, neighborhood), -1, dtype=np.int64)
        wts = np.zeros((n, neighborhood))
        for i in range(n):
            idx, w = _neighbourhood(sim[i], i, neighborhood)
            nbrs[i, : len(idx)] = idx
            wts[i, : len(idx)] = w
        return cls(nbrs, wts, matrix.binary)

    def score(self, row):
        """Estimates for every token plus an evidence mask."""
        row = np.asarray(row, dtype=np.float64)
        gathered = np.where(self.neighbors >= 0, row[np.maximum(self.neighbors, 0)], 0.0)
        num = (gathered * self.weights).sum(axis=1)
        den = self.weights.sum(axis=1)
        evidence = den > 0
        est = np.where(evidence, num / np.where(evidence, den, 1.0), CF_FLOOR)
        return est, evidence

    def save(self, path, vocab_hash: str) -> None:
        save_checkpoint(path, "cf", {"neighbors": self.neighbors, "weights": self.weights},
                        {"binary": self.binary}, vocab_hash)

    @classmethod
    def load(cls, path, vocab_hash: str | None = None) -> ItemKNN:
        arrays, meta = load_checkpoint(path, kind="cf", vocab_hash=vocab_hash)
        return cls(arrays["neighbors"], arrays["weights"], bool(meta["binary"]))


# -- matrix factorization -------------------------------------------------------------

@numba.njit(cache=True)
def _sgd_epoch(P, Q, users, items, values, order, lr, reg):
    k = P.shape[1]
    for n in order:
        u = users[n]
        i = items[n]
        err = values[n]
        for f in range(k):
            err -= P[u, f] * Q[i, f]
        for f in range(k):
            pu = P[u, f]
            qi = Q[i, f]
            P[u, f] = pu + lr * (err * qi - reg * pu)
            Q[i, f] = qi + lr * (err * pu - reg * qi)


@dataclass
class LatentFactors:
    P: np.ndarray  # users x k
    Q: np.ndarray  # items x k
    users: list
    reg: float = 0.0
    history: list = field(default_factory=list)
    binary: bool = False

    @property
    def k(self) -> int:
        return self.Q.shape[1]

    def user_index(self, user):
        try:
            return self.users.index(user)
        except ValueError:
            return None

    def fold_in(self, row) -> np.ndarray | None:
        """Ridge-fit a user vector to ``row`` with the item factors held fixed."""
        row = np.asarray(row, dtype=np.float64)
        obs = np.flatnonzero(row)
        if obs.size == 0:
            return None
        Qo = self.Q[obs]
        lhs = Qo.T @ Qo + self.reg * obs.size * np.eye(self.k)
        return np.linalg.lstsq(lhs, Qo.T @ row[obs], rcond=None)[0]

    def save(self, path, vocab_hash: str) -> None:
        save_checkpoint(path, "mf", {"P": self.P, "Q": self.Q},
                        {"users": self.users, "reg": self.reg, "history": self.history, "binary": self.binary}, vocab_hash)

    @classmethod
    def load(cls, path, vocab_hash: str | None = None) -> LatentFactors:
        arrays, meta = load_checkpoint(path, kind="mf", vocab_hash=vocab_hash)
        return cls(arrays["P"], arrays["Q"], list(meta["users"]), meta["reg"], list(meta["history"]), bool(meta["binary"]))


def observed_mse(factors: LatentFactors, matrix: InteractionMatrix) -> float:
    coo = matrix.matrix.tocoo()
    pred = np.einsum("nk,nk->n", factors.P[coo.row], factors.Q[coo.col])
    return float(np.mean((coo.data - pred) ** 2))


def mf_train(matrix: InteractionMatrix, k: int = 16, lr: float = 0.01, reg: float = 0.05,
             epochs: int = 30, seed: int = 0, init_scale: float = 0.1) -> LatentFactors:
    """Per-entry SGD on observed-entry squared error plus L2 on both factor rows.

    ``history`` holds the observed-entry MSE after each epoch.
    """
    n_users, n_items = matrix.matrix.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > min(n_users, n_items):
        raise ValueError(f"k={k} exceeds min(|U|, |I|) = {min(n_users, n_items)}")
    coo = matrix.matrix.tocoo()
    if coo.nnz == 0:
        raise ValueError("matrix has no observed entries")
    rng = np.random.default_rng(seed)
    factors = LatentFactors(rng.normal(0.0, init_scale, (n_users, k)), rng.normal(0.0, init_scale, (n_items, k)),
                            list(matrix.users), reg, binary=matrix.binary)
    users = coo.row.astype(np.int64)
    items = coo.col.astype(np.int64)
    values = coo.data.astype(np.float64)
    for epoch in range(epochs):
        order = rng.permutation(coo.nnz)
        _sgd_epoch(factors.P, factors.Q, users, items, values, order, lr, reg)
        mse = observed_mse(factors, matrix)
        if not np.isfinite(mse) or mse > 1e6:
            raise FloatingPointError(f"matrix factorization diverged at epoch {epoch + 1} (mse={mse:.3g}); lower the learning rate")
        factors.history.append(mse)
    return factors


def mf_predict(factors: LatentFactors, u, i: int):
    """``q_i . p_u``, or ``None`` when the user or item is unknown."""
    ui = factors.user_index(u) if not isinstance(u, (int, np.integer)) else int(u)
    if ui is None or not 0 <= ui < factors.P.shape[0] or not 0 <= i < factors.Q.shape[0]:
        return None
    return float(factors.Q[i] @ factors.P[ui])


# -- n-grams -----------------------------------------------------------------------------

@dataclass
class NGramTable:
    n: int
    alpha: float
    vocab_size: int
    counts: dict = field(default_factory=dict)  # context tuple -> Counter(next token)
    backoff: bool = True

    def context_for(self, history) -> tuple:
        ctx = tuple(history[len(history) - (self.n - 1):]) if self.n > 1 else ()
        if self.backoff:
            while ctx and ctx not in self.counts:
                ctx = ctx[1:]
        return ctx

    def save(self, path, vocab_hash: str) -> None:
        rows = sorted([list(ctx), nxt, c] for ctx, ctr in self.counts.items() for nxt, c in ctr.items())
        meta = {"n": self.n, "alpha": self.alpha, "vocab_size": self.vocab_size, "backoff": self.backoff,
                "counts": rows}
        save_checkpoint(path, "ngram", {}, meta, vocab_hash)

    @classmethod
    def load(cls, path, vocab_hash: str | None = None) -> NGramTable:
        _, meta = load_checkpoint(path, kind="ngram", vocab_hash=vocab_hash)
        counts: dict = defaultdict(Counter)
        for ctx, nxt, c in meta["counts"]:
            counts[tuple(ctx)][nxt] = c
        return cls(meta["n"], meta["alpha"], meta["vocab_size"], dict(counts), meta["backoff"])


def ngram_train(sequences, n: int = 3, alpha: float = 0.1, vocab_size: int | None = None,
                backoff: bool = True) -> NGramTable:
    """Count next-token events for every context length ``0..n-1``."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    token_seqs = [tuple(getattr(s, "tokens", s)) for s in sequences]
    if vocab_size is None:
        vocab_size = 1 + max((max(s) for s in token_seqs if s), default=0)
    counts: dict = defaultdict(Counter)
    for seq in token_seqs:
        for pos, tok in enumerate(seq):
            for m in range(0, min(n - 1, pos) + 1):
                counts[seq[pos - m : pos]][tok] += 1
    return NGramTable(n, alpha, vocab_size, dict(counts), backoff)


def ngram_predict(table: NGramTable, context) -> np.ndarray:
    """``P(token | context) = (count + alpha) / (total + alpha * |V|)`` over all tokens.

    An unseen context with ``alpha == 0`` has no mass to spread and gets the
    uniform distribution.
    """
    ctx = table.context_for(tuple(context))
    counter = table.counts.get(ctx, {})
    vec = np.zeros(table.vocab_size)
    for tok, c in counter.items():
        vec[tok] = c
    total = vec.sum()
    denom = total + table.alpha * table.vocab_size
    if denom == 0:
        return np.full(table.vocab_size, 1.0 / table.vocab_size)
    return (vec + table.alpha) / denom


# -- uniform adapter ----------------------------------------------------------------------

def baseline_scores(method: str, model, sequence, item_tokens) -> np.ndarray:
    """Scores over the recommendable items (``item_tokens``; -1 marks unknown items).

    Higher is better; items without evidence get the method's floor.
    """
    if model is None:
        raise ValueError(f"baseline {method!r} has not been trained")
    item_tokens = np.asarray(item_tokens, dtype=np.int64)
    known = item_tokens >= 0
    safe = np.where(known, item_tokens, 0)
    tokens = tuple(sequence.tokens)
    if method == "cf":
        est, evidence = model.score(user_row(tokens, len(model.neighbors), model.binary))
        return np.where(known & evidence[safe], est[safe], CF_FLOOR)
    if method == "mf":
        ui = model.user_index(sequence.user_id)
        p = model.P[ui] if ui is not None else model.fold_in(user_row(tokens, model.Q.shape[0], model.binary))
        if p is None:
            return np.full(len(item_tokens), MF_FLOOR)
        return np.where(known, model.Q[safe] @ p, MF_FLOOR)
    if method == "ngram":
        probs = ngram_predict(model, tokens)
        return np.where(known, probs[safe], NGRAM_FLOOR)
    raise ValueError(f"unknown baseline {method!r}")
