"""Sequence model: embedding -> two stacked LSTM layers -> five affine layers -> sigmoid.

Sequences in a batch are rolled out to their own length only. Rows are
sorted longest-first, so the rows still running at step ``t`` form a prefix of
the batch and padding never reaches a recurrent cell.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    # hidden widths of the head; the output layer (|I'| wide) is appended
    mlp_widths: tuple = (64, 64, 48, 32)
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 20
    clip_norm: float = 5.0
    momentum: float = 0.0
    loss: str = "full"
    forget_bias: float = 1.0

    def problems(self, vocab_size: int | None = None, n_outputs: int | None = None) -> list[str]:
        out = []
        for name in ("embed_dim", "hidden_dim", "batch_size"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if len(self.mlp_widths) != 4 or any(w < 1 for w in self.mlp_widths):
            out.append("mlp_widths must hold four positive widths")
        if self.learning_rate < 0:
            out.append("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            out.append("momentum must be in [0, 1)")
        if self.loss not in ("full", "positives_only"):
            out.append(f"loss must be 'full' or 'positives_only', got {self.loss!r}")
        if vocab_size is not None and vocab_size < 3:
            out.append(f"vocabulary needs PAD, UNK and at least one item (got {vocab_size} tokens)")
        if n_outputs is not None and n_outputs < 1:
            out.append("the recommendable item set is empty")
        return out


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0
    param_norms: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        # wall-clock timings stay out of the file so reruns are byte-identical
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for row in zip(self.epochs, self.train_loss, self.val_loss):
                w.writerow([row[0], repr(row[1]), "" if row[2] is None else repr(row[2])])

    @classmethod
    def read_csv(cls, path) -> TrainReport:
        rep = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                rep.epochs.append(int(row["epoch"]))
                rep.train_loss.append(float(row["train_loss"]))
                rep.val_loss.append(float(row["val_loss"]) if row["val_loss"] else None)
        return rep


class SequenceModel:
    def __init__(self, vocab_size: int, n_outputs: int, config: ModelConfig | None = None,
                 seed: int = 0, vocab_hash: str = ""):
        config = config or ModelConfig()
        bad = config.problems(vocab_size, n_outputs)
        if bad:
            raise ValueError("invalid model configuration: " + "; ".join(bad))
        self.vocab_size = vocab_size
        self.n_outputs = n_outputs
        self.config = config
        self.seed = seed
        self.vocab_hash = vocab_hash
        self.params = nn.ParameterSet()
        self._velocity: dict = {}

        rng = np.random.default_rng(seed)
        d, h = config.embed_dim, config.hidden_dim
        p = self.params
        # a lookup has a single active input, so the table uses fan_in = 1
        p.add("embedding", nn.glorot_uniform(rng, 1, d, rows=vocab_size))
        for layer, fan_in in (("lstm1", d), ("lstm2", h)):
            p.add(f"{layer}.Wx", nn.glorot_uniform(rng, fan_in, 4 * h))
            p.add(f"{layer}.Wh", nn.glorot_uniform(rng, h, 4 * h))
            b = np.zeros(4 * h)
            b[h : 2 * h] = config.forget_bias
            p.add(f"{layer}.b", b)
        widths = [h, *config.mlp_widths, n_outputs]
        for k in range(5):
            p.add(f"mlp{k}.W", nn.glorot_uniform(rng, widths[k], widths[k + 1]))
            p.add(f"mlp{k}.b", np.zeros(widths[k + 1]))
        self._check_shapes()

    def _check_shapes(self) -> None:
        d, h = self.config.embed_dim, self.config.hidden_dim
        widths = [h, *self.config.mlp_widths, self.n_outputs]
        expected = {"embedding": (self.vocab_size, d)}
        for layer, fan_in in (("lstm1", d), ("lstm2", h)):
            expected[f"{layer}.Wx"] = (fan_in, 4 * h)
            expected[f"{layer}.Wh"] = (h, 4 * h)
            expected[f"{layer}.b"] = (4 * h,)
        for k in range(5):
            expected[f"mlp{k}.W"] = (widths[k], widths[k + 1])
            expected[f"mlp{k}.b"] = (widths[k + 1],)
        bad = [f"{n}: {self.params[n].shape if n in self.params else 'missing'} != {s}"
               for n, s in expected.items() if n not in self.params or self.params[n].shape != s]
        extra = sorted(set(self.params) - set(expected))
        if bad or extra:
            raise ValueError("parameter shape audit failed: " + "; ".join(bad + [f"unexpected {n}" for n in extra]))

    # -- batched rollout ---------------------------------------------------------

    def _forward(self, token_lists):
        """Logits for a batch of non-empty token sequences, plus the backward cache."""
        p = self.params
        lengths = np.array([len(t) for t in token_lists])
        if lengths.size == 0:
            raise ValueError("empty batch")
        if lengths.min() < 1:
            raise ValueError("cannot score an empty sequence")
        order = np.argsort(-lengths, kind="stable")
        B, T = len(token_lists), int(lengths.max())
        tokens = np.zeros((B, T), dtype=np.int64)
        for row, idx in enumerate(order):
            tokens[row, : lengths[idx]] = token_lists[idx]
        if tokens.max() >= self.vocab_size or tokens.min() < 0:
            raise IndexError("token outside the model vocabulary")
        active = [(lengths > t).sum() for t in range(T)]

        hidden = self.config.hidden_dim
        caches = {"lstm1": [], "lstm2": []}
        layer_in = [nn.embed(tokens[: active[t], t], p["embedding"]) for t in range(T)]
        for layer in ("lstm1", "lstm2"):
            Wx, Wh, b = p[f"{layer}.Wx"], p[f"{layer}.Wh"], p[f"{layer}.b"]
            h = np.zeros((B, hidden))
            c = np.zeros((B, hidden))
            outs = []
            for t in range(T):
                n = active[t]
                h_new, c_new, cache = nn.lstm_step(layer_in[t], h[:n].copy(), c[:n].copy(), Wx, Wh, b)
                h[:n] = h_new
                c[:n] = c_new
                outs.append(h_new)
                caches[layer].append(cache)
            layer_in = outs
        a = h
        mlp = []
        for k in range(5):
            z = nn.affine(a, p[f"mlp{k}.W"], p[f"mlp{k}.b"])
            mlp.append((a, z))
            a = nn.relu(z) if k < 4 else z
        logits = np.empty_like(a)
        logits[order] = a
        return logits, {"order": order, "tokens": tokens, "active": active, "lstm": caches, "mlp": mlp}

    def _backward(self, d_logits, cache) -> None:
        """Accumulate parameter gradients for ``d_logits`` (batch order as given)."""
        p, g = self.params, self.params.grads
        order, tokens, active = cache["order"], cache["tokens"], cache["active"]
        d = d_logits[order]
        for k in reversed(range(5)):
            a, z = cache["mlp"][k]
            if k < 4:
                d = nn.relu_backward(z, d)
            d, dW, db = nn.affine_backward(a, p[f"mlp{k}.W"], d)
            g[f"mlp{k}.W"] += dW
            g[f"mlp{k}.b"] += db

        B, hidden = d.shape
        T = len(active)
        upstream = [None] * T
        dh = d
        for layer in ("lstm2", "lstm1"):
            Wx, Wh = p[f"{layer}.Wx"], p[f"{layer}.Wh"]
            if layer == "lstm1":
                dh = np.zeros((B, hidden))
            dc = np.zeros((B, hidden))
            inputs_grad = [None] * T
            for t in reversed(range(T)):
                n = active[t]
                if upstream[t] is not None:
                    dh[:n] += upstream[t]
                dx, dh_prev, dc_prev, dWx, dWh, db = nn.lstm_step_backward(
                    dh[:n], dc[:n], cache["lstm"][layer][t], Wx, Wh
                )
                g[f"{layer}.Wx"] += dWx
                g[f"{layer}.Wh"] += dWh
                g[f"{layer}.b"] += db
                dh[:n] = dh_prev
                dc[:n] = dc_prev
                inputs_grad[t] = dx
            upstream = inputs_grad
        for t in range(T):
            nn.embed_backward(tokens[: active[t], t], upstream[t], g["embedding"])

    def loss_and_grad(self, token_lists, Y):
        """Batch loss; gradients are added to ``params.grads``."""
        logits, cache = self._forward(token_lists)
        loss, d_logits, _ = nn.bce_with_logits(logits, np.asarray(Y, dtype=np.float64), self.config.loss)
        self._backward(d_logits, cache)
        return loss

    def batch_loss(self, token_lists, Y) -> float:
        logits, _ = self._forward(token_lists)
        return nn.bce_with_logits(logits, np.asarray(Y, dtype=np.float64), self.config.loss)[0]

    def predict_proba(self, tokens) -> np.ndarray:
        logits, _ = self._forward([tokens])
        return nn.sigmoid(logits[0])

    # -- persistence ---------------------------------------------------------------

    def save(self, path) -> None:
        cfg = asdict(self.config)
        cfg["mlp_widths"] = list(cfg["mlp_widths"])
        meta = {"vocab_size": self.vocab_size, "n_outputs": self.n_outputs, "seed": self.seed, "config": cfg}
        save_checkpoint(path, "seq", self.params.values, meta, self.vocab_hash)

    @classmethod
    def load(cls, path, vocab_hash: str | None = None) -> SequenceModel:
        arrays, meta = load_checkpoint(path, kind="seq", vocab_hash=vocab_hash)
        cfg = dict(meta["config"])
        cfg["mlp_widths"] = tuple(cfg["mlp_widths"])
        model = cls(meta["vocab_size"], meta["n_outputs"], ModelConfig(**cfg), meta["seed"], meta["vocab_hash"])
        if set(arrays) != set(model.params):
            raise CheckpointError(f"{path}: parameter names do not match the architecture")
        for name, value in arrays.items():
            if value.shape != model.params[name].shape:
                raise CheckpointError(f"{path}: {name} has shape {value.shape}, expected {model.params[name].shape}")
            np.copyto(model.params[name], value)
        return model


def init_model(vocab_size: int, n_outputs: int, config: ModelConfig | None = None, seed: int = 0,
               vocab_hash: str = "") -> SequenceModel:
    return SequenceModel(vocab_size, n_outputs, config, seed, vocab_hash)


def _check_hash(model: SequenceModel, sequence) -> None:
    seq_hash = getattr(sequence, "vocab_hash", "")
    if model.vocab_hash and seq_hash and seq_hash != model.vocab_hash:
        raise ValueError(
            f"sequence for {sequence.user_id!r} was tokenized with vocabulary {seq_hash}, model expects {model.vocab_hash}"
        )


def forward(model: SequenceModel, sequence) -> np.ndarray:
    """Interaction probabilities over the recommendable items for one user."""
    _check_hash(model, sequence)
    return model.predict_proba(sequence.tokens)


def predict_batch(model: SequenceModel, sequences) -> dict:
    """``{user_id: probabilities}``; each user is rolled out on its own.

    Scoring users one at a time keeps every result bit-identical to
    :func:`forward`, whatever else is in the batch.
    """
    return {s.user_id: forward(model, s) for s in sequences}


def _mean_loss(model: SequenceModel, sequences, targets, users, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(users), batch_size):
        chunk = users[start : start + batch_size]
        loss = model.batch_loss([sequences[u].tokens for u in chunk], np.stack([targets[u] for u in chunk]))
        total += loss * len(chunk)
    return total / len(users)


def train(model: SequenceModel, sequences, targets, train_users, validation_users=(), config: ModelConfig | None = None):
    """Mini-batch SGD over ``train_users``; returns ``(model, TrainReport)``.

    Epoch 0 of the report is the untrained model. After the last epoch the
    parameters of the epoch with the lowest validation loss are restored
    (the last epoch when there are no validation users).
    """
    cfg = config or model.config
    train_users = list(train_users)
    validation_users = list(validation_users)
    missing = [u for u in train_users + validation_users if u not in sequences or u not in targets]
    if missing:
        raise ValueError(f"{len(missing)} users lack a sequence or target, e.g. {missing[:3]}")
    if not train_users:
        raise ValueError("no training users")

    rng = np.random.default_rng([model.seed, 1])
    report = TrainReport()

    def val_loss():
        if not validation_users:
            return None
        return _mean_loss(model, sequences, targets, validation_users, cfg.batch_size)

    start = time.perf_counter()
    report.epochs.append(0)
    report.train_loss.append(_mean_loss(model, sequences, targets, train_users, cfg.batch_size))
    report.val_loss.append(val_loss())
    report.seconds.append(time.perf_counter() - start)
    best = (report.val_loss[0], 0, model.params.copy())

    model.params.zero_grad()
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_users))
        total = 0.0
        for b in range(0, len(order), cfg.batch_size):
            chunk = [train_users[i] for i in order[b : b + cfg.batch_size]]
            loss = model.loss_and_grad([sequences[u].tokens for u in chunk], np.stack([targets[u] for u in chunk]))
            if not np.isfinite(loss):
                log.error("non-finite loss in epoch %d, batch users %s", epoch, chunk)
                raise FloatingPointError(f"non-finite loss in epoch {epoch} (batch starting with {chunk[0]!r})")
            model.params.clip_grad_norm(cfg.clip_norm)
            nn.sgd_step(model.params, cfg.learning_rate, cfg.momentum, model._velocity)
            report.steps += 1
            total += loss * len(chunk)
        report.epochs.append(epoch)
        report.train_loss.append(total / len(train_users))
        report.val_loss.append(val_loss())
        report.seconds.append(time.perf_counter() - start)
        log.info("epoch %d train %.5f val %s", epoch, report.train_loss[-1], report.val_loss[-1])
        vl = report.val_loss[-1]
        if vl is None or vl < best[0]:
            best = (vl, epoch, model.params.copy())

    report.best_epoch = best[1]
    model.params.load_values(best[2])
    report.param_norms = model.params.norms()
    return model, report
