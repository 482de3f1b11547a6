"""Dense float64 kernels with hand-written reverse-mode gradients.

Every forward op returns its output plus whatever the matching ``*_backward``
needs. Arrays are batch-major: a batch of ``B`` row vectors has shape
``(B, n)``. Nothing here knows about the model topology; ``seqrec.model``
wires the pieces together.
"""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

PROB_EPS = 1e-7


class ParameterSet:
    """Named float64 parameters with same-shaped gradient accumulators."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def clip_grad_norm(self, max_norm: float) -> float:
        """Rescale all gradients in place so their global norm is at most ``max_norm``."""
        norm = self.grad_norm()
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for g in self.grads.values():
                g *= scale
        return norm

    def copy(self) -> ParameterSet:
        out = ParameterSet()
        for name, value in self.values.items():
            out.add(name, value.copy())
        return out

    def load_values(self, other: ParameterSet) -> None:
        for name in self.values:
            np.copyto(self.values[name], other.values[name])

    def norms(self) -> dict[str, float]:
        return {name: float(np.linalg.norm(v)) for name, v in self.values.items()}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, rows: int | None = None) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); ``rows`` defaults to ``fan_in``."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in if rows is None else rows, fan_out))


# -- embedding ---------------------------------------------------------------

def embed(tokens, E: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= E.shape[0]):
        raise IndexError(f"token out of range for a {E.shape[0]}-row embedding")
    return E[tokens]


def embed_backward(tokens, d_out: np.ndarray, dE: np.ndarray) -> None:
    """Scatter-add ``d_out`` rows into ``dE``; repeated tokens accumulate."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    np.add.at(dE, tokens, d_out)


# -- elementwise activations ---------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(y: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return d_out * y * (1.0 - y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return d_out * (x > 0)


# -- affine ----------------------------------------------------------------------

def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b


def affine_backward(x: np.ndarray, W: np.ndarray, d_out: np.ndarray):
    """Return ``(dx, dW, db)`` for ``out = x @ W + b`` with batch-major ``x``."""
    x2 = np.atleast_2d(x)
    d2 = np.atleast_2d(d_out)
    dx = d_out @ W.T
    return dx, x2.T @ d2, d2.sum(axis=0)


# -- LSTM cell ---------------------------------------------------------------------

def lstm_step(x, h, c, Wx, Wh, b):
    """One LSTM step for a batch.

    Gate columns are laid out ``[input | forget | output | candidate]`` in
    ``Wx`` (d, 4h), ``Wh`` (h, 4h) and ``b`` (4h,). Returns ``(h_new, c_new,
    cache)``.
    """
    hidden = Wh.shape[0]
    if Wx.shape[1] != 4 * hidden or Wh.shape[1] != 4 * hidden or b.shape != (4 * hidden,):
        raise ValueError(f"lstm parameter shapes inconsistent: Wx{Wx.shape} Wh{Wh.shape} b{b.shape}")
    if x.shape[-1] != Wx.shape[0] or h.shape[-1] != hidden or c.shape != h.shape:
        raise ValueError(f"lstm input shapes inconsistent: x{x.shape} h{h.shape} c{c.shape}")
    z = x @ Wx + h @ Wh + b
    gates = sigmoid(z[..., : 3 * hidden])
    i = gates[..., :hidden]
    f = gates[..., hidden : 2 * hidden]
    o = gates[..., 2 * hidden :]
    g = np.tanh(z[..., 3 * hidden :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    if not (np.all(np.isfinite(h_new)) and np.all(np.isfinite(c_new))):
        raise FloatingPointError(
            f"non-finite LSTM state (max |z| = {np.max(np.abs(z)):.3g}, max |c| = {np.max(np.abs(c)):.3g})"
        )
    return h_new, c_new, (x, h, c, i, f, o, g, tc)


def lstm_step_backward(dh_new, dc_new, cache, Wx, Wh):
    """Backward of :func:`lstm_step`.

    Returns ``(dx, dh, dc, dWx, dWh, db)``.
    """
    x, h, c, i, f, o, g, tc = cache
    do = dh_new * tc
    dc = dc_new + dh_new * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1
    )
    x2, h2, dz2 = np.atleast_2d(x), np.atleast_2d(h), np.atleast_2d(dz)
    return dz @ Wx.T, dz @ Wh.T, dc_prev, x2.T @ dz2, h2.T @ dz2, dz2.sum(axis=0)


# -- losses ----------------------------------------------------------------------------

def bce_loss(P, y, mode: str = "full"):
    """Binary cross-entropy summed over outputs and averaged over rows.

    ``P`` is clamped to ``[1e-7, 1 - 1e-7]``. ``mode="positives_only"`` drops
    the ``(1 - y) log(1 - P)`` term. Returns ``(loss, dL/dP)``; the gradient is
    that of the clamped expression, so it vanishes outside the clamp range.
    """
    P = np.asarray(P, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if P.shape != y.shape:
        raise ValueError(f"bce shape mismatch: P{P.shape} y{y.shape}")
    rows = P.shape[0] if P.ndim > 1 else 1
    Pc = np.clip(P, PROB_EPS, 1.0 - PROB_EPS)
    inside = (P >= PROB_EPS) & (P <= 1.0 - PROB_EPS)
    if mode == "full":
        loss = -np.sum(y * np.log(Pc) + (1.0 - y) * np.log1p(-Pc)) / rows
        dP = (-y / Pc + (1.0 - y) / (1.0 - Pc)) / rows
    elif mode == "positives_only":
        loss = -np.sum(y * np.log(Pc)) / rows
        dP = (-y / Pc) / rows
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return float(loss), dP * inside


def bce_with_logits(logits, y, mode: str = "full"):
    """Sigmoid + binary cross-entropy fused for stability.

    Same averaging as :func:`bce_loss`. Returns ``(loss, dL/dlogits, P)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if logits.shape != y.shape:
        raise ValueError(f"bce shape mismatch: logits{logits.shape} y{y.shape}")
    rows = logits.shape[0] if logits.ndim > 1 else 1
    P = sigmoid(logits)
    # log(1 + exp(-|z|)) shared by both log terms
    soft = np.log1p(np.exp(-np.abs(logits)))
    log_p = np.minimum(logits, 0.0) - soft
    if mode == "full":
        log_1mp = np.minimum(-logits, 0.0) - soft
        loss = -np.sum(y * log_p + (1.0 - y) * log_1mp) / rows
        d_logits = (P - y) / rows
    elif mode == "positives_only":
        loss = -np.sum(y * log_p) / rows
        d_logits = -y * (1.0 - P) / rows
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return float(loss), d_logits, P


# -- optimizer ---------------------------------------------------------------------------------

def sgd_step(params: ParameterSet, learning_rate: float, momentum: float = 0.0, velocity=None):
    """In-place ``theta -= lr * grad`` for every parameter, then zero the gradients.

    With ``momentum > 0`` a ``velocity`` dict (name -> array) is updated and
    used instead of the raw gradient.
    """
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    for name, value in params.values.items():
        g = params.grads[name]
        if momentum:
            v = velocity.setdefault(name, np.zeros_like(value))
            v *= momentum
            v += g
            g = v
        value -= learning_rate * g
    params.zero_grad()
    return params
