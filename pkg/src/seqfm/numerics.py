"""Dense numerical kernel: masked softmax, layer norm, dropout, Adam, RNG streams.

Everything runs in float64. Each forward op with trainable inputs has a matching
``*_backward`` that takes the upstream gradient and the cached forward values.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

NEG_INF = -np.inf
LAYER_NORM_GUARD = 1e-8


class DimensionError(ValueError):
    pass


class UpdateError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# RNG


class Rng:
    """Counter-based (Philox) generator keyed by ``(seed, stream_id)``.

    Named sub-streams are derived with :meth:`stream`, so that adding a new
    consumer of randomness never shifts the draws of an existing one.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.Philox(ss))

    def stream(self, name: str | int) -> "Rng":
        if isinstance(name, str):
            key = zlib.crc32(name.encode("utf-8"))
        else:
            key = int(name)
        # mix parent stream into the child id so nested streams differ
        return Rng(self.seed, (self.stream_id * 1_000_003 + key) % (1 << 63))

    def random(self, shape=None):
        return self.gen.random(shape)

    def normal(self, scale=1.0, size=None):
        return self.gen.normal(0.0, scale, size)

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.gen.permutation(x)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"


# ---------------------------------------------------------------------------
# masked softmax


def masked_softmax(scores: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax of ``scores + mask`` over the last axis.

    ``mask`` holds 0 (allowed) or -inf (blocked) and broadcasts against
    ``scores``. Rows with no allowed entry come back as all zeros.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if mask is None:
        allowed = np.ones(scores.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        try:
            allowed = np.broadcast_to(mask == 0.0, scores.shape)
        except ValueError as exc:
            raise DimensionError(
                f"mask shape {mask.shape} does not match scores {scores.shape}"
            ) from exc
    shifted = np.where(allowed, scores, NEG_INF)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    expd = np.where(allowed, np.exp(shifted - row_max), 0.0)
    total = expd.sum(axis=-1, keepdims=True)
    return np.divide(expd, total, out=np.zeros_like(expd), where=total > 0)


def masked_softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the scores; blocked entries (prob 0) get zero."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


# ---------------------------------------------------------------------------
# layer norm


def layer_norm(x, scale, bias, guard: float = LAYER_NORM_GUARD):
    """Normalize over the last axis: ``scale * (x - mean) / sqrt(var + guard) + bias``.

    Returns ``(out, cache)``; the cache feeds :func:`layer_norm_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + guard)
    xhat = centered * inv_std
    return scale * xhat + bias, (xhat, inv_std)


def layer_norm_backward(dout, scale, cache):
    """Returns ``(dx, dscale, dbias)``; parameter grads are summed over leading axes."""
    xhat, inv_std = cache
    dxhat = dout * scale
    d = xhat.shape[-1]
    dx = inv_std * (
        dxhat
        - dxhat.sum(axis=-1, keepdims=True) / d
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d
    )
    lead = tuple(range(dout.ndim - 1))
    return dx, (dout * xhat).sum(axis=lead), dout.sum(axis=lead)


# ---------------------------------------------------------------------------
# dropout


def dropout_mask(shape, keep_prob: float, rng: Rng | None, training: bool) -> np.ndarray | None:
    """Inverted-dropout multiplier, or None when dropout is a no-op."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    return (rng.random(shape) < keep_prob) / keep_prob


def dropout(x, keep_prob: float, rng: Rng | None, training: bool):
    mult = dropout_mask(np.shape(x), keep_prob, rng, training)
    x = np.asarray(x, dtype=np.float64)
    return x if mult is None else x * mult


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kw) -> "AdamState":
        return cls(
            {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            **kw,
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise UpdateError(f"non-finite gradient in tensor {name!r}")
        if params[name].shape != np.shape(g) or state.first_moment[name].shape != np.shape(g):
            raise DimensionError(f"shape mismatch for tensor {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_gradient(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` w.r.t. every entry of ``params``.

    ``loss_fn`` takes no arguments and reads ``params`` by reference; each entry
    is perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out = {}
    for name, arr in params.items():
        grad = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = grad
    return out


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
