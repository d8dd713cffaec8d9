"""SeqFM parameters, forward pass, analytic backward pass, and the plain FM baseline.

Shapes used throughout (batch-first):

    static ids   (B, ns)        static feature indices, slot 0 user, slot 1 candidate
    dynamic ids  (B, n)         dynamic feature indices, PAD (-1) on the left
    embeddings   (B, rows, d)
    pooled       (B, views, d)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .featurestore import PAD, FeatureSpace, Instance, build_padded_sequence

VIEWS = ("static", "dynamic", "cross")


class ModelError(ValueError):
    pass


@dataclass
class HyperConfig:
    d: int = 64
    l: int = 1
    n_dyn_max: int = 20
    keep_prob: float = 0.6
    use_static_view: bool = True
    use_dynamic_view: bool = True
    use_cross_view: bool = True
    use_residual: bool = True
    use_layernorm: bool = True
    literal_padding: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d < 1 or self.l < 1 or self.n_dyn_max < 1:
            raise ValueError("d, l and n_dyn_max must all be >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if not self.enabled_views():
            raise ValueError("at least one view must be enabled")

    def enabled_views(self) -> tuple[str, ...]:
        flags = (self.use_static_view, self.use_dynamic_view, self.use_cross_view)
        return tuple(v for v, on in zip(VIEWS, flags) if on)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FfnLayer:
    W: np.ndarray
    b: np.ndarray
    ln_scale: np.ndarray
    ln_shift: np.ndarray


@dataclass
class ModelParams:
    w0: np.ndarray  # shape (1,)
    w_static: np.ndarray
    w_dynamic: np.ndarray
    emb_static: np.ndarray
    emb_dynamic: np.ndarray
    attn: dict[str, dict[str, np.ndarray]]  # view -> {"Wq", "Wk", "Wv"}
    ffn: list[FfnLayer]
    p: np.ndarray

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Ordered name -> array mapping. Arrays are shared, not copied."""
        out = {
            "w0": self.w0,
            "w_static": self.w_static,
            "w_dynamic": self.w_dynamic,
            "emb_static": self.emb_static,
            "emb_dynamic": self.emb_dynamic,
        }
        for v in VIEWS:
            for k in ("Wq", "Wk", "Wv"):
                out[f"attn.{v}.{k}"] = self.attn[v][k]
        for i, layer in enumerate(self.ffn):
            out[f"ffn.{i}.W"] = layer.W
            out[f"ffn.{i}.b"] = layer.b
            out[f"ffn.{i}.ln_scale"] = layer.ln_scale
            out[f"ffn.{i}.ln_shift"] = layer.ln_shift
        out["p"] = self.p
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "ModelParams":
        n_layers = len({k.split(".")[1] for k in t if k.startswith("ffn.")})
        return cls(
            w0=t["w0"],
            w_static=t["w_static"],
            w_dynamic=t["w_dynamic"],
            emb_static=t["emb_static"],
            emb_dynamic=t["emb_dynamic"],
            attn={v: {k: t[f"attn.{v}.{k}"] for k in ("Wq", "Wk", "Wv")} for v in VIEWS},
            ffn=[
                FfnLayer(t[f"ffn.{i}.W"], t[f"ffn.{i}.b"], t[f"ffn.{i}.ln_scale"], t[f"ffn.{i}.ln_shift"])
                for i in range(n_layers)
            ],
            p=t["p"],
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_tensors({k: v.copy() for k, v in self.named_tensors().items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_tensors({k: np.zeros_like(v) for k, v in self.named_tensors().items()})


def expected_shapes(space: FeatureSpace, cfg: HyperConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d
    shapes = {
        "w0": (1,),
        "w_static": (space.m_static,),
        "w_dynamic": (space.m_dynamic,),
        "emb_static": (space.m_static, d),
        "emb_dynamic": (space.m_dynamic, d),
    }
    for v in VIEWS:
        for k in ("Wq", "Wk", "Wv"):
            shapes[f"attn.{v}.{k}"] = (d, d)
    for i in range(cfg.l):
        shapes[f"ffn.{i}.W"] = (d, d)
        shapes[f"ffn.{i}.b"] = (d,)
        shapes[f"ffn.{i}.ln_scale"] = (d,)
        shapes[f"ffn.{i}.ln_shift"] = (d,)
    shapes["p"] = (3 * d,)
    return shapes


def _glorot(rng: nx.Rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(space: FeatureSpace, cfg: HyperConfig, rng: nx.Rng) -> ModelParams:
    d = cfg.d
    return ModelParams(
        w0=np.zeros(1),
        w_static=np.zeros(space.m_static),
        w_dynamic=np.zeros(space.m_dynamic),
        emb_static=rng.normal(0.01, (space.m_static, d)),
        emb_dynamic=rng.normal(0.01, (space.m_dynamic, d)),
        attn={v: {k: _glorot(rng, d, d) for k in ("Wq", "Wk", "Wv")} for v in VIEWS},
        ffn=[FfnLayer(_glorot(rng, d, d), np.zeros(d), np.ones(d), np.zeros(d)) for _ in range(cfg.l)],
        p=_glorot(rng, 3 * d, 1).reshape(-1),
    )


def random_params(space: FeatureSpace, cfg: HyperConfig, rng: nx.Rng, scale: float = 0.5) -> ModelParams:
    """Every tensor drawn N(0, scale); used by gradient checks and property tests."""
    shapes = expected_shapes(space, cfg)
    t = {k: rng.normal(scale, s) for k, s in shapes.items()}
    for i in range(cfg.l):
        t[f"ffn.{i}.ln_scale"] = 1.0 + t[f"ffn.{i}.ln_scale"]
    return ModelParams.from_tensors(t)


# ---------------------------------------------------------------------------
# masks


def build_dynamic_mask(n: int) -> np.ndarray:
    """Causal mask: row i may attend to column j only when j <= i."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, nx.NEG_INF)


def build_cross_mask(n_static: int, n_dynamic: int) -> np.ndarray:
    """Allows only static<->dynamic pairs; blocks within-category pairs."""
    if n_static < 1 or n_dynamic < 1:
        raise ValueError("both counts must be >= 1")
    is_static = np.arange(n_static + n_dynamic) < n_static
    allowed = is_static[:, None] != is_static[None, :]
    return np.where(allowed, 0.0, nx.NEG_INF)


# ---------------------------------------------------------------------------
# building blocks


def attention_view(E, Wq, Wk, Wv, mask=None):
    """Single-head scaled dot-product self-attention; returns ``(H, cache)``.

    ``E`` is ``(..., n, d)``; ``mask`` broadcasts against ``(..., n, n)``.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.shape[-1] != Wq.shape[0] or Wq.shape != Wk.shape or Wq.shape != Wv.shape:
        raise nx.DimensionError(f"embedding width {E.shape[-1]} vs projections {Wq.shape}")
    n = E.shape[-2]
    if mask is not None and np.shape(mask)[-1] != n:
        raise nx.DimensionError(f"mask side {np.shape(mask)[-1]} != sequence length {n}")
    Q = E @ Wq
    K = E @ Wk
    V = E @ Wv
    scale = 1.0 / math.sqrt(Wq.shape[1])
    P = nx.masked_softmax(Q @ np.swapaxes(K, -1, -2) * scale, mask)
    return P @ V, (E, Q, K, V, P, scale)


def attention_view_backward(dH, cache, Wq, Wk, Wv):
    """Returns ``(dE, dWq, dWk, dWv)``; weight grads summed over the batch."""
    E, Q, K, V, P, scale = cache
    dP = dH @ np.swapaxes(V, -1, -2)
    dV = np.swapaxes(P, -1, -2) @ dH
    dS = nx.masked_softmax_backward(P, dP) * scale
    dQ = dS @ K
    dK = np.swapaxes(dS, -1, -2) @ Q
    dE = dQ @ Wq.T + dK @ Wk.T + dV @ Wv.T
    Ef = E.reshape(-1, E.shape[-1])

    def wgrad(g):
        return Ef.T @ g.reshape(-1, g.shape[-1])

    return dE, wgrad(dQ), wgrad(dK), wgrad(dV)


def intra_view_pool(H):
    """Mean over the row axis; padded rows count in the denominator."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape[-2] < 1:
        raise ValueError("cannot pool zero rows")
    return H.mean(axis=-2)


def residual_ffn(h, layers: Sequence[FfnLayer], cfg: HyperConfig, rng=None, training=False):
    """Shared residual feed-forward stack; returns ``(out, caches)``."""
    x = np.asarray(h, dtype=np.float64)
    caches = []
    for layer in layers:
        if cfg.use_layernorm:
            z, ln_cache = nx.layer_norm(x, layer.ln_scale, layer.ln_shift)
        else:
            z, ln_cache = x, None
        a = z @ layer.W + layer.b
        r = np.maximum(a, 0.0)
        mult = nx.dropout_mask(r.shape, cfg.keep_prob, rng, training)
        branch = r if mult is None else r * mult
        caches.append((z, ln_cache, a, mult))
        x = x + branch if cfg.use_residual else branch
    return x, caches


def residual_ffn_backward(dout, layers, caches, cfg: HyperConfig):
    """Returns ``(dh, per-layer (dW, db, dscale, dshift))``."""
    grads = [None] * len(layers)
    dx = dout
    for i in reversed(range(len(layers))):
        layer = layers[i]
        z, ln_cache, a, mult = caches[i]
        dbranch = dx
        dr = dbranch if mult is None else dbranch * mult
        da = dr * (a > 0)
        zf = z.reshape(-1, z.shape[-1])
        daf = da.reshape(-1, da.shape[-1])
        dW = zf.T @ daf
        db = daf.sum(axis=0)
        dz = da @ layer.W.T
        if cfg.use_layernorm:
            dxn, dscale, dshift = nx.layer_norm_backward(dz, layer.ln_scale, ln_cache)
        else:
            dxn, dscale, dshift = dz, np.zeros_like(layer.ln_scale), np.zeros_like(layer.ln_shift)
        grads[i] = (dW, db, dscale, dshift)
        dx = dx + dxn if cfg.use_residual else dxn
    return dx, grads


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    static: np.ndarray
    dyn_idx: np.ndarray
    valid: np.ndarray
    views: tuple[str, ...]
    attn_caches: dict = field(default_factory=dict)
    row_counts: dict = field(default_factory=dict)
    ffn_caches: list = field(default_factory=list)
    h_agg: np.ndarray | None = None
    score: np.ndarray | None = None
    pooled: np.ndarray | None = None


def encode_batch(instances: Sequence[Instance], n_max: int):
    """Stack instances into ``(static (B, ns), dynamic (B, n_max))`` int arrays."""
    ns = {len(i.static_ids) for i in instances}
    if len(ns) != 1:
        raise ModelError(f"instances in one batch must share a static length, got {sorted(ns)}")
    static = np.array([i.static_ids for i in instances], dtype=np.int64)
    dyn = np.array([build_padded_sequence(i.dynamic_ids, n_max).ids for i in instances], dtype=np.int64)
    return static, dyn


def _check_ids(static, dyn, params: ModelParams):
    if static.size and (static.min() < 0 or static.max() >= params.w_static.shape[0]):
        raise ModelError("static feature id out of range")
    real = dyn[dyn != PAD]
    if real.size and (real.min() < 0 or real.max() >= params.w_dynamic.shape[0]):
        raise ModelError("dynamic feature id out of range")


def view_masks(ns: int, valid: np.ndarray, literal_padding: bool):
    """Additive masks ``{"dynamic": (B, n, n), "cross": (B, ns+n, ns+n)}``."""
    B, n = valid.shape
    dyn = np.broadcast_to(build_dynamic_mask(n), (B, n, n))
    cross = np.broadcast_to(build_cross_mask(ns, n), (B, ns + n, ns + n))
    if literal_padding:
        return {"dynamic": dyn, "cross": cross}
    key_pad = np.where(valid, 0.0, nx.NEG_INF)[:, None, :]
    cross_pad = np.concatenate([np.zeros((B, 1, ns)), key_pad], axis=2)
    return {"dynamic": dyn + key_pad, "cross": cross + cross_pad}


def forward_batch(params: ModelParams, cfg: HyperConfig, static, dyn, rng=None, training=False):
    """Scores for a batch; returns ``(scores (B,), trace)``."""
    # static features carry no position; a canonical order makes sums order-free
    static = np.sort(np.asarray(static, dtype=np.int64), axis=1)
    dyn = np.asarray(dyn, dtype=np.int64)
    _check_ids(static, dyn, params)
    B, ns = static.shape
    d = cfg.d
    valid = dyn != PAD
    dyn_idx = np.where(valid, dyn, 0)

    linear = (
        params.w0[0]
        + params.w_static[static].sum(axis=1)
        + (params.w_dynamic[dyn_idx] * valid).sum(axis=1)
    )

    E_static = params.emb_static[static]
    E_dyn = params.emb_dynamic[dyn_idx] * valid[..., None]
    masks = view_masks(ns, valid, cfg.literal_padding)
    inputs = {
        "static": (E_static, None),
        "dynamic": (E_dyn, masks["dynamic"]),
        "cross": (np.concatenate([E_static, E_dyn], axis=1), masks["cross"]),
    }

    trace = ForwardTrace(static, dyn_idx, valid, cfg.enabled_views())
    pooled = []
    for v in trace.views:
        E, mask = inputs[v]
        w = params.attn[v]
        H, cache = attention_view(E, w["Wq"], w["Wk"], w["Wv"], mask)
        trace.attn_caches[v] = cache
        trace.row_counts[v] = H.shape[1]
        pooled.append(intra_view_pool(H))
    X = np.stack(pooled, axis=1)  # (B, V, d)
    out, trace.ffn_caches = residual_ffn(X, params.ffn, cfg, rng, training)

    h_agg = np.zeros((B, 3 * d))
    for k, v in enumerate(trace.views):
        j = VIEWS.index(v)
        h_agg[:, j * d:(j + 1) * d] = out[:, k]
    score = linear + h_agg @ params.p
    trace.h_agg = h_agg
    trace.score = score
    trace.pooled = X
    return score, trace


def backward_batch(trace: ForwardTrace, upstream, params: ModelParams, cfg: HyperConfig) -> ModelParams:
    """Gradient of ``sum(upstream * score)`` w.r.t. every parameter tensor."""
    if trace is None or trace.h_agg is None:
        raise ModelError("backward needs a trace from forward_batch")
    up = np.broadcast_to(np.asarray(upstream, dtype=np.float64), trace.score.shape)
    g = params.zeros_like()
    d = cfg.d
    static, dyn_idx, valid = trace.static, trace.dyn_idx, trace.valid
    ns = static.shape[1]

    g.w0[0] = up.sum()
    np.add.at(g.w_static, static, np.broadcast_to(up[:, None], static.shape))
    np.add.at(g.w_dynamic, dyn_idx[valid], np.broadcast_to(up[:, None], valid.shape)[valid])
    g.p[:] = up @ trace.h_agg

    dh = up[:, None] * params.p[None, :]
    dout = np.stack([dh[:, VIEWS.index(v) * d:(VIEWS.index(v) + 1) * d] for v in trace.views], axis=1)
    dX, layer_grads = residual_ffn_backward(dout, params.ffn, trace.ffn_caches, cfg)
    for gl, (dW, db, ds, dsh) in zip(g.ffn, layer_grads):
        gl.W[:] = dW
        gl.b[:] = db
        gl.ln_scale[:] = ds
        gl.ln_shift[:] = dsh

    dE_static = np.zeros(static.shape + (d,))
    dE_dyn = np.zeros(dyn_idx.shape + (d,))
    for k, v in enumerate(trace.views):
        rows = trace.row_counts[v]
        dH = np.repeat(dX[:, k][:, None, :] / rows, rows, axis=1)
        w = params.attn[v]
        dE, dWq, dWk, dWv = attention_view_backward(dH, trace.attn_caches[v], w["Wq"], w["Wk"], w["Wv"])
        g.attn[v]["Wq"][:] = dWq
        g.attn[v]["Wk"][:] = dWk
        g.attn[v]["Wv"][:] = dWv
        if v == "static":
            dE_static += dE
        elif v == "dynamic":
            dE_dyn += dE
        else:
            dE_static += dE[:, :ns]
            dE_dyn += dE[:, ns:]

    np.add.at(g.emb_static, static, dE_static)
    np.add.at(g.emb_dynamic, dyn_idx[valid], dE_dyn[valid])
    return g


def forward(instance: Instance, params: ModelParams, cfg: HyperConfig, rng=None, training=False):
    """Score one instance; returns ``(score, trace)``."""
    static, dyn = encode_batch([instance], cfg.n_dyn_max)
    score, trace = forward_batch(params, cfg, static, dyn, rng, training)
    return float(score[0]), trace


def backward(trace: ForwardTrace, upstream: float, params: ModelParams, cfg: HyperConfig) -> ModelParams:
    return backward_batch(trace, np.array([upstream], dtype=np.float64), params, cfg)


# ---------------------------------------------------------------------------
# plain factorization machine baseline


@dataclass
class PlainFmParams:
    w0: np.ndarray  # shape (1,)
    w: np.ndarray
    V: np.ndarray

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {"w0": self.w0, "w": self.w, "V": self.V}

    @classmethod
    def from_tensors(cls, t):
        return cls(t["w0"], t["w"], t["V"])

    def copy(self):
        return PlainFmParams(self.w0.copy(), self.w.copy(), self.V.copy())


def init_plain_fm(m: int, d: int, rng: nx.Rng, scale: float = 0.01) -> PlainFmParams:
    return PlainFmParams(np.zeros(1), np.zeros(m), rng.normal(scale, (m, d)))


def plain_fm_forward(active_ids: Sequence[int], params: PlainFmParams) -> float:
    """Bias + linear weights + all pairwise embedding dot products of active features."""
    ids = np.asarray(list(active_ids), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= params.w.shape[0]):
        raise ModelError("feature id out of range")
    if len(set(ids.tolist())) != ids.size:
        raise ModelError("active feature ids must be distinct")
    v = params.V[ids]
    s = v.sum(axis=0)
    pair = 0.5 * (s @ s - (v * v).sum())
    return float(params.w0[0] + params.w[ids].sum() + pair)


def fm_active_ids(instance: Instance, space: FeatureSpace, n_max: int) -> list[int]:
    """Set-category encoding: static ids plus the distinct recent dynamic ids."""
    recent = build_padded_sequence(instance.dynamic_ids, n_max).real_entries
    dyn = sorted({space.m_static + i for i in recent})
    return list(dict.fromkeys(instance.static_ids)) + dyn


def plain_fm_forward_batch(ids: np.ndarray, params: PlainFmParams):
    """``ids`` is ``(B, k)`` with -1 padding; returns ``(scores, cache)``."""
    valid = ids >= 0
    idx = np.where(valid, ids, 0)
    v = params.V[idx] * valid[..., None]
    s = v.sum(axis=1)
    pair = 0.5 * ((s * s).sum(axis=1) - (v * v).sum(axis=(1, 2)))
    score = params.w0[0] + (params.w[idx] * valid).sum(axis=1) + pair
    return score, (idx, valid, v, s)


def plain_fm_backward_batch(cache, upstream, params: PlainFmParams) -> PlainFmParams:
    idx, valid, v, s = cache
    g = PlainFmParams(np.zeros(1), np.zeros_like(params.w), np.zeros_like(params.V))
    g.w0[0] = upstream.sum()
    np.add.at(g.w, idx[valid], np.broadcast_to(upstream[:, None], valid.shape)[valid])
    dv = upstream[:, None, None] * (s[:, None, :] - v)
    np.add.at(g.V, idx[valid], dv[valid])
    return g


# ---------------------------------------------------------------------------
# scorer wrappers shared by training and evaluation


def _groups(instances: Sequence[Instance]):
    """Index groups of equal static length, in first-seen order."""
    out: dict[int, list[int]] = {}
    for k, inst in enumerate(instances):
        out.setdefault(len(inst.static_ids), []).append(k)
    return list(out.values())


class SeqFM:
    """Parameters plus config, with batch scoring and gradient helpers."""

    kind = "seqfm"

    def __init__(self, params: ModelParams, cfg: HyperConfig, space: FeatureSpace):
        self.params = params
        self.cfg = cfg
        self.space = space

    @classmethod
    def create(cls, space, cfg, rng):
        return cls(init_params(space, cfg, rng), cfg, space)

    def tensors(self) -> dict[str, np.ndarray]:
        return self.params.named_tensors()

    def snapshot(self):
        return self.params.copy()

    def restore(self, snap):
        self.params = snap

    def score(self, instances: Sequence[Instance], chunk: int = 4096) -> np.ndarray:
        out = np.empty(len(instances))
        for idx in _groups(instances):
            for s in range(0, len(idx), chunk):
                part = idx[s:s + chunk]
                static, dyn = encode_batch([instances[k] for k in part], self.cfg.n_dyn_max)
                out[part] = forward_batch(self.params, self.cfg, static, dyn)[0]
        return out

    def scores_and_grads(self, instances, loss_grad, rng=None):
        """Forward in training mode, then backprop ``loss_grad(scores) -> (loss, dscores)``."""
        groups = _groups(instances)
        scores = np.empty(len(instances))
        traces = []
        for idx in groups:
            static, dyn = encode_batch([instances[k] for k in idx], self.cfg.n_dyn_max)
            s, tr = forward_batch(self.params, self.cfg, static, dyn, rng, training=True)
            scores[idx] = s
            traces.append(tr)
        loss, dscores = loss_grad(scores)
        total = None
        for idx, tr in zip(groups, traces):
            g = backward_batch(tr, dscores[idx], self.params, self.cfg).named_tensors()
            total = g if total is None else {k: total[k] + g[k] for k in total}
        return loss, scores, total


class PlainFM:
    """Plain factorization machine over set-category inputs (static ids + distinct recent items)."""

    kind = "plain_fm"

    def __init__(self, params: PlainFmParams, cfg: HyperConfig, space: FeatureSpace):
        self.params = params
        self.cfg = cfg
        self.space = space

    @classmethod
    def create(cls, space, cfg, rng):
        return cls(init_plain_fm(space.m, cfg.d, rng), cfg, space)

    def tensors(self):
        return self.params.named_tensors()

    def snapshot(self):
        return self.params.copy()

    def restore(self, snap):
        self.params = snap

    def _encode(self, instances):
        rows = [fm_active_ids(i, self.space, self.cfg.n_dyn_max) for i in instances]
        width = max(len(r) for r in rows)
        ids = np.full((len(rows), width), -1, dtype=np.int64)
        for k, r in enumerate(rows):
            ids[k, :len(r)] = r
        return ids

    def score(self, instances, chunk: int = 8192):
        out = np.empty(len(instances))
        for s in range(0, len(instances), chunk):
            out[s:s + chunk] = plain_fm_forward_batch(self._encode(instances[s:s + chunk]), self.params)[0]
        return out

    def scores_and_grads(self, instances, loss_grad, rng=None):
        scores, cache = plain_fm_forward_batch(self._encode(instances), self.params)
        loss, dscores = loss_grad(scores)
        return loss, scores, plain_fm_backward_batch(cache, dscores, self.params).named_tensors()
