"""Analytic-vs-finite-difference gradient check over random SeqFM configurations."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .featurestore import PAD, FeatureSpace
from .model import HyperConfig, backward_batch, forward_batch, random_params

THRESHOLD = 1e-4

# every (static, dynamic, cross, residual, layernorm) combination with >= 1 view
FLAG_COMBOS = [
    f for f in itertools.product((True, False), repeat=5) if any(f[:3])
]


@dataclass
class CheckResult:
    seed: int
    cfg: HyperConfig
    max_rel_err: float
    worst_tensor: str


def config_for_seed(seed: int) -> HyperConfig:
    s, dv, cv, res, ln = FLAG_COMBOS[seed % len(FLAG_COMBOS)]
    return HyperConfig(
        d=(2, 4, 8)[seed % 3],
        l=1 + (seed // 3) % 2,
        n_dyn_max=4,
        keep_prob=1.0,
        use_static_view=s,
        use_dynamic_view=dv,
        use_cross_view=cv,
        use_residual=res,
        use_layernorm=ln,
        literal_padding=bool((seed // 6) % 2),
    )


def check_config(seed: int, cfg: HyperConfig | None = None, h: float = 1e-5, corrupt: bool = False) -> CheckResult:
    """Compare analytic and central-difference gradients of ``sum(up * score)``.

    The batch mixes a full sequence, a partly padded one and an empty one.
    ``corrupt`` scales one analytic gradient as a negative control.
    """
    cfg = cfg or config_for_seed(seed)
    rng = nx.Rng(seed).stream("gradcheck")
    space = FeatureSpace(m_static=7, m_dynamic=9, user_count=3, object_count=4)
    params = random_params(space, cfg, rng)
    static = rng.integers(0, space.m_static, size=(3, 3))
    dyn = rng.integers(0, space.m_dynamic, size=(3, cfg.n_dyn_max))
    dyn[1, :2] = PAD
    dyn[2, :] = PAD
    up = rng.normal(1.0, 3)

    _, trace = forward_batch(params, cfg, static, dyn)
    analytic = backward_batch(trace, up, params, cfg).named_tensors()
    if corrupt:
        analytic["attn.cross.Wq"] = analytic["attn.cross.Wq"] * 1.1 + 1e-3
    tensors = params.named_tensors()
    numeric = nx.finite_diff_gradient(lambda: float(up @ forward_batch(params, cfg, static, dyn)[0]), tensors, h)
    worst, name = 0.0, ""
    for k in tensors:
        e = nx.max_relative_error(analytic[k], numeric[k])
        if e >= worst:
            worst, name = e, k
    return CheckResult(seed, cfg, worst, name)


def run(seeds: int = 20, corrupt: bool = False) -> list[CheckResult]:
    return [check_config(s, corrupt=corrupt) for s in range(seeds)]
