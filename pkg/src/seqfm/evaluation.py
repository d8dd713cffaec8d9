"""Metrics and the leave-one-out evaluation harness."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .featurestore import FeatureSpace, Instance, SamplingError, sample_negatives
from .numerics import Rng, sigmoid


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RankedCase:
    ground_truth_rank: int
    candidate_count: int

    def __post_init__(self):
        if not 1 <= self.ground_truth_rank <= self.candidate_count:
            raise ValueError("rank out of range")


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    case_count: int
    wall_time: float = field(default=0.0, compare=False)

    def to_text(self, timing: bool = True) -> str:
        lines = [f"task={self.task}", f"case_count={self.case_count}"]
        lines += [f"{k}={v:.6f}" for k, v in self.metrics.items()]
        if timing:
            lines.append(f"wall_time={self.wall_time:.3f}")
        return "\n".join(lines) + "\n"

    def to_json(self, timing: bool = True) -> str:
        d = {"task": self.task, "case_count": self.case_count, "metrics": self.metrics}
        if timing:
            d["wall_time"] = self.wall_time
        return json.dumps(d, sort_keys=True)


# ---------------------------------------------------------------------------
# metrics


def rank_from_scores(truth_score: float, negative_scores) -> int:
    """1 + negatives scoring at least as high as the truth (truth loses ties)."""
    neg = np.asarray(negative_scores, dtype=np.float64)
    return 1 + int(np.count_nonzero(neg >= truth_score))


def hr_at_k(cases: Sequence[RankedCase], k: int) -> float:
    if not cases:
        raise MetricError("no cases")
    if k < 1:
        raise ValueError("K must be >= 1")
    return sum(c.ground_truth_rank <= k for c in cases) / len(cases)


def ndcg_at_k(cases: Sequence[RankedCase], k: int) -> float:
    if not cases:
        raise MetricError("no cases")
    if k < 1:
        raise ValueError("K must be >= 1")
    gain = [1.0 / math.log2(c.ground_truth_rank + 1) if c.ground_truth_rank <= k else 0.0 for c in cases]
    return sum(gain) / len(cases)


def auc(scores_pos, scores_neg) -> float:
    """P(random positive outscores random negative), ties counted as 1/2."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise MetricError("auc needs at least one positive and one negative")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(allv.size)
    sorted_v = allv[order]
    # average ranks over tie groups
    i = 0
    while i < sorted_v.size:
        j = i
        while j + 1 < sorted_v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = ranks[: pos.size].sum()
    return float((rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def regression_metrics(preds, truths) -> tuple[float, float, float]:
    """Returns ``(MAE, RMSE, RRSE)``; RRSE divides RMSE by the truth std."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise MetricError("preds and truths must be equal-length and non-empty")
    err = p - y
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    spread = float(np.sqrt(((y - y.mean()) ** 2).mean()))
    if spread == 0.0:
        raise MetricError("RRSE undefined: all truths identical")
    return mae, rmse, rmse / spread


def rmse(preds, truths) -> float:
    err = np.asarray(preds, dtype=np.float64) - np.asarray(truths, dtype=np.float64)
    return float(np.sqrt((err**2).mean()))


# ---------------------------------------------------------------------------
# harness


def rank_case(
    score_fn: Callable[[list[Instance]], np.ndarray],
    instance: Instance,
    space: FeatureSpace,
    visited: set[int],
    J: int,
    rng: Rng,
    side=None,
) -> RankedCase:
    """Rank the ground-truth object against ``J`` never-visited objects."""
    eligible = space.object_count - len(visited | {instance.object_id})
    count = min(J, eligible)
    negs = sample_negatives(visited | {instance.object_id}, space.object_count, count, rng) if count else []
    cands = [instance] + [instance.with_candidate(space, o, 0.0, side) for o in negs]
    scores = score_fn(cands)
    return RankedCase(rank_from_scores(scores[0], scores[1:]), len(cands))


def evaluate(
    model,
    instances: Sequence[Instance],
    task: str,
    visited: dict[int, set[int]],
    rng: Rng,
    J: int = 1000,
    ks: Sequence[int] = (5, 10, 20),
    labeled: bool | None = None,
    side=None,
) -> EvalReport:
    """Score a held-out split under the protocol for ``task``.

    ranking: HR@K / NDCG@K with ``J`` sampled candidates per case.
    classification: AUC / RMSE of sigmoid(score); with implicit data each
    positive is paired with one random never-visited negative.
    regression: MAE / RMSE / RRSE.
    """
    if not instances:
        raise MetricError("empty evaluation split")
    t0 = time.perf_counter()
    space = model.space
    metrics: dict[str, float] = {}
    if task == "ranking":
        cases = [
            rank_case(model.score, inst, space, visited.get(inst.user_id, set()), J, rng.stream(k), side)
            for k, inst in enumerate(instances)
        ]
        for k in ks:
            metrics[f"HR@{k}"] = hr_at_k(cases, k)
        for k in ks:
            metrics[f"NDCG@{k}"] = ndcg_at_k(cases, k)
        count = len(cases)
    elif task == "classification":
        insts = list(instances)
        if labeled is None:
            labeled = any(i.label == 0.0 for i in insts)
        if not labeled:
            extra = []
            for k, inst in enumerate(insts):
                seen = visited.get(inst.user_id, set()) | {inst.object_id}
                try:
                    (neg,) = sample_negatives(seen, space.object_count, 1, rng.stream(k))
                except SamplingError:
                    continue
                extra.append(inst.with_candidate(space, neg, 0.0, side))
            insts = [i.with_candidate(space, i.object_id, 1.0, side) for i in insts] + extra
        scores = model.score(insts)
        labels = np.array([i.label for i in insts])
        metrics["AUC"] = auc(scores[labels == 1.0], scores[labels == 0.0])
        metrics["RMSE"] = rmse(sigmoid(scores), labels)
        count = len(insts)
    elif task == "regression":
        preds = model.score(list(instances))
        truths = np.array([i.label for i in instances])
        mae, r, rrse = regression_metrics(preds, truths)
        metrics.update({"MAE": mae, "RMSE": r, "RRSE": rrse})
        count = len(instances)
    else:
        raise MetricError(f"unknown task {task!r}")
    return EvalReport(task, metrics, count, time.perf_counter() - t0)
