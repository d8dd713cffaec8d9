"""Task heads, losses, batch assembly, the training loop and grid search."""

from __future__ import annotations

import enum
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .evaluation import evaluate
from .featurestore import Instance, SamplingError, SplitDataset, is_explicit_binary, sample_negatives
from .model import HyperConfig, PlainFM, SeqFM

log = logging.getLogger(__name__)


class TaskKind(str, enum.Enum):
    RANKING = "ranking"
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


class TrainingError(RuntimeError):
    pass


class NumericFailure(TrainingError):
    pass


# ---------------------------------------------------------------------------
# losses


def bpr_loss(score_pos, score_neg):
    """``-ln sigmoid(pos - neg)`` with gradients w.r.t. both scores."""
    delta = np.asarray(score_pos, dtype=np.float64) - np.asarray(score_neg, dtype=np.float64)
    loss = nx.softplus(-delta)
    g = nx.sigmoid(-delta)  # 1 - sigmoid(delta)
    return loss, -g, g


def log_loss(raw_score, label):
    """Binary cross-entropy on ``sigmoid(raw_score)``; gradient is ``sigmoid(raw) - y``."""
    z = np.asarray(raw_score, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    loss = y * nx.softplus(-z) + (1.0 - y) * nx.softplus(z)
    return loss, nx.sigmoid(z) - y


def squared_loss(pred, truth):
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return diff * diff, 2.0 * diff


# ---------------------------------------------------------------------------
# config and reports


@dataclass
class TrainConfig:
    task: TaskKind = TaskKind.RANKING
    hyper: HyperConfig = field(default_factory=HyperConfig)
    learning_rate: float = 1e-4
    batch_size: int = 512
    negatives_per_positive: int = 5
    max_epochs: int = 200
    patience: int = 5
    seed: int = 0
    eval_candidates: int = 100
    workers: int = 1
    model: str = "seqfm"

    def __post_init__(self):
        self.task = TaskKind(self.task)
        if self.batch_size < 1 or self.max_epochs < 1 or self.workers < 1:
            raise ValueError("batch_size, max_epochs and workers must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "hyper": self.hyper.to_dict(),
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "negatives_per_positive": self.negatives_per_positive,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "eval_candidates": self.eval_candidates,
            "workers": self.workers,
            "model": self.model,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["hyper"] = HyperConfig(**d.get("hyper", {}))
        return cls(**d)


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    validation: list[float] = field(default_factory=list)
    epoch_times: list[float] = field(default_factory=list)
    metric_name: str = ""
    best_epoch: int = 0
    best_metric: float = float("nan")
    checkpoint_path: str | None = None
    skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "validation": self.validation,
            "epoch_times": self.epoch_times,
            "metric_name": self.metric_name,
            "best_epoch": self.best_epoch,
            "best_metric": self.best_metric,
            "checkpoint_path": self.checkpoint_path,
            "skipped": self.skipped,
        }


VALIDATION_METRIC = {
    TaskKind.RANKING: ("NDCG@10", True),
    TaskKind.CLASSIFICATION: ("AUC", True),
    TaskKind.REGRESSION: ("MAE", False),
}


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batches:
    batches: list[list]
    skipped: int = 0

    def __len__(self):
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    @property
    def size(self) -> int:
        return sum(len(b) for b in self.batches)


def make_training_triples(dataset: SplitDataset, rng: nx.Rng, cfg: TrainConfig) -> Batches:
    """One epoch of shuffled batches.

    ranking: ``(positive, negative)`` pairs, ``negatives_per_positive`` per positive.
    classification: labeled instances; implicit data gets sampled label-0 negatives.
    regression: observed instances only.
    """
    space = dataset.space
    items: list = []
    skipped = 0
    explicit = cfg.task is TaskKind.CLASSIFICATION and is_explicit_binary(dataset.train)
    if cfg.task is TaskKind.REGRESSION or explicit:
        items = list(dataset.train)
    else:
        neg_rng = rng.stream("negatives")
        k = cfg.negatives_per_positive
        for inst in dataset.train:
            seen = dataset.visited.get(inst.user_id, set()) | {inst.object_id}
            try:
                negs = sample_negatives(seen, space.object_count, k, neg_rng)
            except SamplingError:
                skipped += 1
                continue
            neg_insts = [inst.with_candidate(space, o, 0.0, dataset.side) for o in negs]
            if cfg.task is TaskKind.RANKING:
                items.extend((inst, n) for n in neg_insts)
            else:
                items.append(inst.with_candidate(space, inst.object_id, 1.0, dataset.side))
                items.extend(neg_insts)
    order = rng.stream("shuffle").permutation(len(items))
    items = [items[i] for i in order]
    bs = cfg.batch_size
    return Batches([items[s:s + bs] for s in range(0, len(items), bs)], skipped)


def _loss_fn(task: TaskKind, batch: Sequence, total: int):
    """Returns ``(instances, loss_grad)``; loss and grads are scaled by ``1/total``."""
    if task is TaskKind.RANKING:
        pos = [p for p, _ in batch]
        neg = [n for _, n in batch]
        m = len(pos)

        def loss_grad(scores):
            loss, dp, dn = bpr_loss(scores[:m], scores[m:])
            return loss.sum() / total, np.concatenate([dp, dn]) / total

        return pos + neg, loss_grad

    labels = np.array([i.label for i in batch], dtype=np.float64)
    head = log_loss if task is TaskKind.CLASSIFICATION else squared_loss

    def loss_grad(scores):
        loss, d = head(scores, labels)
        return loss.sum() / total, d / total

    return list(batch), loss_grad


def batch_gradient(model, task: TaskKind, batch: Sequence, rng: nx.Rng, workers: int = 1):
    """Mean loss and gradient over one batch, reduced across workers in fixed order."""
    total = len(batch)
    if workers <= 1 or total < 2 * workers:
        insts, lg = _loss_fn(task, batch, total)
        loss, _, grads = model.scores_and_grads(insts, lg, rng.stream(0))
        return loss, grads
    bounds = np.linspace(0, total, workers + 1).astype(int)
    chunks = [batch[bounds[i]:bounds[i + 1]] for i in range(workers)]

    def run(i):
        insts, lg = _loss_fn(task, chunks[i], total)
        return model.scores_and_grads(insts, lg, rng.stream(i))

    with ThreadPoolExecutor(max_workers=workers) as ex:
        results = list(ex.map(run, range(workers)))
    loss = sum(r[0] for r in results)
    grads = {k: sum(r[2][k] for r in results) for k in results[0][2]}
    return loss, grads


# ---------------------------------------------------------------------------
# training


def build_model(dataset: SplitDataset, cfg: TrainConfig, rng: nx.Rng):
    cls = {"seqfm": SeqFM, "plain_fm": PlainFM}[cfg.model]
    return cls.create(dataset.space, cfg.hyper, rng)


def validation_score(model, dataset: SplitDataset, cfg: TrainConfig, rng: nx.Rng) -> float:
    name, _ = VALIDATION_METRIC[cfg.task]
    report = evaluate(
        model, dataset.validation, cfg.task.value, dataset.visited, rng,
        J=cfg.eval_candidates, ks=(10,), side=dataset.side,
    )
    return report.metrics[name]


def train(dataset: SplitDataset, cfg: TrainConfig, checkpoint_path=None, model=None):
    """Mini-batch Adam with early stopping on the validation metric.

    Returns ``(model, report)`` where ``model`` holds the best-validation
    parameters.
    """
    if not dataset.train:
        raise TrainingError("no training data")
    if dataset.space is None:
        raise TrainingError("dataset carries no feature space")
    root = nx.Rng(cfg.seed)
    if model is None:
        model = build_model(dataset, cfg, root.stream("init"))
    state = nx.AdamState.for_params(model.tensors())
    metric_name, higher_better = VALIDATION_METRIC[cfg.task]
    report = TrainReport(metric_name=metric_name)
    best = None
    best_value = -math.inf
    stale = 0
    val_rng = root.stream("validation")
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        ep_rng = root.stream(f"epoch-{epoch}")
        batches = make_training_triples(dataset, ep_rng.stream("data"), cfg)
        if not len(batches):
            raise TrainingError("no training data")
        report.skipped = batches.skipped
        drop_rng = ep_rng.stream("dropout")
        total_loss = 0.0
        for b, batch in enumerate(batches):
            loss, grads = batch_gradient(model, cfg.task, batch, drop_rng.stream(b), cfg.workers)
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                nx.adam_step(model.tensors(), grads, state, cfg.learning_rate)
            except nx.UpdateError as exc:
                raise NumericFailure(f"epoch {epoch}, batch {b}: {exc}") from None
            total_loss += loss * len(batch)
        report.epoch_losses.append(total_loss / batches.size)
        value = validation_score(model, dataset, cfg, val_rng) if dataset.validation else -total_loss
        report.validation.append(value)
        report.epoch_times.append(time.perf_counter() - t0)
        signed = value if higher_better else -value
        if not math.isfinite(signed):
            raise NumericFailure(f"non-finite validation {metric_name} at epoch {epoch}")
        log.info("epoch %d loss %.6f %s %.6f", epoch, report.epoch_losses[-1], metric_name, value)
        if signed > best_value:
            best_value = signed
            best = model.snapshot()
            report.best_epoch = epoch
            report.best_metric = value
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.restore(best)
    if checkpoint_path is not None:
        save_checkpoint(model.params, cfg.hyper, dataset.space, checkpoint_path, extra={"train": cfg.to_dict()})
        report.checkpoint_path = str(checkpoint_path)
    return model, report


# ---------------------------------------------------------------------------
# grid search

GRID_KEYS = ("d", "l", "n_dyn_max", "keep_prob")
FULL_GRID = {
    "d": [8, 16, 32, 64, 128],
    "l": [1, 2, 3, 4, 5],
    "n_dyn_max": [10, 20, 30, 40, 50],
    "keep_prob": [0.5, 0.6, 0.7, 0.8, 0.9],
}


@dataclass
class GridRow:
    point: dict
    hyper: HyperConfig | None
    metric: float | None
    error: str | None = None


def _grid_combos(base: HyperConfig, grids: dict) -> list[dict]:
    axes = [grids.get(k) or [getattr(base, k)] for k in GRID_KEYS]
    return [dict(zip(GRID_KEYS, combo)) for combo in itertools.product(*axes)]


def grid_points(base: HyperConfig, grids: dict) -> list[HyperConfig]:
    return [replace(base, **c) for c in _grid_combos(base, grids)]


def grid_search(dataset: SplitDataset, base_cfg: TrainConfig, grids: dict, out_dir=None):
    """Train one model per grid point and pick the best by validation metric.

    Ties go to smaller ``(d, l, n_dyn_max)`` and then larger ``keep_prob``.
    Failed points, including invalid values, stay in the rows with their error.
    """
    unknown = set(grids) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    _, higher_better = VALIDATION_METRIC[base_cfg.task]
    rows: list[GridRow] = []
    for k, combo in enumerate(_grid_combos(base_cfg.hyper, grids)):
        point = {key: combo[key] for key in grids if grids[key]}
        ckpt = Path(out_dir) / f"grid-{k:03d}.ckpt" if out_dir else None
        hyper = None
        try:
            hyper = replace(base_cfg.hyper, **combo)
            _, rep = train(dataset, replace(base_cfg, hyper=hyper), ckpt)
            rows.append(GridRow(point, hyper, rep.best_metric))
        except (TrainingError, ValueError, FloatingPointError) as exc:
            log.warning("grid point %s failed: %s", point, exc)
            rows.append(GridRow(point, hyper, None, str(exc)))
    ok = [r for r in rows if r.metric is not None]
    if not ok:
        raise TrainingError("every grid point failed")

    def key(r: GridRow):
        h = r.hyper
        return (-r.metric if higher_better else r.metric, h.d, h.l, h.n_dyn_max, -h.keep_prob)

    best = min(ok, key=key)
    return replace(base_cfg, hyper=best.hyper), rows
