"""The three sequential training stages plus the independent-model baseline.

1. ``train_base``: supervised pretraining of the shared base over all
   source classes (temporary linear head, discarded afterwards).
2. ``train_modulator``: prototypical episodic training of one domain's
   modulator with the base frozen.
3. ``train_selector``: the selection network learns to predict, from the
   mean base embedding of a support set, which pool member classifies the
   episode's queries best.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .data import AggregateDataset, ClassSplit, DomainDataset, Episode, sample_episode
from .pool import (
    IDENTITY,
    BackboneSpec,
    ModelPool,
    Params,
    _glorot,
    embed,
    init_base,
    init_selector,
    leaves_for,
    select_logits,
)
from .tensor import (
    AdamState,
    Tensor,
    adam_step,
    add,
    cross_entropy,
    gradients,
    matmul,
    mean_rows,
    neg,
    pairwise_sq_dist,
    rows,
)

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, stage: str, step: int, loss: float):
        super().__init__(f"{stage}: non-finite loss {loss!r} at step {step}")
        self.stage = stage
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 1000
    eval_every: int = 100
    patience: int = 5
    val_episodes: int = 40
    seed: int = 0
    way: int = 5
    shot: int = 5
    query: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")
        for name in ("batch_size", "eval_every", "patience", "way", "shot", "query"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.val_episodes < 0:
            raise ValueError("val_episodes must be non-negative")


@dataclass(frozen=True)
class SelectionLabel:
    y_sel: int
    accuracies: tuple[float, ...]
    correct: tuple[int, ...]


# A log sink receives (stage, step, loss, val_metric) rows.
LogFn = Callable[[str, int, float, float], None]


def _no_log(stage, step, loss, metric):
    pass


def _rngs(seed, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class _BestTracker:
    """Early stopping on a maximized validation metric."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.snapshot: dict[str, np.ndarray] | None = None
        self.bad = 0

    def update(self, metric: float, arrays: dict[str, np.ndarray]) -> bool:
        if metric > self.best:
            self.best = metric
            self.snapshot = {k: v.copy() for k, v in arrays.items()}
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        if self.snapshot is not None:
            for k, v in self.snapshot.items():
                arrays[k][...] = v


def _check(loss: Tensor, stage: str, step: int) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError(stage, step, value)
    return value


# ---------------------------------------------------------------------------
# prototypes


def prototype_matrix(labels: np.ndarray, way: int, dtype=np.float32) -> np.ndarray:
    """(way, n) matrix whose product with support embeddings gives class means."""
    A = np.zeros((way, labels.shape[0]), dtype=dtype)
    for c in range(way):
        members = labels == c
        A[c, members] = 1.0 / members.sum()
    return A


def proto_logits(support: Tensor, support_y: np.ndarray, query: Tensor, way: int) -> Tensor:
    protos = matmul(Tensor(prototype_matrix(support_y, way)), support)
    return neg(pairwise_sq_dist(query, protos))


def prototypical_loss(episode: Episode, pool: ModelPool, model_index: int, leaves=None) -> Tensor:
    """Mean query cross-entropy over negative squared distances to class prototypes."""
    ns = episode.support_x.shape[0]
    x = np.concatenate([episode.support_x, episode.query_x])
    emb = embed(x, pool, model_index, leaves)
    logits = proto_logits(rows(emb, 0, ns), episode.support_y, rows(emb, ns, x.shape[0]), episode.way)
    return cross_entropy(logits, episode.query_y)


def proto_predict(support: np.ndarray, support_y: np.ndarray, query: np.ndarray, way: int) -> np.ndarray:
    """Nearest-prototype labels; ties go to the lowest class index."""
    protos = prototype_matrix(support_y, way, support.dtype) @ support
    d = pairwise_sq_dist(Tensor(query), Tensor(protos)).data
    return np.argmin(d, axis=1)


def model_correct(episode: Episode, pool: ModelPool, model_index: int) -> int:
    ns = episode.support_x.shape[0]
    emb = embed(np.concatenate([episode.support_x, episode.query_x]), pool, model_index).data
    pred = proto_predict(emb[:ns], episode.support_y, emb[ns:], episode.way)
    return int((pred == episode.query_y).sum())


def episode_accuracy(episodes: Sequence[Episode], pool: ModelPool, model_index: int) -> float:
    if not episodes:
        return 0.0
    hits = sum(model_correct(ep, pool, model_index) for ep in episodes)
    return hits / sum(ep.query_y.shape[0] for ep in episodes)


def validation_episodes(datasets: Sequence[DomainDataset], splits: Sequence[ClassSplit], cfg: TrainConfig,
                        rng: np.random.Generator) -> list[Episode]:
    usable = [(ds, sp) for ds, sp in zip(datasets, splits) if len(sp.val) >= cfg.way]
    if not usable or cfg.val_episodes == 0:
        return []
    out = []
    for _ in range(cfg.val_episodes):
        ds, sp = usable[int(rng.integers(len(usable)))]
        out.append(sample_episode(ds, sp.val, cfg.way, cfg.shot, cfg.query, rng))
    return out


# ---------------------------------------------------------------------------
# step 1


def train_base(agg: AggregateDataset, spec: BackboneSpec, cfg: TrainConfig,
               val_episodes: Sequence[Episode] = (), log: LogFn = _no_log) -> Params:
    """Supervised pretraining of the shared base network over all aggregated classes."""
    if agg.x.shape[0] == 0:
        raise ValueError("aggregate dataset is empty")
    rng_init, rng_batch = _rngs(cfg.seed, 2)
    theta = init_base(spec, rng_init)
    head = {"head.weight": _glorot(rng_init, spec.embed_dim, agg.class_count),
            "head.bias": np.zeros(agg.class_count, np.float32)}
    if cfg.steps == 0:
        return theta
    pool = ModelPool(spec, theta, IDENTITY)
    names = pool.theta_names()
    arrays = {**pool.named_parameters(), **head}
    order = names + list(head)
    state = AdamState.for_params([arrays[n] for n in order], lr=cfg.lr)
    tracker = _BestTracker(cfg.patience)
    n = agg.x.shape[0]
    batch = min(cfg.batch_size, n)
    for step in range(1, cfg.steps + 1):
        idx = rng_batch.choice(n, size=batch, replace=False)
        leaves = leaves_for(arrays, order)
        z = embed(agg.x[idx], pool, 0, leaves)
        logits = add(matmul(z, leaves["head.weight"]), leaves["head.bias"])
        loss = cross_entropy(logits, agg.y[idx])
        value = _check(loss, "base", step)
        adam_step([arrays[k] for k in order], gradients(loss, [leaves[k] for k in order]), state)
        if val_episodes and (step % cfg.eval_every == 0 or step == cfg.steps):
            metric = episode_accuracy(val_episodes, pool, 0)
            log("base", step, value, metric)
            if tracker.update(metric, pool.theta):
                break
        elif step % cfg.eval_every == 0:
            log("base", step, value, float("nan"))
    tracker.restore(pool.theta)
    return theta


# ---------------------------------------------------------------------------
# step 2 and the independent baseline


def _episodic(pool: ModelPool, model_index: int, names: list[str], params: Params,
              dataset: DomainDataset, split: ClassSplit, cfg: TrainConfig, stage: str,
              log: LogFn) -> None:
    """Prototypical episodic training of ``params`` (updated in place)."""
    rng_train, rng_val = _rngs(cfg.seed, 2)
    arrays = pool.named_parameters()
    val = validation_episodes([dataset], [split], cfg, rng_val)
    tracker = _BestTracker(cfg.patience)
    if val and cfg.steps:
        tracker.update(episode_accuracy(val, pool, model_index), params)
    state = AdamState.for_params([arrays[n] for n in names], lr=cfg.lr)
    for step in range(1, cfg.steps + 1):
        ep = sample_episode(dataset, split.train, cfg.way, cfg.shot, cfg.query, rng_train)
        leaves = leaves_for(arrays, names)
        loss = prototypical_loss(ep, pool, model_index, leaves)
        value = _check(loss, stage, step)
        adam_step([arrays[n] for n in names], gradients(loss, [leaves[n] for n in names]), state)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            metric = episode_accuracy(val, pool, model_index) if val else float("nan")
            log(stage, step, value, metric)
            if val and tracker.update(metric, params):
                break
    tracker.restore(params)


def train_modulator(dataset: DomainDataset, split: ClassSplit, pool: ModelPool, slot: int,
                    cfg: TrainConfig, log: LogFn = _no_log) -> Params:
    """Train modulator ``slot`` (1..M) on ``dataset`` with the base frozen; returns its params."""
    if not 1 <= slot < pool.size:
        raise IndexError(f"modulator slot {slot} outside 1..{pool.size - 1}")
    params = pool.modulators[slot - 1].params
    _episodic(pool, slot, pool.modulator_names(slot), params, dataset, split, cfg,
              f"modulator{slot}", log)
    return params


def train_independent(dataset: DomainDataset, split: ClassSplit, spec: BackboneSpec,
                      cfg: TrainConfig, log: LogFn = _no_log) -> Params:
    """A standalone embedding network trained prototypically from scratch on one domain."""
    rng_init = _rngs(cfg.seed, 3)[2]
    theta = init_base(spec, rng_init)
    pool = ModelPool(spec, theta, IDENTITY)
    _episodic(pool, 0, pool.theta_names(), theta, dataset, split, cfg, f"independent:{dataset.name}", log)
    return theta


# ---------------------------------------------------------------------------
# step 3


def task_representation(episode: Episode, pool: ModelPool) -> Tensor:
    """Mean unmodulated embedding of the support set."""
    return mean_rows(embed(episode.support_x, pool, 0))


def best_model_label(episode: Episode, pool: ModelPool) -> SelectionLabel:
    """Index of the pool member with the highest query accuracy (lowest index on ties)."""
    correct = tuple(model_correct(episode, pool, i) for i in range(pool.size))
    total = episode.query_y.shape[0]
    return SelectionLabel(int(np.argmax(correct)), tuple(c / total for c in correct), correct)


def train_selector(datasets: Sequence[DomainDataset], splits: Sequence[ClassSplit], pool: ModelPool,
                   cfg: TrainConfig, hidden: int = 128, log: LogFn = _no_log) -> Params:
    """Fit the selection network on best-model labels; the pool stays frozen."""
    if len(datasets) != len(splits) or not datasets:
        raise ValueError("train_selector needs matching, non-empty datasets and splits")
    rng_init, rng_train, rng_val = _rngs(cfg.seed, 3)
    phi = init_selector(pool.spec.embed_dim, hidden, pool.size, rng_init)
    names = list(phi)
    val = [(task_representation(ep, pool).data, best_model_label(ep, pool).y_sel)
           for ep in validation_episodes(datasets, splits, cfg, rng_val)]

    def agreement() -> float:
        hits = sum(int(np.argmax(select_logits(z, phi).data)) == y for z, y in val)
        return hits / len(val)

    tracker = _BestTracker(cfg.patience)
    if val and cfg.steps:
        tracker.update(agreement(), phi)
    state = AdamState.for_params([phi[n] for n in names], lr=cfg.lr)
    for step in range(1, cfg.steps + 1):
        k = int(rng_train.integers(len(datasets)))
        ep = sample_episode(datasets[k], splits[k].train, cfg.way, cfg.shot, cfg.query, rng_train)
        z = task_representation(ep, pool)
        y = best_model_label(ep, pool).y_sel
        leaves = leaves_for(phi, names)
        loss = cross_entropy(select_logits(z, leaves), y)
        value = _check(loss, "selector", step)
        adam_step([phi[n] for n in names], gradients(loss, [leaves[n] for n in names]), state)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            metric = agreement() if val else float("nan")
            log("selector", step, value, metric)
            if val and tracker.update(metric, phi):
                break
    tracker.restore(phi)
    return phi


def stage_config(cfg: TrainConfig, **overrides) -> TrainConfig:
    return replace(cfg, **overrides)
