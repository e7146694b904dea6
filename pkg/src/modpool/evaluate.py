"""Inference methods and the episodic evaluation harness.

Methods:

- ``proto``: nearest prototype under the unmodulated base (model 0).
- ``dos``: the selection network picks one pool member per episode.
- ``doa``: class probabilities averaged over all M + 1 pool members.
- ``simple_avg``: probabilities averaged over independently trained networks.
- ``fine_tune``: a linear head trained on the support set over base embeddings.

DoS/DoA on a channel-wise pool are the ``-Ch`` variants; the modulator kind
is a property of the pool, not of the method.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import ClassSplit, DomainDataset, Episode, sample_episode
from .pool import BackboneSpec, ModelPool, Params, embed, forward, init_head, select_logits, selector_arity
from .tensor import AdamState, Tensor, adam_step, add, cross_entropy, gradients, matmul
from .train import prototype_matrix, task_representation

logger = logging.getLogger(__name__)

METHODS = ("dos", "doa", "proto", "simple_avg", "fine_tune")
DEFAULT_EPISODES = 600
DEFAULT_QUERIES = 10
DEFAULT_WAY = 5
DEFAULT_SHOT = 5
FT_ITERATIONS = 100
FT_LR = 0.01


class ConfigurationError(ValueError):
    pass


class ProtocolViolation(RuntimeError):
    """An unseen-domain evaluation would score a domain the models were trained on."""


@dataclass
class IndependentPool:
    """Separately trained embedding networks, one per source domain, sharing nothing."""

    spec: BackboneSpec
    members: list[Params]
    domains: list[str]

    def embed(self, x: np.ndarray, member: int) -> np.ndarray:
        theta = {k: Tensor(v) for k, v in self.members[member].items()}
        return forward(Tensor(x), self.spec, theta).data


EmbedFn = Callable[[np.ndarray], np.ndarray]


def _softmax_neg(d: np.ndarray) -> np.ndarray:
    s = -np.asarray(d, dtype=np.float64)
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax_neg(-np.asarray(logits, dtype=np.float64))


def classify_probs(episode: Episode, embed_fn: EmbedFn) -> np.ndarray:
    """Per-query softmax over negative squared distances to the support prototypes."""
    ns = episode.support_x.shape[0]
    emb = embed_fn(np.concatenate([episode.support_x, episode.query_x]))
    s, q = emb[:ns], emb[ns:]
    protos = prototype_matrix(episode.support_y, episode.way, s.dtype) @ s
    diff = q[:, None, :].astype(np.float64) - protos[None, :, :]
    return _softmax_neg(np.einsum("ijk,ijk->ij", diff, diff))


def _model(pool: ModelPool, index: int) -> EmbedFn:
    return lambda x: embed(x, pool, index).data


def predict_proto(episode: Episode, pool: ModelPool):
    probs = classify_probs(episode, _model(pool, 0))
    return probs.argmax(axis=1), probs


def choose_model(episode: Episode, pool: ModelPool, phi: Mapping[str, np.ndarray]) -> int:
    if selector_arity(phi) != pool.size:
        raise ConfigurationError(
            f"selector predicts {selector_arity(phi)} models but the pool has {pool.size}")
    z = task_representation(episode, pool).data
    return int(np.argmax(select_logits(z, phi).data))


def predict_dos(episode: Episode, pool: ModelPool, phi: Mapping[str, np.ndarray]):
    """Returns ``(predictions, chosen_model, probabilities)``."""
    chosen = choose_model(episode, pool, phi)
    probs = classify_probs(episode, _model(pool, chosen))
    return probs.argmax(axis=1), chosen, probs


def predict_doa(episode: Episode, pool: ModelPool):
    """Returns ``(predictions, averaged probabilities, per-model probabilities)``."""
    members = [classify_probs(episode, _model(pool, i)) for i in range(pool.size)]
    probs = np.mean(members, axis=0)
    return probs.argmax(axis=1), probs, members


def predict_simple_avg(episode: Episode, ipool: IndependentPool):
    members = [classify_probs(episode, lambda x, m=m: ipool.embed(x, m)) for m in range(len(ipool.members))]
    probs = np.mean(members, axis=0)
    return probs.argmax(axis=1), probs, members


def fine_tune_linear(support_emb: np.ndarray, support_y: np.ndarray, query_emb: np.ndarray, way: int,
                     iterations: int = FT_ITERATIONS, lr: float = FT_LR):
    """Train a zero-initialized linear head on frozen support embeddings.

    Full-batch Adam for ``iterations`` steps; returns ``(query predictions,
    query probabilities, head)``.
    """
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    head = init_head(support_emb.shape[1], way)
    names = list(head)
    state = AdamState.for_params([head[n] for n in names], lr=lr)
    xs = Tensor(support_emb)
    for _ in range(iterations):
        leaves = {n: Tensor(head[n], requires_grad=True) for n in names}
        loss = cross_entropy(add(matmul(xs, leaves["weight"]), leaves["bias"]), support_y)
        adam_step([head[n] for n in names], gradients(loss, [leaves[n] for n in names]), state)
    logits = query_emb @ head["weight"] + head["bias"]
    probs = _softmax(logits)
    return probs.argmax(axis=1), probs, head


def _fine_tune_with(episode: Episode, embed_fn: EmbedFn, iterations: int, lr: float):
    ns = episode.support_x.shape[0]
    emb = embed_fn(np.concatenate([episode.support_x, episode.query_x]))
    preds, probs, _ = fine_tune_linear(emb[:ns], episode.support_y, emb[ns:], episode.way, iterations, lr)
    return preds, probs


@dataclass
class EpisodeResult:
    predictions: np.ndarray
    probs: np.ndarray
    chosen: int = -1
    member_correct: list[int] | None = None


def run_method(method: str, episode: Episode, pool: ModelPool | None = None,
               phi: Mapping[str, np.ndarray] | None = None, ipool: IndependentPool | None = None,
               further_adapt: bool = False, ft_iterations: int = FT_ITERATIONS,
               ft_lr: float = FT_LR) -> EpisodeResult:
    """Apply one inference method to an episode whose provenance has been stripped."""
    ep = episode.anonymous()
    y = ep.query_y

    def counts(members):
        return [int((m.argmax(axis=1) == y).sum()) for m in members]

    if method == "proto":
        if further_adapt:
            return EpisodeResult(*_fine_tune_with(ep, _model(pool, 0), ft_iterations, ft_lr))
        preds, probs = predict_proto(ep, pool)
        return EpisodeResult(preds, probs)
    if method == "fine_tune":
        return EpisodeResult(*_fine_tune_with(ep, _model(pool, 0), ft_iterations, ft_lr))
    if method == "dos":
        if phi is None:
            raise ConfigurationError("method dos needs a trained selection network (stage 'selector')")
        if further_adapt:
            chosen = choose_model(ep, pool, phi)
            preds, probs = _fine_tune_with(ep, _model(pool, chosen), ft_iterations, ft_lr)
            return EpisodeResult(preds, probs, chosen)
        preds, chosen, probs = predict_dos(ep, pool, phi)
        return EpisodeResult(preds, probs, chosen)
    if method == "doa":
        preds, probs, members = predict_doa(ep, pool)
        if further_adapt:
            preds, probs = _fine_tune_with(ep, _model(pool, 0), ft_iterations, ft_lr)
        return EpisodeResult(preds, probs, member_correct=counts(members))
    if method == "simple_avg":
        if ipool is None:
            raise ConfigurationError("method simple_avg needs an independent-models checkpoint")
        preds, probs, members = predict_simple_avg(ep, ipool)
        if further_adapt:
            adapted = [_fine_tune_with(ep, lambda x, m=m: ipool.embed(x, m), ft_iterations, ft_lr)[1]
                       for m in range(len(ipool.members))]
            probs = np.mean(adapted, axis=0)
            preds = probs.argmax(axis=1)
        return EpisodeResult(preds, probs, member_correct=counts(members))
    raise ConfigurationError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


@dataclass
class EvalReport:
    method: str
    domains: list[str]
    accuracies: list[float]
    episode_domains: list[str]
    chosen: list[int]
    contributions: list[list[int]] | None
    settings: dict[str, str] = field(default_factory=dict)
    max_row_error: float = 0.0

    @property
    def episodes(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def ci95(self) -> float:
        return confidence_halfwidth(self.accuracies)

    def by_domain(self) -> dict[str, tuple[float, float, int]]:
        out = {}
        for name in self.domains:
            accs = [a for a, d in zip(self.accuracies, self.episode_domains) if d == name]
            if accs:
                out[name] = (float(np.mean(accs)), confidence_halfwidth(accs), len(accs))
        return out

    def chosen_frequencies(self, n_models: int) -> list[int]:
        freq = [0] * n_models
        for c in self.chosen:
            if c >= 0:
                freq[c] += 1
        return freq


def confidence_halfwidth(values: Sequence[float]) -> float:
    """Normal-approximation 95% half-width, 1.96 * sample std / sqrt(n)."""
    n = len(values)
    if n < 2:
        return 0.0
    return float(1.96 * np.std(values, ddof=1) / np.sqrt(n))


def evaluate(method: str, datasets: Sequence[DomainDataset], splits: Sequence[ClassSplit], *,
             pool: ModelPool | None = None, phi: Mapping[str, np.ndarray] | None = None,
             ipool: IndependentPool | None = None, part: str = "test",
             episodes: int = DEFAULT_EPISODES, way: int = DEFAULT_WAY, shot: int = DEFAULT_SHOT,
             query: int = DEFAULT_QUERIES, seed: int = 0, further_adapt: bool = False,
             holdout: str | None = None, sources: Sequence[str] | None = None,
             ft_iterations: int = FT_ITERATIONS, ft_lr: float = FT_LR) -> EvalReport:
    """Score ``method`` on ``episodes`` episodes drawn uniformly over the target datasets.

    With ``holdout`` set this is the unseen-domain protocol: the targets must be
    exactly that domain and it must not appear among the training ``sources``
    (defaults to the domain list of whichever pool is supplied).
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method == "simple_avg":
        if ipool is None:
            raise ConfigurationError("method simple_avg needs an independent-models checkpoint")
    elif pool is None:
        raise ConfigurationError(f"method {method} needs a shared-base pool checkpoint")
    names = [ds.name for ds in datasets]
    if holdout is not None:
        if sources is None:
            sources = ipool.domains if method == "simple_avg" else pool.domains
        if holdout in sources:
            raise ProtocolViolation(
                f"held-out domain {holdout!r} is among the training sources {list(sources)}")
        if names != [holdout]:
            raise ProtocolViolation(f"unseen protocol scores only {holdout!r}, got targets {names}")
    streams = np.random.SeedSequence(seed).spawn(episodes)
    accs, ep_domains, chosen, contrib = [], [], [], []
    worst = 0.0
    for s in streams:
        rng = np.random.default_rng(s)
        k = int(rng.integers(len(datasets)))
        ep = sample_episode(datasets[k], splits[k].part(part), way, shot, query, rng)
        res = run_method(method, ep, pool, phi, ipool, further_adapt, ft_iterations, ft_lr)
        worst = max(worst, float(np.abs(res.probs.sum(axis=1) - 1.0).max()))
        accs.append(float((res.predictions == ep.query_y).mean()))
        ep_domains.append(datasets[k].name)
        chosen.append(res.chosen)
        if res.member_correct is not None:
            contrib.append(res.member_correct)
    settings = {"method": method, "way": str(way), "shot": str(shot), "query": str(query),
                "episodes": str(episodes), "seed": str(seed), "split": part,
                "further_adapt": "1" if further_adapt else "0",
                "protocol": "unseen" if holdout is not None else "seen"}
    if holdout is not None:
        settings["holdout"] = holdout
    return EvalReport(method, names, accs, ep_domains, chosen, contrib or None, settings, worst)


def contribution_report(episodes: Sequence[Episode], pool: ModelPool | None = None,
                        ipool: IndependentPool | None = None) -> np.ndarray:
    """(episodes, models) table of queries each member classifies correctly on its own."""
    if (pool is None) == (ipool is None):
        raise ConfigurationError("pass exactly one of pool or ipool")
    rows = []
    for ep in episodes:
        ep = ep.anonymous()
        if pool is not None:
            members = [classify_probs(ep, _model(pool, i)) for i in range(pool.size)]
        else:
            members = [classify_probs(ep, lambda x, m=m: ipool.embed(x, m)) for m in range(len(ipool.members))]
        rows.append([int((m.argmax(axis=1) == ep.query_y).sum()) for m in members])
    return np.array(rows, dtype=np.int64)


# ---------------------------------------------------------------------------
# report file


def format_report(report: EvalReport, extra: Mapping[str, str] | None = None) -> str:
    out = io.StringIO()
    header = {**report.settings, **(extra or {})}
    header["domains"] = ",".join(report.domains)
    header["mean"] = f"{report.mean:.6f}"
    header["ci95"] = f"{report.ci95:.6f}"
    for k, v in header.items():
        out.write(f"{k}={v}\n")
    out.write("\nepisode_index,domain,accuracy,chosen_model\n")
    for i, (acc, dom, ch) in enumerate(zip(report.accuracies, report.episode_domains, report.chosen)):
        out.write(f"{i},{dom},{acc:.6f},{ch}\n")
    if report.contributions:
        out.write("\n")
        out.write(format_contributions(report.contributions))
    return out.getvalue()


def format_contributions(table) -> str:
    lines = ["episode_index,model_index,correct_count\n"]
    for i, row in enumerate(table):
        for m, c in enumerate(row):
            lines.append(f"{i},{m},{int(c)}\n")
    return "".join(lines)


def parse_report(text: str) -> dict:
    """Inverse of :func:`format_report` for the parts a reader needs."""
    blocks = text.split("\n\n")
    header = dict(line.split("=", 1) for line in blocks[0].splitlines() if line)
    episodes = []
    for line in blocks[1].splitlines()[1:]:
        i, dom, acc, ch = line.split(",")
        episodes.append((int(i), dom, float(acc), int(ch)))
    contributions = []
    if len(blocks) > 2:
        for line in blocks[2].splitlines()[1:]:
            if line:
                contributions.append(tuple(int(v) for v in line.split(",")))
    return {"header": header, "episodes": episodes, "contributions": contributions}
