"""Finite-difference checks for every differentiable op and the composite losses.

Each case reduces its op's output to a scalar through a fixed random
projection so the backward rule is exercised with a non-uniform upstream
gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Episode
from .pool import ADAPTER, BackboneSpec, ModelPool, init_base, init_selector, select_logits

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
KINK_MARGIN = 0.05
# the step-1e-3 stencil's truncation error is ~1e-6 absolute on the curved ops,
# so tiny gradient entries would fail a relative test for no fault of the rule
GRAD_FLOOR = 0.05


@dataclass(frozen=True)
class CheckResult:
    op: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _projected(op: Callable[..., T.Tensor], weights: np.ndarray) -> Callable[..., T.Tensor]:
    def f(*xs):
        return T.total(T.mul(op(*xs), T.Tensor(weights)))
    return f


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    # keeps relu's kink out of the finite-difference stencil
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _unit_spread_rows(rng: np.random.Generator, shape) -> np.ndarray:
    # layer norm's curvature grows like 1/std^3; keep each row's spread at 1
    x = rng.standard_normal(shape)
    return x / x.std(axis=1, keepdims=True)


def _curved(rng: np.random.Generator, build):
    """Redraw ``build(rng) -> (f, xs)`` until no gradient entry is below GRAD_FLOOR."""
    while True:
        f, xs = build(rng)
        with T.precision(np.float64):
            leaves = [T.Tensor(np.asarray(x, np.float64), requires_grad=True) for x in xs]
            grads = T.gradients(f(*leaves), leaves)
        if min(float(np.abs(g).min()) for g in grads) >= GRAD_FLOOR:
            return f, xs


def _primitive_cases(rng: np.random.Generator):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    v, row = rng.standard_normal(4), rng.standard_normal(4)
    m = rng.standard_normal((3, 4))
    w32, w34, w4, w24 = (rng.standard_normal(s) for s in ((3, 2), (3, 4), (4,), (2, 4)))
    cases = [
        ("matmul", _projected(T.matmul, w32), [a, b]),
        ("matmul_vector", _projected(T.matmul, rng.standard_normal(2)), [v, b]),
        ("add", _projected(T.add, w34), [a, m]),
        ("add_row_broadcast", _projected(T.add, w34), [a, row]),
        ("mul", _projected(T.mul, w34), [a, m]),
        ("mul_row_broadcast", _projected(T.mul, w34), [a, row]),
        ("neg", _projected(T.neg, w34), [a]),
        ("scale", _projected(lambda x: T.scale(x, 0.37), w34), [a]),
        ("relu", _projected(T.relu, w34), [_away_from_zero(rng, (3, 4))]),
        ("total", T.total, [a]),
        ("mean", T.mean, [a]),
        ("mean_rows", _projected(T.mean_rows, w4), [a]),
        ("rows", _projected(lambda x: T.rows(x, 1, 3), w24), [a]),
        ("pairwise_sq_dist", _projected(T.pairwise_sq_dist, w32), [a, rng.standard_normal((2, 4))]),
    ]
    curved = [
        ("layer_norm", lambda r: (_projected(T.layer_norm, r.standard_normal((3, 4))), [_unit_spread_rows(r, (3, 4))])),
        ("log_softmax", lambda r: (_projected(T.log_softmax, r.standard_normal(4)), [r.standard_normal(4)])),
        ("log_softmax_rows",
         lambda r: (_projected(T.log_softmax, r.standard_normal((3, 4))), [r.standard_normal((3, 4))])),
        ("cross_entropy", lambda r: (lambda x: T.cross_entropy(x, 2), [r.standard_normal(4)])),
        ("cross_entropy_rows",
         lambda r: (lambda x: T.cross_entropy(x, np.array([0, 3, 1])), [r.standard_normal((3, 4))])),
    ]
    cases += [(name, *_curved(rng, build)) for name, build in curved]
    return cases


def _tiny_episode(rng: np.random.Generator, input_dim: int) -> Episode:
    way, shot, queries = 2, 1, 2
    centers = rng.standard_normal((way, input_dim))
    sx = np.repeat(centers, shot, axis=0) + 0.5 * rng.standard_normal((way * shot, input_dim))
    qx = np.repeat(centers, queries, axis=0) + 0.5 * rng.standard_normal((way * queries, input_dim))
    return Episode(way, shot, queries,
                   sx.astype(np.float32), np.repeat(np.arange(way), shot),
                   qx.astype(np.float32), np.repeat(np.arange(way), queries))


def _relu_margin(pool: ModelPool, x: np.ndarray, model_index: int) -> float:
    """Smallest distance of any hidden relu input to the kink."""
    theta, mod = pool.theta, pool.modulator(model_index).params
    h, worst = x.astype(np.float64), np.inf
    for l in range(len(pool.spec.layer_widths) - 1):
        h = h @ theta[f"layer{l}.weight"] + theta[f"layer{l}.bias"]
        h = h + h @ mod[f"layer{l}.adapter"]
        worst = min(worst, float(np.abs(h).min()))
        h = np.maximum(h, 0)
    return worst


def _proto_case(rng: np.random.Generator):
    from .train import prototypical_loss

    # finite differences are only meaningful away from relu kinks, so redraw until clear
    spec = BackboneSpec(4, (6, 4), normalize=False)
    while True:
        pool = ModelPool.create(spec, init_base(spec, rng), ADAPTER, ["a"])
        for v in pool.modulators[0].params.values():
            v[...] = 0.1 * rng.standard_normal(v.shape)
        episode = _tiny_episode(rng, spec.input_dim)
        x = np.concatenate([episode.support_x, episode.query_x])
        if _relu_margin(pool, x, 1) > KINK_MARGIN:
            break
    names = pool.theta_names() + pool.modulator_names(1)
    arrays = pool.named_parameters()

    def proto(*tensors):
        return prototypical_loss(episode, pool, 1, dict(zip(names, tensors)))

    return proto, [arrays[n] for n in names]


def _composite_cases(rng: np.random.Generator):
    while True:
        phi = init_selector(3, 6, 2, rng)
        phi["fc1.bias"][...] = 0.1 * rng.standard_normal(6)
        z = rng.standard_normal(3)
        if np.abs(z @ phi["fc1.weight"] + phi["fc1.bias"]).min() > KINK_MARGIN:
            break
    phi_names = list(phi)

    def selector(*tensors):
        return T.cross_entropy(select_logits(T.Tensor(z), dict(zip(phi_names, tensors))), 1)

    return [
        ("prototypical_loss", *_proto_case(rng)),
        ("selector_loss", selector, [phi[n] for n in phi_names]),
    ]


def run(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = [CheckResult(name, T.grad_check(f, xs), PRIMITIVE_TOL) for name, f, xs in _primitive_cases(rng)]
    out += [CheckResult(name, T.grad_check(f, xs), COMPOSITE_TOL) for name, f, xs in _composite_cases(rng)]
    return out
