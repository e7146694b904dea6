"""Shared-base embedding networks, per-domain modulators and the selection network.

Parameters live in plain ``dict[str, np.ndarray]`` maps. Forward passes wrap
them in :class:`~modpool.tensor.Tensor` leaves on demand, so a training step
can ask for gradients on exactly the subset it updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import DimensionError, Tensor, add, layer_norm, matmul, mul, relu

IDENTITY = "identity"
ADAPTER = "adapter"
CHANNEL = "channel"
KINDS = (IDENTITY, ADAPTER, CHANNEL)

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class BackboneSpec:
    input_dim: int
    layer_widths: tuple[int, ...]
    normalize: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or not self.layer_widths or min(self.layer_widths) < 1:
            raise ValueError(f"invalid backbone spec {self}")

    @property
    def embed_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def insertion_widths(self) -> tuple[int, ...]:
        # one modulator insertion point after every layer
        return self.layer_widths


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


def init_base(spec: BackboneSpec, rng: np.random.Generator) -> Params:
    theta: Params = {}
    fan_in = spec.input_dim
    for l, width in enumerate(spec.layer_widths):
        theta[f"layer{l}.weight"] = _glorot(rng, fan_in, width)
        theta[f"layer{l}.bias"] = np.zeros(width, np.float32)
        if spec.normalize:
            theta[f"layer{l}.norm_scale"] = np.ones(width, np.float32)
            theta[f"layer{l}.norm_shift"] = np.zeros(width, np.float32)
        fan_in = width
    return theta


@dataclass
class Modulator:
    kind: str
    params: Params = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown modulator kind {self.kind!r}")
        if self.kind == IDENTITY and self.params:
            raise ValueError("identity modulator carries no parameters")

    @property
    def size(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def init_modulator(spec: BackboneSpec, kind: str, rng: np.random.Generator | None = None) -> Modulator:
    """A modulator that leaves the base network unchanged until trained."""
    if kind == IDENTITY:
        raise ValueError("init_modulator needs a trainable kind")
    params: Params = {}
    for l, width in enumerate(spec.insertion_widths):
        if kind == ADAPTER:
            params[f"layer{l}.adapter"] = np.zeros((width, width), np.float32)
        elif kind == CHANNEL:
            params[f"layer{l}.scale"] = np.ones(width, np.float32)
            params[f"layer{l}.shift"] = np.zeros(width, np.float32)
        else:
            raise ValueError(f"unknown modulator kind {kind!r}")
    return Modulator(kind, params)


def count_modulator_params(insertion_widths: Sequence[int], kind: str) -> int:
    if kind == CHANNEL:
        return 2 * sum(insertion_widths)
    if kind == ADAPTER:
        return sum(w * w for w in insertion_widths)
    if kind == IDENTITY:
        return 0
    raise ValueError(f"unknown modulator kind {kind!r}")


# ResNet-18 residual-block geometry: 4 stages of 64/128/256/512 channels, 4 insertion points each
RESNET18_INSERTION_WIDTHS = (64,) * 4 + (128,) * 4 + (256,) * 4 + (512,) * 4


@dataclass
class ModelPool:
    """``M + 1`` embedding models sharing ``theta``; index 0 is unmodulated."""

    spec: BackboneSpec
    theta: Params
    kind: str
    modulators: list[Modulator] = field(default_factory=list)
    domains: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.modulators) != len(self.domains):
            raise ValueError(f"{len(self.modulators)} modulators but {len(self.domains)} domain names")
        for m in self.modulators:
            if m.kind != self.kind:
                raise ValueError(f"pool kind is {self.kind}, got a {m.kind} modulator")

    @property
    def size(self) -> int:
        """Number of models, M + 1."""
        return len(self.modulators) + 1

    @classmethod
    def create(cls, spec: BackboneSpec, theta: Params, kind: str, domains: Sequence[str]) -> "ModelPool":
        return cls(spec, theta, kind, [init_modulator(spec, kind) for _ in domains], list(domains))

    def modulator(self, index: int) -> Modulator:
        if not 0 <= index < self.size:
            raise IndexError(f"model index {index} outside 0..{self.size - 1}")
        return Modulator(IDENTITY) if index == 0 else self.modulators[index - 1]

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {f"theta/{k}": v for k, v in self.theta.items()}
        for i, m in enumerate(self.modulators, start=1):
            out.update({f"alpha{i}/{k}": v for k, v in m.params.items()})
        return out

    def modulator_names(self, index: int) -> list[str]:
        return [f"alpha{index}/{k}" for k in self.modulator(index).params]

    def theta_names(self) -> list[str]:
        return [f"theta/{k}" for k in self.theta]


def forward(x: Tensor, spec: BackboneSpec, theta: Mapping[str, Tensor],
            kind: str = IDENTITY, mod: Mapping[str, Tensor] | None = None) -> Tensor:
    """Embedding network over Tensor parameters.

    Per layer: affine -> (layer norm with affine) -> modulation -> relu,
    with no relu after the last layer.
    """
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"expected input (batch, {spec.input_dim}), got {x.shape}")
    h = x
    last = len(spec.layer_widths) - 1
    for l in range(last + 1):
        h = add(matmul(h, theta[f"layer{l}.weight"]), theta[f"layer{l}.bias"])
        if spec.normalize:
            h = add(mul(layer_norm(h), theta[f"layer{l}.norm_scale"]), theta[f"layer{l}.norm_shift"])
        if kind == ADAPTER:
            h = add(h, matmul(h, mod[f"layer{l}.adapter"]))
        elif kind == CHANNEL:
            h = add(mul(h, mod[f"layer{l}.scale"]), mod[f"layer{l}.shift"])
        if l < last:
            h = relu(h)
    return h


def _pick(arrays: Mapping[str, np.ndarray], prefix: str, leaves: Mapping[str, Tensor] | None):
    out = {}
    for k, v in arrays.items():
        key = f"{prefix}/{k}"
        out[k] = leaves[key] if leaves is not None and key in leaves else Tensor(v)
    return out


def embed(x, pool: ModelPool, model_index: int, leaves: Mapping[str, Tensor] | None = None) -> Tensor:
    """Embeddings of the rows of ``x`` under model ``model_index``.

    ``leaves`` maps qualified parameter names (``theta/...``, ``alpha<i>/...``)
    to Tensors to differentiate through; everything else is treated as constant.
    """
    mod = pool.modulator(model_index)
    x = x if isinstance(x, Tensor) else Tensor(x)
    theta = _pick(pool.theta, "theta", leaves)
    mparams = _pick(mod.params, f"alpha{model_index}", leaves) if model_index else None
    return forward(x, pool.spec, theta, mod.kind, mparams)


def embed_array(x: np.ndarray, pool: ModelPool, model_index: int) -> np.ndarray:
    return embed(x, pool, model_index).data


def leaves_for(arrays: Mapping[str, np.ndarray], names: Sequence[str]) -> dict[str, Tensor]:
    return {n: Tensor(arrays[n], requires_grad=True) for n in names}


# ---------------------------------------------------------------------------
# selection network and linear heads


def init_selector(d: int, h: int, n_models: int, rng: np.random.Generator) -> Params:
    """Two-layer perceptron d -> h -> n_models (n_models = M + 1)."""
    return {
        "fc1.weight": _glorot(rng, d, h),
        "fc1.bias": np.zeros(h, np.float32),
        "fc2.weight": _glorot(rng, h, n_models),
        "fc2.bias": np.zeros(n_models, np.float32),
    }


def selector_arity(phi: Mapping[str, np.ndarray]) -> int:
    return int(phi["fc2.bias"].shape[0])


def select_logits(z_task, phi: Mapping) -> Tensor:
    """Model-index logits for one task representation."""
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in phi.items()}
    z = z_task if isinstance(z_task, Tensor) else Tensor(z_task)
    if z.ndim != 1 or z.shape[0] != p["fc1.weight"].shape[0]:
        raise DimensionError(
            f"task representation has shape {z.shape}, selector expects ({p['fc1.weight'].shape[0]},)")
    hidden = relu(add(matmul(z, p["fc1.weight"]), p["fc1.bias"]))
    return add(matmul(hidden, p["fc2.weight"]), p["fc2.bias"])


def init_head(d: int, way: int) -> Params:
    """Zero-initialized linear classifier over embeddings."""
    return {"weight": np.zeros((d, way), np.float32), "bias": np.zeros(way, np.float32)}
