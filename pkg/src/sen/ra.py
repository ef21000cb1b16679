"""Recursive Association block: integrate, distribute, prompt.

Shapes carry arbitrary leading (batch) axes: features are ``[..., d]`` and
prompts ``[..., k, d]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

FUSION_KINDS = ("avg", "add", "concat", "attention", "moe")
DISTRIBUTION_MODES = ("sparse", "dense")


@dataclass
class FusionStrategy:
    kind: str
    params: dict = field(default_factory=dict)

    def fused_dim(self, d: int, n_modalities: int) -> int:
        return n_modalities * d if self.kind == "concat" else d

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def make_fusion(kind: str, d: int, rng: Optional[np.random.Generator] = None) -> FusionStrategy:
    """Create a fusion strategy.

    attention: learnable query (zeros), key projection without bias (a key
    bias shifts every score equally, so it has no effect), value projection
    initialised to the identity so the block starts as plain averaging.
    moe: a bias-free gate d -> 1 shared by all modalities, zero initialised.
    """
    if kind not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == "attention":
        params = {
            "query": Tensor(np.zeros(d), requires_grad=True),
            "key.w": Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)), requires_grad=True),
            "value.w": Tensor(np.eye(d), requires_grad=True),
            "value.b": Tensor(np.zeros(d), requires_grad=True),
        }
    elif kind == "moe":
        params = {"gate.w": Tensor(np.zeros((d, 1)), requires_grad=True)}
    else:
        params = {}
    return FusionStrategy(kind, params)


def _check_features(features, op: str) -> int:
    if not features:
        raise ShapeError(f"{op}: need at least one modality feature")
    ref = features[0].shape
    for f in features[1:]:
        if f.shape != ref:
            raise ShapeError(f"{op}: feature widths differ ({f.shape} vs {ref})")
    return ref[-1]


def integrate(features: list, strategy: FusionStrategy) -> Tensor:
    """Fuse per-modality features ``[..., d]`` into one multi-modal feature."""
    d = _check_features(features, "integrate")
    kind = strategy.kind
    m = len(features)
    if kind == "avg":
        return T.reduce_mean(T.stack(features, axis=-2), axis=-2)
    if kind == "add":
        return T.reduce_sum(T.stack(features, axis=-2), axis=-2)
    if kind == "concat":
        return T.concat(features, axis=-1)
    stacked = T.stack(features, axis=-2)                       # [..., M, d]
    p = strategy.params
    if kind == "attention":
        keys = T.linear(stacked, p["key.w"])                   # [..., M, d]
        values = T.linear(stacked, p["value.w"], p["value.b"])
        q = T.reshape(p["query"], (d, 1))
        scores = T.scale(T.matmul(keys, q), 1.0 / math.sqrt(d))  # [..., M, 1]
        weights = T.softmax(T.reshape(scores, scores.shape[:-1]), axis=-1)
        mixed = T.matmul(T.reshape(weights, (*weights.shape[:-1], 1, m)), values)
        return T.reshape(mixed, mixed.shape[:-2] + (d,))
    if kind == "moe":
        scores = T.linear(stacked, p["gate.w"])                # [..., M, 1]
        weights = T.softmax(T.reshape(scores, scores.shape[:-1]), axis=-1)
        mixed = T.matmul(T.reshape(weights, (*weights.shape[:-1], 1, m)), stacked)
        return T.reshape(mixed, mixed.shape[:-2] + (d,))
    raise ValueError(f"unknown fusion kind {kind!r}")


def distributor_param_count(in_dim: int, d: int, k: int) -> int:
    return in_dim * d + d + d * k * d + k * d


def ra_param_count(mode: str, fusion: str, d: int, k: int, n_modalities: int,
                   learnable_prompt: bool = True) -> int:
    """Closed-form trainable count of one RA layer."""
    in_dim = n_modalities * d if fusion == "concat" else d
    n_dist = n_modalities if mode == "sparse" else 1
    fusion_params = {"attention": d + d * d + d * d + d, "moe": d}.get(fusion, 0)
    if k == 0:
        return fusion_params
    prompts = n_modalities * k * d if learnable_prompt else 0
    return n_dist * distributor_param_count(in_dim, d, k) + fusion_params + prompts


@dataclass
class RABlockParams:
    layer_index: int
    mode: str
    d: int
    k: int
    n_modalities: int
    fusion: FusionStrategy
    distributors: list
    prompts: Optional[list]

    @property
    def learnable_prompt(self) -> bool:
        return self.prompts is not None

    def named_parameters(self) -> list:
        pre = f"ra.{self.layer_index}."
        out = [(pre + "fusion." + n, t) for n, t in self.fusion.params.items()]
        for j, dist in enumerate(self.distributors):
            out.extend((f"{pre}dist.{j}.{n}", t) for n, t in dist.items())
        if self.prompts is not None:
            out.extend((f"{pre}prompt.{j}", q) for j, q in enumerate(self.prompts))
        return out

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


def make_ra_block(layer_index: int, d: int, k: int, n_modalities: int, fusion: str = "avg",
                  mode: str = "sparse", learnable_prompt: bool = True,
                  rng: Optional[np.random.Generator] = None) -> RABlockParams:
    """Distributor output layers and prompts start at zero, so a fresh block emits zero prompts."""
    if mode not in DISTRIBUTION_MODES:
        raise ValueError(f"unknown distribution mode {mode!r}; expected one of {DISTRIBUTION_MODES}")
    if n_modalities < 1:
        raise ValueError("need at least one modality")
    rng = rng if rng is not None else np.random.default_rng(layer_index)
    strategy = make_fusion(fusion, d, rng)
    in_dim = strategy.fused_dim(d, n_modalities)
    n_dist = n_modalities if mode == "sparse" else 1
    distributors = []
    if k > 0:
        for _ in range(n_dist):
            distributors.append({
                "w1": Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, d)), requires_grad=True),
                "b1": Tensor(np.zeros(d), requires_grad=True),
                "w2": Tensor(np.zeros((d, k * d)), requires_grad=True),
                "b2": Tensor(np.zeros(k * d), requires_grad=True),
            })
    prompts = None
    if learnable_prompt and k > 0:
        prompts = [Tensor(np.zeros((k, d)), requires_grad=True) for _ in range(n_modalities)]
    return RABlockParams(layer_index, mode, d, k, n_modalities, strategy, distributors, prompts)


def _mlp(x: Tensor, p: dict) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def distribute(fused: Tensor, params: RABlockParams) -> list:
    """Map the fused feature to one ``[..., k, d]`` neurotransmitter per modality."""
    in_dim = params.fusion.fused_dim(params.d, params.n_modalities)
    if fused.shape[-1] != in_dim:
        raise ShapeError(
            f"distribute: fused width {fused.shape[-1]} != {in_dim} expected for {params.fusion.kind} fusion")
    lead = fused.shape[:-1]
    shape = (*lead, params.k, params.d)
    if params.mode == "dense":
        g = T.reshape(_mlp(fused, params.distributors[0]), shape)
        return [g] * params.n_modalities
    return [T.reshape(_mlp(fused, dist), shape) for dist in params.distributors]


def prompt_compose(neurotransmitters: list, params: RABlockParams) -> list:
    if params.prompts is None:
        return list(neurotransmitters)
    if len(neurotransmitters) != len(params.prompts):
        raise ShapeError(
            f"prompt_compose: {len(neurotransmitters)} inputs for {len(params.prompts)} prompts")
    return [T.add_bias(g, q) for g, q in zip(neurotransmitters, params.prompts)]


def ra_forward(features: list, params: RABlockParams) -> list:
    """integrate -> distribute -> prompt_compose; returns M prompt tensors."""
    if len(features) != params.n_modalities:
        raise ShapeError(f"ra_forward: {len(features)} features for {params.n_modalities} modalities")
    fused = integrate(features, params.fusion)
    return prompt_compose(distribute(fused, params), params)
