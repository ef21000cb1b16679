"""Frozen toy transformer encoders, one per modality ("super neurons").

Weights are a pure function of ``(config, seed)`` so a checkpoint only needs
to store the seed. Every parameter is created with ``requires_grad=False``;
gradients still flow through the blocks to prompt tokens.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    modality_name: str
    input_dim: int
    seq_len: int
    depth: int
    heads: int
    shared_dim: int
    max_prompt_tokens: int = 8
    mlp_ratio: int = 4

    def validate(self) -> list:
        errors = []
        if self.input_dim < 1:
            errors.append(f"{self.modality_name}: input_dim must be >= 1")
        if self.seq_len < 1:
            errors.append(f"{self.modality_name}: seq_len must be >= 1")
        if self.depth < 1:
            errors.append(f"{self.modality_name}: depth must be >= 1")
        if self.heads < 1:
            errors.append(f"{self.modality_name}: heads must be >= 1")
        elif self.shared_dim % self.heads:
            errors.append(
                f"{self.modality_name}: heads ({self.heads}) must divide shared_dim ({self.shared_dim})")
        if self.shared_dim < 1:
            errors.append(f"{self.modality_name}: shared_dim must be >= 1")
        if self.max_prompt_tokens < 0:
            errors.append(f"{self.modality_name}: max_prompt_tokens must be >= 0")
        if self.mlp_ratio < 1:
            errors.append(f"{self.modality_name}: mlp_ratio must be >= 1")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)


def block_param_count(d: int, mlp_ratio: int = 4) -> int:
    """Pre-norm attention + MLP block: 2 layer norms, QKVO, two MLP layers."""
    h = mlp_ratio * d
    return 2 * (2 * d) + 4 * (d * d + d) + (d * h + h) + (h * d + d)


def encoder_param_count(cfg: EncoderConfig) -> int:
    d = cfg.shared_dim
    embed = cfg.input_dim * d + d
    pos = (cfg.seq_len + cfg.max_prompt_tokens) * d
    return embed + pos + cfg.depth * block_param_count(d, cfg.mlp_ratio) + 2 * d


class SuperNeuron:
    """A frozen encoder. Parameters live in ``self.params`` (name -> Tensor)."""

    def __init__(self, config: EncoderConfig, seed: int, params: dict):
        self.config = config
        self.seed = seed
        self.params = params
        self.frozen = True

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self) -> list:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_bytes(self) -> bytes:
        return b"".join(p.data.tobytes() for p in self.params.values())

    def digest(self) -> str:
        return hashlib.sha256(self.param_bytes()).hexdigest()

    def __repr__(self) -> str:
        c = self.config
        return (f"SuperNeuron({c.modality_name!r}, d={c.shared_dim}, depth={c.depth}, "
                f"params={self.num_parameters()})")


def build_super_neuron(cfg: EncoderConfig, seed: int) -> SuperNeuron:
    errors = cfg.validate()
    if errors:
        raise ValueError("invalid encoder config: " + "; ".join(errors))
    rng = np.random.default_rng(seed)
    d, h = cfg.shared_dim, cfg.mlp_ratio * cfg.shared_dim
    resid_std = INIT_STD / math.sqrt(cfg.depth)

    def frozen(arr, name):
        return Tensor(arr, requires_grad=False, name=name)

    params = {
        "embed.w": frozen(rng.normal(0.0, INIT_STD, (cfg.input_dim, d)), "embed.w"),
        "embed.b": frozen(np.zeros(d), "embed.b"),
        "pos": frozen(rng.normal(0.0, INIT_STD, (cfg.seq_len + cfg.max_prompt_tokens, d)), "pos"),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes = [
            ("ln1.g", None), ("ln1.b", None),
            ("q.w", (d, d)), ("q.b", d), ("k.w", (d, d)), ("k.b", d),
            ("v.w", (d, d)), ("v.b", d), ("o.w", (d, d)), ("o.b", d),
            ("ln2.g", None), ("ln2.b", None),
            ("fc1.w", (d, h)), ("fc1.b", h), ("fc2.w", (h, d)), ("fc2.b", d),
        ]
        for name, shape in shapes:
            if name.endswith(".g"):
                arr = np.ones(d)
            elif shape is None or isinstance(shape, int):
                arr = np.zeros(d if shape is None else shape)
            else:
                std = resid_std if name in ("o.w", "fc2.w") else INIT_STD
                arr = rng.normal(0.0, std, shape)
            params[p + name] = frozen(arr, p + name)
    params["final_ln.g"] = frozen(np.ones(d), "final_ln.g")
    params["final_ln.b"] = frozen(np.zeros(d), "final_ln.b")
    return SuperNeuron(cfg, seed, params)


def transformer_block(x: Tensor, p: dict, prefix: str, heads: int) -> Tensor:
    """Pre-norm block on ``x[..., T, d]``; ``p`` maps ``prefix + name`` to tensors."""
    y = T.layer_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    q = T.linear(y, p[prefix + "q.w"], p[prefix + "q.b"])
    k = T.linear(y, p[prefix + "k.w"], p.get(prefix + "k.b"))
    v = T.linear(y, p[prefix + "v.w"], p[prefix + "v.b"])
    a = T.scaled_dot_attention(q, k, v, heads)
    x = T.add(x, T.linear(a, p[prefix + "o.w"], p[prefix + "o.b"]))
    y = T.layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    y = T.linear(T.gelu(T.linear(y, p[prefix + "fc1.w"], p[prefix + "fc1.b"])),
                 p[prefix + "fc2.w"], p[prefix + "fc2.b"])
    return T.add(x, y)


def encode(neuron: SuperNeuron, tokens: Tensor, prompts: Optional[Tensor] = None):
    """Run the encoder on ``tokens[..., n, input_dim]``.

    ``prompts[..., k, d]`` are prepended after the embedding projection and
    use positional rows ``n .. n+k-1``; data tokens always use rows ``0..n-1``.
    Returns ``(token_feats[..., n+k, d], pooled[..., d])`` where ``pooled`` is
    the mean over all output tokens.
    """
    cfg = neuron.config
    p = neuron.params
    d = cfg.shared_dim
    if tokens.ndim < 2 or tokens.shape[-2:] != (cfg.seq_len, cfg.input_dim):
        raise ShapeError(
            f"{cfg.modality_name}: tokens {tokens.shape} do not end in ({cfg.seq_len}, {cfg.input_dim})")
    x = T.linear(tokens, p["embed.w"], p["embed.b"])
    pos = p["pos"]
    x = T.add_bias(x, T.getitem(pos, slice(0, cfg.seq_len)))
    if prompts is not None:
        k = prompts.shape[-2] if prompts.ndim >= 2 else 0
        if prompts.ndim < 2 or prompts.shape[-1] != d:
            raise ShapeError(f"{cfg.modality_name}: prompt shape {prompts.shape} needs width {d}")
        if k > cfg.max_prompt_tokens:
            raise ShapeError(
                f"{cfg.modality_name}: {k} prompt tokens exceed max_prompt_tokens={cfg.max_prompt_tokens}")
        if prompts.shape[:-2] != tokens.shape[:-2]:
            raise ShapeError(
                f"{cfg.modality_name}: prompt batch {prompts.shape[:-2]} vs token batch {tokens.shape[:-2]}")
        pp = T.add_bias(prompts, T.getitem(pos, slice(cfg.seq_len, cfg.seq_len + k)))
        x = T.concat([pp, x], axis=-2)
    for i in range(cfg.depth):
        x = transformer_block(x, p, f"blocks.{i}.", cfg.heads)
    x = T.layer_norm(x, p["final_ln.g"], p["final_ln.b"])
    return x, T.reduce_mean(x, axis=-2)


class NeuronStack:
    """Per-modality encoders with identical shapes, weights stacked on a leading axis.

    Running all modalities in one grouped pass gives the same values as
    calling :func:`encode` per neuron, with a third of the op dispatches.
    """

    def __init__(self, neurons: list):
        ref = _shape_key(neurons[0].config)
        if any(_shape_key(n.config) != ref for n in neurons[1:]):
            raise ShapeError("NeuronStack needs encoders with identical shapes")
        self.config = neurons[0].config
        self.size = len(neurons)
        self.params = {
            name: Tensor(np.stack([n.params[name].data for n in neurons]), requires_grad=False)
            for name in neurons[0].params
        }


def _shape_key(cfg: EncoderConfig) -> tuple:
    return (cfg.input_dim, cfg.seq_len, cfg.depth, cfg.heads, cfg.shared_dim,
            cfg.max_prompt_tokens, cfg.mlp_ratio)


def can_stack(neurons: list) -> bool:
    ref = _shape_key(neurons[0].config)
    return all(_shape_key(n.config) == ref for n in neurons[1:])


def encode_stacked(stack: NeuronStack, tokens: Tensor, prompts: Optional[Tensor] = None):
    """Grouped :func:`encode`: ``tokens[M, B, n, in]``, ``prompts[M, B, k, d]``."""
    cfg = stack.config
    p = stack.params
    m = stack.size
    if tokens.ndim != 4 or tokens.shape[0] != m or tokens.shape[2:] != (cfg.seq_len, cfg.input_dim):
        raise ShapeError(f"stacked tokens {tokens.shape} do not match ({m}, B, {cfg.seq_len}, {cfg.input_dim})")
    x = T.linear(tokens, p["embed.w"], p["embed.b"])
    pos = p["pos"]
    x = T.add_expand(x, T.getitem(pos, (slice(None), slice(0, cfg.seq_len))), axis=1)
    if prompts is not None:
        k = prompts.shape[-2]
        if prompts.shape != (m, tokens.shape[1], k, cfg.shared_dim) or k > cfg.max_prompt_tokens:
            raise ShapeError(f"stacked prompts {prompts.shape} do not fit tokens {tokens.shape}")
        sl = (slice(None), slice(cfg.seq_len, cfg.seq_len + k))
        x = T.concat([T.add_expand(prompts, T.getitem(pos, sl), axis=1), x], axis=-2)
    for i in range(cfg.depth):
        x = transformer_block(x, p, f"blocks.{i}.", cfg.heads)
    x = T.layer_norm(x, p["final_ln.g"], p["final_ln.b"])
    return x, T.reduce_mean(x, axis=-2)
