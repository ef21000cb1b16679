"""The Super Encoding Network and its two ablation baselines.

Round structure (default ``passes_mode="L_plus_1"``): one plain encoder pass,
then for each RA layer an integrate/distribute/prompt step followed by a
re-encode of the same inputs with the new prompt tokens. The same frozen
encoder weights are used on every pass.
"""
from __future__ import annotations

import hashlib
import math
from typing import Optional

import numpy as np

from . import tensor as T
from .encoders import (NeuronStack, SuperNeuron, block_param_count, can_stack, encode,
                       encode_stacked, transformer_block)
from .ra import RABlockParams, make_ra_block, ra_forward
from .tensor import ShapeError, Tensor

ARMS = ("ra", "baseline", "transformer", "pure")
PASSES_MODES = ("L_plus_1", "L")


def n_rounds(layers: int, passes_mode: str = "L_plus_1") -> int:
    """Number of RA rounds (re-encode passes after the first)."""
    if passes_mode not in PASSES_MODES:
        raise ValueError(f"unknown passes_mode {passes_mode!r}")
    return layers if passes_mode == "L_plus_1" else max(layers - 1, 0)


class SEN:
    """Frozen super neurons plus the trainable association state of one arm."""

    def __init__(self, neurons: list, ra_layers: list, k: int, arm: str = "ra",
                 baseline_proj: Optional[Tensor] = None, transformer_layers: Optional[list] = None,
                 baseline_rounds: int = 0, config=None):
        if arm not in ARMS:
            raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")
        if not neurons:
            raise ValueError("SEN needs at least one modality")
        dims = {n.config.shared_dim for n in neurons}
        if len(dims) != 1:
            raise ShapeError(f"encoders disagree on shared_dim: {sorted(dims)}")
        self.neurons = list(neurons)
        self.ra_layers = list(ra_layers)
        self.k = k
        self.arm = arm
        self.baseline_proj = baseline_proj
        self.transformer_layers = transformer_layers or []
        self.baseline_rounds = baseline_rounds
        self.config = config
        self.stack = NeuronStack(self.neurons) if can_stack(self.neurons) else None
        self.encoder_calls = 0

    @property
    def n_modalities(self) -> int:
        return len(self.neurons)

    @property
    def d(self) -> int:
        return self.neurons[0].config.shared_dim

    @property
    def rounds(self) -> int:
        if self.arm == "pure":
            return 0
        if self.arm == "ra":
            return len(self.ra_layers)
        if self.arm == "transformer":
            return len(self.transformer_layers)
        return self.baseline_rounds

    def named_trainable(self) -> list:
        if self.arm == "ra":
            return [nt for layer in self.ra_layers for nt in layer.named_parameters()]
        if self.arm == "transformer":
            out = []
            for i, layer in enumerate(self.transformer_layers):
                out.extend((f"tf.{i}.{n}", t) for n, t in layer.items())
            return out
        return []

    def frozen_tensors(self) -> list:
        out = [t for n in self.neurons for t in n.parameters()]
        if self.baseline_proj is not None:
            out.append(self.baseline_proj)
        return out

    def encoder_digest(self) -> str:
        """SHA-256 over every encoder parameter's bytes in a fixed order."""
        h = hashlib.sha256()
        for n in self.neurons:
            h.update(n.param_bytes())
        return h.hexdigest()

    def forward(self, inputs: list, first: Optional[list] = None):
        """Dispatch to the forward pass of this SEN's arm."""
        if self.arm == "baseline":
            return baseline_forward(self, inputs, first=first)
        if self.arm == "transformer":
            return transformer_baseline_forward(self, inputs, first)
        return sen_forward(self, inputs, first)


def _check_inputs(sen: SEN, inputs: list) -> None:
    if len(inputs) != sen.n_modalities:
        raise ShapeError(f"expected {sen.n_modalities} modality inputs, got {len(inputs)}")


def _encode_all(sen: SEN, inputs: list, prompts: Optional[list]) -> list:
    """Pooled features of every modality for one encoder pass."""
    sen.encoder_calls += sen.n_modalities
    stack = sen.stack
    if stack is not None and inputs[0].ndim == 3 and all(x.shape == inputs[0].shape for x in inputs):
        tokens = T.stack(inputs, axis=0)
        pr = None if prompts is None else T.stack(prompts, axis=0)
        pooled = encode_stacked(stack, tokens, pr)[1]
        return [T.getitem(pooled, j) for j in range(sen.n_modalities)]
    if prompts is None:
        return [encode(n, x)[1] for n, x in zip(sen.neurons, inputs)]
    return [encode(n, x, p)[1] for n, x, p in zip(sen.neurons, inputs, prompts)]


def _recurse(sen: SEN, inputs: list, rounds: int, make_prompts, first_pass: Optional[list] = None):
    feats = list(first_pass) if first_pass is not None else _encode_all(sen, inputs, None)
    if sen.k > 0:
        for i in range(rounds):
            feats = _encode_all(sen, inputs, make_prompts(i, feats))
    context = T.reduce_mean(T.stack(feats, axis=0), axis=0)
    return feats, context


def first_pass(sen: SEN, inputs: list) -> list:
    """Prompt-free pooled features; constant for fixed inputs since the encoders are frozen."""
    _check_inputs(sen, inputs)
    return _encode_all(sen, inputs, None)


def sen_forward(sen: SEN, inputs: list, first: Optional[list] = None):
    """Returns ``(finals, context)``; ``context`` is the modality mean of ``finals``.

    ``first`` optionally supplies precomputed :func:`first_pass` features.
    """
    _check_inputs(sen, inputs)
    rounds = 0 if sen.arm == "pure" else len(sen.ra_layers)
    return _recurse(sen, inputs, rounds, lambda i, f: ra_forward(f, sen.ra_layers[i]), first)


def make_baseline_projection(n_modalities: int, d: int, k: int, seed: int) -> Tensor:
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / math.sqrt(n_modalities * d), (n_modalities * d, k * d))
    return Tensor(w, requires_grad=False, name="baseline.proj")


def baseline_forward(sen: SEN, inputs: list, rounds: Optional[int] = None,
                     first: Optional[list] = None):
    """No RA: concatenated latents go through a fixed frozen projection into prompt tokens."""
    _check_inputs(sen, inputs)
    if sen.baseline_proj is None:
        raise ValueError("baseline_forward needs sen.baseline_proj")
    rounds = sen.baseline_rounds if rounds is None else rounds
    proj = sen.baseline_proj

    def prompts(i, feats):
        z = T.linear(T.concat(feats, axis=-1), proj)
        p = T.reshape(z, (*z.shape[:-1], sen.k, sen.d))
        return [p] * sen.n_modalities

    return _recurse(sen, inputs, rounds, prompts, first)


def make_transformer_layer(d: int, k: int, n_modalities: int, rng: np.random.Generator) -> dict:
    """One shared transformer block over the M latents plus per-modality down-projections.

    The key bias is omitted: it shifts every attention score of a query by the
    same amount, so softmax cancels it and its gradient is identically zero.
    """
    p = {
        "ln1.g": np.ones(d), "ln1.b": np.zeros(d),
        "q.w": rng.normal(0.0, 0.02, (d, d)), "q.b": np.zeros(d),
        "k.w": rng.normal(0.0, 0.02, (d, d)),
        "v.w": rng.normal(0.0, 0.02, (d, d)), "v.b": np.zeros(d),
        "o.w": rng.normal(0.0, 0.02, (d, d)), "o.b": np.zeros(d),
        "ln2.g": np.ones(d), "ln2.b": np.zeros(d),
        "fc1.w": rng.normal(0.0, 0.02, (d, 4 * d)), "fc1.b": np.zeros(4 * d),
        "fc2.w": rng.normal(0.0, 0.02, (4 * d, d)), "fc2.b": np.zeros(d),
    }
    for m in range(n_modalities):
        p[f"proj.{m}.w"] = np.zeros((n_modalities * d, k * d))
        p[f"proj.{m}.b"] = np.zeros(k * d)
    return {n: Tensor(a, requires_grad=True) for n, a in p.items()}


def transformer_layer_param_count(d: int, k: int, n_modalities: int) -> int:
    return block_param_count(d) - d + n_modalities * (n_modalities * d * k * d + k * d)


def transformer_baseline_forward(sen: SEN, inputs: list, first: Optional[list] = None):
    _check_inputs(sen, inputs)
    m, d, k = sen.n_modalities, sen.d, sen.k

    def prompts(i, feats):
        layer = sen.transformer_layers[i]
        seq = transformer_block(T.stack(feats, axis=-2), layer, "", heads=1)   # [..., M, d]
        flat = T.reshape(seq, (*seq.shape[:-2], m * d))
        out = []
        for j in range(m):
            z = T.linear(flat, layer[f"proj.{j}.w"], layer[f"proj.{j}.b"])
            out.append(T.reshape(z, (*z.shape[:-1], k, d)))
        return out

    return _recurse(sen, inputs, len(sen.transformer_layers), prompts, first)


def trainable_parameters(sen: SEN) -> list:
    return [t for _, t in sen.named_trainable()]


def count_parameters(sen: SEN) -> tuple:
    """``(frozen, trainable)`` scalar counts."""
    frozen = sum(t.size for t in sen.frozen_tensors())
    trainable = sum(t.size for t in trainable_parameters(sen))
    return frozen, trainable


def build_sen(neurons: list, layers: int, k: int = 4, fusion: str = "avg", mode: str = "sparse",
              learnable_prompt: bool = True, arm: str = "ra", passes_mode: str = "L_plus_1",
              seed: int = 0, config=None) -> SEN:
    """Assemble a SEN for one experiment arm; trainable state is seeded by ``seed``."""
    m = len(neurons)
    d = neurons[0].config.shared_dim
    rounds = n_rounds(layers, passes_mode)
    rng = np.random.default_rng([seed, 1])
    ra_layers, tf_layers, proj = [], [], None
    if arm == "ra":
        ra_layers = [make_ra_block(i, d, k, m, fusion, mode, learnable_prompt, rng)
                     for i in range(rounds)]
    elif arm == "transformer":
        tf_layers = [make_transformer_layer(d, k, m, rng) for _ in range(rounds)]
    elif arm == "baseline":
        proj = make_baseline_projection(m, d, k, seed)
    return SEN(neurons, ra_layers, k, arm=arm, baseline_proj=proj, transformer_layers=tf_layers,
               baseline_rounds=rounds if arm == "baseline" else 0, config=config)
