"""Downstream adaptation heads: similarity-sum zero-shot prediction, context
injection by resize-and-add, and feature averaging."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor


@dataclass
class ClassEmbeddings:
    """One unit-norm text embedding per class (rows of ``matrix``)."""

    matrix: Tensor
    labels: list

    def __post_init__(self):
        m = self.matrix.data
        if m.ndim != 2:
            raise ShapeError(f"class matrix must be 2-D, got {m.shape}")
        if len(self.labels) != m.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {m.shape[0]} class rows")
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("class embeddings must be L2-normalised rows")

    @classmethod
    def from_raw(cls, matrix, labels=None) -> "ClassEmbeddings":
        m = np.asarray(matrix, dtype=np.float64)
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise NumericError("zero-norm class embedding")
        labels = list(labels) if labels is not None else [f"class_{i}" for i in range(len(m))]
        return cls(Tensor(m / norms), labels)

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError(f"cosine similarity undefined for zero-norm {what} feature")
    return x / norms


def similarity_matrix(video, audio, classes: ClassEmbeddings,
                      audio_classes: Optional[ClassEmbeddings] = None) -> np.ndarray:
    """``[B, C]`` sum of the two cosine-similarity matrices.

    By default both streams are scored against the class text embeddings.
    Passing ``audio_classes`` switches the second term to video-vs-audio-class
    similarity instead.
    """
    v = np.atleast_2d(video.data if isinstance(video, Tensor) else np.asarray(video, float))
    a = np.atleast_2d(audio.data if isinstance(audio, Tensor) else np.asarray(audio, float))
    c = classes.matrix.data
    if v.shape[-1] != c.shape[1] or a.shape[-1] != c.shape[1]:
        raise ShapeError(f"feature widths {v.shape[-1]}/{a.shape[-1]} vs class width {c.shape[1]}")
    v = _unit_rows(v, "video")
    a = _unit_rows(a, "audio")
    if audio_classes is None:
        return v @ c.T + a @ c.T
    return v @ c.T + v @ audio_classes.matrix.data.T


def contrastive_predict(video, audio, classes: ClassEmbeddings,
                        audio_classes: Optional[ClassEmbeddings] = None):
    """Zero-shot class for one sample (``[d]`` inputs) or a batch (``[B, d]``).

    Ties go to the lowest class index (``np.argmax`` semantics).
    """
    scores = similarity_matrix(video, audio, classes, audio_classes)
    idx = np.argmax(scores, axis=-1)
    vd = video.data if isinstance(video, Tensor) else np.asarray(video)
    if vd.ndim == 1:
        return int(idx[0]), Tensor(scores[0])
    return idx, Tensor(scores)


@dataclass(frozen=True)
class InjectionTarget:
    target_shape: tuple

    def __post_init__(self):
        shape = tuple(int(s) for s in self.target_shape)
        if not shape or any(s < 1 for s in shape):
            raise ShapeError(f"injection target shape must be non-empty and positive, got {shape}")
        object.__setattr__(self, "target_shape", shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.target_shape))


def resize_matrix(d: int, size: int) -> np.ndarray:
    """``(d, size)`` linear-interpolation matrix with aligned endpoints."""
    if d < 1 or size < 1:
        raise ShapeError(f"cannot resize {d} -> {size}")
    if size == d:
        return np.eye(d)
    pos = np.linspace(0.0, d - 1, size) if size > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), d - 1)
    hi = np.minimum(lo + 1, d - 1)
    frac = pos - lo
    r = np.zeros((d, size))
    cols = np.arange(size)
    np.add.at(r, (lo, cols), 1.0 - frac)
    np.add.at(r, (hi, cols), frac)
    return r


def context_inject(context: Tensor, target: InjectionTarget) -> Tensor:
    """Resample ``context[..., d]`` to ``target.size`` entries and reshape to the target.

    Differentiable; the caller adds the result to the task model's input.
    """
    if not isinstance(target, InjectionTarget):
        target = InjectionTarget(tuple(target))
    d = context.shape[-1]
    out = T.const_matmul(context, resize_matrix(d, target.size))
    return T.reshape(out, context.shape[:-1] + target.target_shape)


def average_features(finals: list) -> Tensor:
    if not finals:
        raise ShapeError("average_features: empty feature list")
    return T.reduce_mean(T.stack(finals, axis=0), axis=0)
