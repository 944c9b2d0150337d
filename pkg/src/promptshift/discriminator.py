"""Linear source/target probe over pooled encoder representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .losses import CLAMP, onehot
from .encoder import softmax
from .serialize import digest_arrays

SOURCE_COL = 0
TARGET_COL = 1


@dataclass
class DiscriminatorParams:
    """Two-logit linear layer: column 0 scores 'source', column 1 'target'."""

    w: np.ndarray  # d x 2
    b: np.ndarray  # 2

    @classmethod
    def create(cls, dim: int, seed: int) -> "DiscriminatorParams":
        rng = np.random.default_rng([seed, 0xD15C])
        return cls(w=rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, 2)),
                   b=np.zeros(2))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def digest(self) -> str:
        return digest_arrays(self.as_dict())

    def copy(self) -> "DiscriminatorParams":
        return DiscriminatorParams(w=self.w.copy(), b=self.b.copy())


def domain_logits(pooled: np.ndarray, params: DiscriminatorParams) -> np.ndarray:
    pooled = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
    if pooled.shape[1] != params.w.shape[0]:
        raise InputError(f"pooled dim {pooled.shape[1]} != discriminator dim "
                         f"{params.w.shape[0]}")
    return pooled @ params.w + params.b


def softmax_domain(pooled: np.ndarray, params: DiscriminatorParams) -> np.ndarray:
    """Full B x 2 softmax over the domain logits (for gradient seeding)."""
    return softmax(domain_logits(pooled, params), axis=-1)


def discriminate(pooled: np.ndarray, params: DiscriminatorParams) -> np.ndarray:
    """Per-example probability that the representation came from the source
    domain, clamped into (0, 1)."""
    probs = softmax_domain(pooled, params)
    return np.clip(probs[:, SOURCE_COL], CLAMP, 1.0 - CLAMP)


def logit_grads(probs: np.ndarray, true_col: int) -> np.ndarray:
    """d(mean -log P(true_col))/d logits = (probs - onehot) / B."""
    B = probs.shape[0]
    labels = np.full(B, true_col, dtype=np.int64)
    return (probs - onehot(labels, 2)) / B


def param_grads(pooled: np.ndarray, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    return {"w": pooled.T @ dlogits, "b": dlogits.sum(axis=0)}


def pooled_grads(dlogits: np.ndarray, params: DiscriminatorParams) -> np.ndarray:
    return dlogits @ params.w.T


def update(params: DiscriminatorParams, grads: dict[str, np.ndarray],
           lr: float) -> DiscriminatorParams:
    """One plain SGD step on the discriminator only."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite discriminator gradient")
    return DiscriminatorParams(w=params.w - lr * grads["w"],
                               b=params.b - lr * grads["b"])
