"""Inner maximization: normalized projected gradient ascent in an L2 ball.

Each example owns one perturbation over its input-role rows, constrained to
a ball of radius epsilon in the flattened n x d space.  The ascent step
normalizes the gradient so every update has the same magnitude, then
projects back onto the ball.  Pad slots are pinned to zero: padding carries
no data, and letting it absorb norm budget would be meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InputError, NumericalError

BALL_SLACK = 1e-9


class BallMonitor:
    """Counts projections and radius violations (should stay at zero)."""

    def __init__(self):
        self.projections = 0
        self.violations = 0

    def check(self, delta: np.ndarray, epsilon: float) -> None:
        norms = np.linalg.norm(delta.reshape(delta.shape[0], -1), axis=1)
        self.projections += delta.shape[0]
        self.violations += int(np.count_nonzero(norms > epsilon + BALL_SLACK))

    def reset(self) -> None:
        self.projections = 0
        self.violations = 0


ball_monitor = BallMonitor()


def project(phi: np.ndarray, epsilon: float) -> np.ndarray:
    """Nearest point of the epsilon-ball per example: eps*phi/max(eps, |phi|).

    Identity inside the ball, radial rescale outside; idempotent.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if epsilon < 0:
        raise InputError("epsilon must be >= 0")
    flat = phi.reshape(phi.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    denom = np.maximum(epsilon, norms)
    scale = np.divide(epsilon, denom, out=np.zeros_like(denom), where=denom > 0)
    return phi * scale.reshape((-1,) + (1,) * (phi.ndim - 1))


@dataclass
class PerturbationBatch:
    """Per-example perturbations plus their ascent hyperparameters."""

    delta: np.ndarray            # B x n_max x d, zero at invalid slots
    epsilon: float
    step_size: float
    steps: int
    valid: np.ndarray = field(default=None)  # B x n_max slot validity

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.ndim != 3:
            raise InputError("delta must be B x n x d")
        if self.valid is None:
            self.valid = np.ones(self.delta.shape[:2], dtype=bool)

    @property
    def batch_size(self) -> int:
        return self.delta.shape[0]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.delta.reshape(self.batch_size, -1), axis=1)


def _zero_invalid(delta: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return delta * valid[:, :, None]


def init_delta(shape: tuple[int, int, int], epsilon: float,
               rng: np.random.Generator, step_size: float = 0.1, steps: int = 3,
               valid: np.ndarray | None = None) -> PerturbationBatch:
    """Uniform(-1,1) entries, invalid slots zeroed, then projected."""
    if epsilon < 0:
        raise InputError("epsilon must be >= 0")
    delta = rng.uniform(-1.0, 1.0, size=shape)
    if valid is None:
        valid = np.ones(shape[:2], dtype=bool)
    delta = _zero_invalid(delta, valid)
    delta = project(delta, epsilon)
    ball_monitor.check(delta, epsilon)
    return PerturbationBatch(delta=delta, epsilon=epsilon, step_size=step_size,
                             steps=steps, valid=valid)


def ascend(batch: PerturbationBatch,
           grad_fn: Callable[[np.ndarray], np.ndarray]) -> PerturbationBatch:
    """Run `steps` iterations of delta <- project(delta + eta * g / |g|).

    grad_fn evaluates the ascent objective's gradient at the current delta;
    examples whose gradient vanishes keep their delta unchanged for that
    iteration rather than dividing by zero.
    """
    delta = batch.delta.copy()
    B = batch.batch_size
    for _ in range(batch.steps):
        g = np.asarray(grad_fn(delta), dtype=np.float64)
        if g.shape != delta.shape:
            raise InputError(f"gradient shape {g.shape} != delta shape {delta.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite ascent gradient",
                                 bad=int(np.count_nonzero(~np.isfinite(g))))
        g = _zero_invalid(g, batch.valid)
        gnorm = np.linalg.norm(g.reshape(B, -1), axis=1)
        move = np.divide(batch.step_size, gnorm,
                         out=np.zeros_like(gnorm), where=gnorm > 0)
        delta = delta + g * move.reshape(B, 1, 1)
        delta = _zero_invalid(delta, batch.valid)
        delta = project(delta, batch.epsilon)
        ball_monitor.check(delta, batch.epsilon)
    return PerturbationBatch(delta=delta, epsilon=batch.epsilon,
                             step_size=batch.step_size, steps=batch.steps,
                             valid=batch.valid)
