"""Scalar losses as pure functions of prediction and discriminator outputs.

Value functions return floats; the *_grad_logits helpers give the exact
gradients trainers seed backward passes with.  All logs clamp their
argument at CLAMP so confident discriminators cannot produce infinities;
clamp activations on discriminator probabilities are counted on
`clamp_events` for diagnostics.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError

CLAMP = 1e-12


class ClampCounter:
    """Counts probability clampings at the 0/1 boundaries."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


clamp_events = ClampCounter()


def _log_clamped(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, CLAMP))


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    sums = p.sum(axis=-1)
    if np.any(p < -1e-9) or np.any(np.abs(sums - 1.0) > 1e-6):
        raise InputError(f"{name} is not a normalized distribution")
    return p


def _check_probability(z, name: str) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if np.any(z < 0.0) or np.any(z > 1.0):
        raise InputError(f"{name} outside [0, 1]")
    clamped = np.count_nonzero((z < CLAMP) | (z > 1.0 - CLAMP))
    if clamped:
        clamp_events.add(clamped)
    return z


def xent(pred: np.ndarray, y: int) -> float:
    """Cross entropy -log pred[y] for one example."""
    pred = np.asarray(pred, dtype=np.float64)
    if not 0 <= y < pred.shape[-1]:
        raise InputError(f"label {y} outside [0, {pred.shape[-1]})")
    return float(-_log_clamped(pred[..., y]))


def xent_mean(probs: np.ndarray, labels: np.ndarray) -> float:
    """Batch mean cross entropy."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[0] == 0:
        raise InputError("empty batch")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise InputError("label id outside class range")
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(np.mean(-_log_clamped(picked)))


def kl_consistency(p_clean: np.ndarray, p_pert: np.ndarray) -> float:
    """KL(clean || perturbed); the clean side is the consistency target and
    is treated as constant by the gradient helpers."""
    p_clean = _check_distribution(p_clean, "p_clean")
    p_pert = _check_distribution(p_pert, "p_pert")
    terms = p_clean * (_log_clamped(p_clean) - _log_clamped(p_pert))
    return float(np.sum(terms, axis=-1).mean())


def adv_loss(z_s_pert) -> float:
    """-log P(source | perturbed source); large when the discriminator reads
    the perturbed example as target-like."""
    z = _check_probability(z_s_pert, "z_s_pert")
    return float(np.mean(-_log_clamped(z)))


def disc_loss(z_s_clean, z_s_pert, z_t) -> float:
    """Discriminator training loss: call clean and perturbed source 'source'
    and target 'target', averaged over the batch."""
    zc = _check_probability(z_s_clean, "z_s_clean")
    zp = _check_probability(z_s_pert, "z_s_pert")
    zt = _check_probability(z_t, "z_t")
    return float(np.mean(-_log_clamped(zp)) + np.mean(-_log_clamped(zc))
                 + np.mean(-_log_clamped(1.0 - zt)))


def regularized_loss(p_clean: np.ndarray, p_pert: np.ndarray,
                     labels: np.ndarray) -> float:
    """Prompt objective: mean cross entropy plus mean clean->perturbed KL."""
    if np.asarray(p_clean).shape[0] == 0:
        raise InputError("empty batch")
    return xent_mean(p_clean, labels) + kl_consistency(p_clean, p_pert)


def domain_confusion_loss(z_s, z_t) -> float:
    """Two-term source/target discrimination loss used by the reversal
    baseline (no perturbed term)."""
    zs = _check_probability(z_s, "z_s")
    zt = _check_probability(z_t, "z_t")
    return float(np.mean(-_log_clamped(zs)) + np.mean(-_log_clamped(1.0 - zt)))


def dann_objective(pred_source: np.ndarray, y_s: np.ndarray, z_s, z_t) -> float:
    """Task loss minus the domain discrimination loss (reversal objective)."""
    return xent_mean(pred_source, y_s) - domain_confusion_loss(z_s, z_t)


def onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def xent_grad_logits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean xent)/d logits = (probs - onehot) / B.  Exact while no
    probability is clamped."""
    B = probs.shape[0]
    return (probs - onehot(labels, probs.shape[1])) / B


def kl_grad_pert_logits(p_clean: np.ndarray, p_pert: np.ndarray) -> np.ndarray:
    """d(mean KL(clean || pert))/d pert logits = (pert - clean) / B, with the
    clean side held constant."""
    return (p_pert - p_clean) / p_clean.shape[0]
