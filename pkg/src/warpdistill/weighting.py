"""Entropy-driven token weights and the weighted token-level losses.

Student positions are weighted by (normalized student entropy) x (peak
confidence of the teacher distribution projected into the student
vocabulary): the student gets pushed hardest where it is unsure and the
projected teacher target is reliable.  Teacher positions are weighted by
one minus normalized teacher entropy, so the student learns mostly from
tokens the teacher is confident about.

Weights are constants as far as gradients are concerned (no path
differentiates through entropies or the gate) and are rescaled so they
sum to the number of in-mask positions; an all-zero raw vector falls
back to uniform ones.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .numerics import as_grid

PROB_FLOOR = 1e-12


def _check_stochastic(p: np.ndarray, name: str) -> np.ndarray:
    p = as_grid(p)
    if p.min() < -1e-9:
        raise UsageError(f"{name}: negative probability {p.min():g}")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise UsageError(f"{name}: rows must sum to 1")
    return p


def entropy_rows(p: np.ndarray) -> np.ndarray:
    """Shannon entropy per row in nats, with 0*log(0) = 0."""
    p = _check_stochastic(p, "entropy_rows")
    return -np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0).sum(axis=1)


def student_weights(
    p_student: np.ndarray, p_teacher_to_student: np.ndarray, use_gate: bool = True
) -> np.ndarray:
    """Raw (pre-normalization) per-position weights in the student space.

    Entropy is normalized by log(vocab) so it shares the gate's [0, 1]
    scale.  ``use_gate=False`` drops the confidence factor (the gate
    ablation) and weights by normalized entropy alone.
    """
    p_s = _check_stochastic(p_student, "student distribution")
    p_ts = _check_stochastic(p_teacher_to_student, "projected teacher distribution")
    if p_s.shape != p_ts.shape:
        raise UsageError(f"shape mismatch: {p_s.shape} vs {p_ts.shape}")
    ent = entropy_rows(p_s) / np.log(p_s.shape[1])
    if not use_gate:
        return ent
    gate = p_ts.max(axis=1)
    return ent * gate


def teacher_weights(p_teacher: np.ndarray) -> np.ndarray:
    """Raw weights in the teacher space: 1 - H / log(vocab), in [0, 1].

    Clipped to the unit interval: rounding can push the uniform-row case
    a few ulp below zero, which the normalizer would reject.
    """
    p_t = _check_stochastic(p_teacher, "teacher distribution")
    return np.clip(1.0 - entropy_rows(p_t) / np.log(p_t.shape[1]), 0.0, 1.0)


def normalize_weights(raw, target_sum: float) -> np.ndarray:
    """Scale nonnegative weights so they sum to ``target_sum``.

    A (near) all-zero vector cannot be rescaled; it falls back to
    all-ones, i.e. uniform weighting.
    """
    raw = np.asarray(raw, dtype=np.float64).ravel()
    if raw.size and raw.min() < 0:
        raise UsageError(f"negative raw weight {raw.min():g}")
    total = raw.sum()
    if total < 1e-12:
        return np.ones_like(raw)
    return raw * (target_sum / total)


def kl_rows(p_ref: np.ndarray, p_other: np.ndarray) -> np.ndarray:
    """Per-row KL(ref || other) with probabilities clamped at 1e-12."""
    ref = np.maximum(p_ref, PROB_FLOOR)
    oth = np.maximum(p_other, PROB_FLOOR)
    return (p_ref * (np.log(ref) - np.log(oth))).sum(axis=1)


def weighted_kl(
    p_ref: np.ndarray,
    p_other: np.ndarray,
    weights: np.ndarray,
    mask: np.ndarray,
    want_grads: bool = True,
):
    """Masked mean of w_i * KL(ref_i || other_i) plus distribution grads.

    Returns (loss, d_ref, d_other); the weights enter as constants.
    Grads are with respect to the probability grids, before any softmax
    chain.  Positions outside the mask contribute nothing.
    """
    p_ref, p_other = as_grid(p_ref), as_grid(p_other)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise UsageError("weighted_kl: every position is masked out")
    w = np.where(mask, np.asarray(weights, dtype=np.float64), 0.0)
    kl = kl_rows(p_ref, p_other)
    loss = float((w * kl).sum() / count)
    if not want_grads:
        return loss, None, None
    scale = (w / count)[:, None]
    ref_c = np.maximum(p_ref, PROB_FLOOR)
    oth_c = np.maximum(p_other, PROB_FLOOR)
    logdiff = np.log(ref_c) - np.log(oth_c)
    d_ref = scale * (logdiff + (p_ref > PROB_FLOOR).astype(np.float64))
    d_other = scale * (-(p_ref / oth_c) * (p_other > PROB_FLOOR))
    return loss, d_ref, d_other


def ce_from_probs(p: np.ndarray, targets, mask, want_grads: bool = True):
    """Masked mean negative log-probability of the gold ids.

    Used for the projected-distribution warm-up term, where the
    distribution is produced upstream of this function.
    """
    p = as_grid(p)
    t = np.asarray(targets, dtype=np.intp)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise UsageError("ce_from_probs: every position is masked out")
    rows = np.arange(p.shape[0])
    picked = np.maximum(p[rows, t], PROB_FLOOR)
    loss = float(-(np.where(mask, np.log(picked), 0.0)).sum() / count)
    if not want_grads:
        return loss, None
    d_p = np.zeros_like(p)
    live = mask & (p[rows, t] > PROB_FLOOR)
    d_p[rows[live], t[live]] = -1.0 / picked[live] / count
    return loss, d_p


def ce_from_logits(logits: np.ndarray, targets, mask, want_grads: bool = True):
    """Masked mean cross-entropy straight from logits (temperature 1)."""
    z = as_grid(logits)
    t = np.asarray(targets, dtype=np.intp)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise UsageError("ce_from_logits: every position is masked out")
    zs = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = logz - zs[rows, t]
    loss = float(np.where(mask, nll, 0.0).sum() / count)
    if not want_grads:
        return loss, None
    p = np.exp(zs - logz[:, None])
    d = p.copy()
    d[rows, t] -= 1.0
    d[~mask] = 0.0
    return loss, d / count
