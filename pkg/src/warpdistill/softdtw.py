"""Banded Soft-DTW sequence alignment and its divergence form.

Pipeline: cosine cost matrix -> additive band penalty (band geometry
derived from cross-model attention, treated as constant) -> smoothed
dynamic-programming score -> debiased symmetric divergence.  The
backward pass is the standard reverse recursion, so the gradient with
respect to the cost matrix is the expected path occupancy and lies in
[0, 1] entrywise.

The DP boundary uses a large finite sentinel rather than inf so that
min-subtraction keeps every exponent non-positive; sentinel cells simply
underflow to zero weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .numerics import as_grid

SENTINEL = 1e30


def cosine_cost(x: np.ndarray, y: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Pairwise cosine distance: entry (i, j) = 1 - <x_i, y_j> / max(|x_i||y_j|, eps).

    The zero-row guard clamps the norm product instead of adding to it:
    away from zero rows this is the exact cosine, so the cost matrix is
    invariant to rescaling either row set (an invariant the alignment
    loss relies on), and self-similarity of a unit row is exactly zero.
    """
    x, y = as_grid(x), as_grid(y)
    if x.shape[1] != y.shape[1]:
        raise UsageError(f"feature widths differ: {x.shape[1]} vs {y.shape[1]}")
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    denom = np.maximum(nx[:, None] * ny[None, :], eps)
    return 1.0 - (x @ y.T) / denom


def cosine_cost_backward(
    x: np.ndarray, y: np.ndarray, d_cost: np.ndarray, eps: float = 1e-8
) -> tuple[np.ndarray, np.ndarray]:
    """Chain an upstream cost-matrix gradient into both row sets."""
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    denom = np.maximum(nx[:, None] * ny[None, :], eps)
    live = denom > eps  # norm gradient vanishes where the clamp is active
    dot = x @ y.T
    d_sim = -np.asarray(d_cost, dtype=np.float64)
    w = d_sim / denom
    v = np.where(live, d_sim * dot / denom**2, 0.0)
    nx_safe = np.maximum(nx, 1e-300)
    ny_safe = np.maximum(ny, 1e-300)
    dx = w @ y - ((v @ ny) / nx_safe)[:, None] * x
    dy = w.T @ x - ((v.T @ nx) / ny_safe)[:, None] * y
    return dx, dy


@dataclass(frozen=True)
class BandParams:
    """Banding hyperparameters; the numeric defaults are the method's
    published values, used verbatim for every experiment."""

    base: float = 5.0         # minimum half-width in teacher tokens
    sensitivity: float = 2.0  # width gain per nat of attention entropy
    blend: float = 0.7        # soft center vs proportional-diagonal mix
    penalty: float = 1.0      # additive cost outside the band


@dataclass(frozen=True)
class BandSpec:
    """Per-student-row band centers and half-widths (1-based teacher index)."""

    centers: np.ndarray
    widths: np.ndarray
    params: BandParams

    def outside_mask(self, cols: int) -> np.ndarray:
        j = np.arange(1, cols + 1, dtype=np.float64)
        return np.abs(j[None, :] - self.centers[:, None]) > self.widths[:, None]


def build_band(attention: np.ndarray, params: BandParams) -> BandSpec:
    """Derive the adaptive band from a row-stochastic attention matrix.

    Row center blends the attention-weighted mean teacher index with the
    proportional diagonal; width grows linearly with the row's attention
    entropy.  Both are treated as constants downstream (no gradient
    flows back into the attention).
    """
    a = as_grid(attention)
    rows, cols = a.shape
    sums = a.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6 or a.min() < -1e-9:
        raise UsageError("attention matrix must be row-stochastic")
    j = np.arange(1, cols + 1, dtype=np.float64)
    soft_center = a @ j
    linear_center = np.arange(1, rows + 1, dtype=np.float64) * cols / rows
    centers = params.blend * soft_center + (1.0 - params.blend) * linear_center
    entropy = -np.where(a > 0, a * np.log(np.maximum(a, 1e-300)), 0.0).sum(axis=1)
    widths = params.base + params.sensitivity * entropy
    return BandSpec(centers=centers, widths=widths, params=params)


def apply_band(cost: np.ndarray, band: BandSpec) -> np.ndarray:
    """Add the fixed penalty to every entry outside the band."""
    cost = as_grid(cost)
    if band.centers.shape[0] != cost.shape[0]:
        raise UsageError("band rows do not match cost rows")
    return cost + band.params.penalty * band.outside_mask(cost.shape[1])


@dataclass
class SoftDtwResult:
    score: float
    accumulated: np.ndarray  # (rows+1, cols+1) DP grid incl. sentinel boundary
    grad: np.ndarray         # d(score)/d(cost), the soft alignment


def soft_dtw(cost: np.ndarray, gamma: float) -> SoftDtwResult:
    """Smoothed DTW score plus its gradient w.r.t. the cost matrix.

    Recurrence over monotone steps (right, down, diagonal) with the hard
    min replaced by -gamma*log(sum exp(-a/gamma)).  Forward and backward
    both sweep anti-diagonals so the inner work is vectorized.
    """
    if gamma <= 0:
        raise UsageError(f"gamma must be positive, got {gamma}")
    c = as_grid(cost)
    n, m = c.shape

    r = np.full((n + 2, m + 2), SENTINEL)
    r[0, 0] = 0.0
    for d in range(2, n + m + 1):
        i = np.arange(max(1, d - m), min(n, d - 1) + 1)
        j = d - i
        cand = np.stack([r[i - 1, j - 1], r[i - 1, j], r[i, j - 1]])
        low = cand.min(axis=0)
        z = np.exp(-(cand - low) / gamma).sum(axis=0)
        r[i, j] = c[i - 1, j - 1] + low - gamma * np.log(z)
    score = float(r[n, m])

    # reverse occupancy recursion
    cpad = np.zeros((n + 2, m + 2))
    cpad[1 : n + 1, 1 : m + 1] = c
    rb = r.copy()
    rb[:, m + 1] = -SENTINEL
    rb[n + 1, :] = -SENTINEL
    rb[n + 1, m + 1] = rb[n, m]
    e = np.zeros((n + 2, m + 2))
    e[n + 1, m + 1] = 1.0
    for d in range(n + m, 1, -1):
        i = np.arange(max(1, d - m), min(n, d - 1) + 1)
        j = d - i
        a = np.exp((rb[i + 1, j] - rb[i, j] - cpad[i + 1, j]) / gamma)
        b = np.exp((rb[i, j + 1] - rb[i, j] - cpad[i, j + 1]) / gamma)
        g = np.exp((rb[i + 1, j + 1] - rb[i, j] - cpad[i + 1, j + 1]) / gamma)
        e[i, j] = a * e[i + 1, j] + b * e[i, j + 1] + g * e[i + 1, j + 1]

    return SoftDtwResult(
        score=score,
        accumulated=r[: n + 1, : m + 1].copy(),
        grad=e[1 : n + 1, 1 : m + 1].copy(),
    )


@dataclass
class NdtwResult:
    value: float
    d_x: np.ndarray
    d_y: np.ndarray
    cross_cost: np.ndarray
    banded_cost: np.ndarray
    alignment_grad: np.ndarray


def ndtw(
    x: np.ndarray,
    y: np.ndarray,
    band: BandSpec | None,
    gamma: float,
) -> NdtwResult:
    """Debiased divergence: cross score minus half the two self scores.

    Only the cross term is banded; the self terms run on the raw cosine
    costs, which keeps ndtw(x, x) exactly zero when the penalty is off.
    Gradients for both inputs are produced eagerly.
    """
    cxy = cosine_cost(x, y)
    banded = apply_band(cxy, band) if band is not None else cxy
    res_xy = soft_dtw(banded, gamma)
    res_xx = soft_dtw(cosine_cost(x, x), gamma)
    res_yy = soft_dtw(cosine_cost(y, y), gamma)
    value = res_xy.score - 0.5 * (res_xx.score + res_yy.score)

    dx, dy = cosine_cost_backward(x, y, res_xy.grad)
    sx_a, sx_b = cosine_cost_backward(x, x, -0.5 * res_xx.grad)
    dx += sx_a + sx_b
    sy_a, sy_b = cosine_cost_backward(y, y, -0.5 * res_yy.grad)
    dy += sy_a + sy_b
    return NdtwResult(
        value=value,
        d_x=dx,
        d_y=dy,
        cross_cost=cxy,
        banded_cost=banded,
        alignment_grad=res_xy.grad,
    )


@dataclass
class DtwLossResult:
    total: float
    embed_term: float
    hidden_term: float
    d_embed_student: np.ndarray
    d_embed_teacher: np.ndarray
    d_hidden_student: np.ndarray
    d_hidden_teacher: np.ndarray
    band: BandSpec | None
    embed: NdtwResult
    hidden: NdtwResult


def dtw_loss(
    embed_student: np.ndarray,
    embed_teacher: np.ndarray,
    hidden_student: np.ndarray,
    hidden_teacher: np.ndarray,
    attention: np.ndarray | None,
    params: BandParams,
    gamma: float,
) -> DtwLossResult:
    """Sum of the embedding-level and hidden-level divergences.

    Both levels share one band, derived from the same attention matrix;
    pass ``attention=None`` (or zero penalty) to run unbanded.  Teacher
    grids are the projected ones, already in the student width.
    """
    band = None
    if attention is not None and params.penalty != 0.0:
        band = build_band(attention, params)
    hidden = ndtw(hidden_student, hidden_teacher, band, gamma)
    embed = ndtw(embed_student, embed_teacher, band, gamma)
    return DtwLossResult(
        total=hidden.value + embed.value,
        embed_term=embed.value,
        hidden_term=hidden.value,
        d_embed_student=embed.d_x,
        d_embed_teacher=embed.d_y,
        d_hidden_student=hidden.d_x,
        d_hidden_teacher=hidden.d_y,
        band=band,
        embed=embed,
        hidden=hidden,
    )
