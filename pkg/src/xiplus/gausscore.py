"""Gaussian belief types and closed-form posterior pooling.

Each frame contributes a diagonal Gaussian belief ``N(z_t, diag(1/L_t))`` about
the latent identity ``h``.  With a Gaussian prior ``N(z_p, diag(1/L_p))`` the
posterior over ``h`` is again diagonal Gaussian with

    L   = sum_t L_t + L_p
    phi = (sum_t L_t * z_t + L_p * z_p) / L

(all products elementwise).  The array-level functions operate on arbitrary
leading batch dimensions; the dataclass API wraps them for single utterances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError

DEFAULT_MAX_FRAMES = 100_000


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class DiagonalGaussian:
    """Mean vector with a diagonal precision."""

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        precision = _as_vector(self.precision, "precision")
        if mean.shape != precision.shape:
            raise ShapeError(
                f"mean has length {mean.size} but precision has length {precision.size}"
            )
        if not np.all(np.isfinite(mean)):
            raise DataError("mean contains non-finite entries")
        if not np.all(np.isfinite(precision)) or np.any(precision <= 0):
            raise DataError("precision entries must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", precision)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def variance(self) -> np.ndarray:
        return 1.0 / self.precision


@dataclass(frozen=True)
class UtteranceGaussian:
    """Posterior over the utterance identity: mean ``phi``, diagonal precision ``L``."""

    mean: np.ndarray
    precision: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def covariance(self) -> np.ndarray:
        return 1.0 / self.precision


@dataclass(frozen=True)
class FrameSequence:
    """``T`` frame feature vectors of equal width, stored as a ``(T, d_in)`` array."""

    frames: np.ndarray
    max_frames: int = DEFAULT_MAX_FRAMES

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ShapeError(f"frames must be (T, d_in), got shape {frames.shape}")
        if frames.shape[0] > self.max_frames:
            raise DataError(f"{frames.shape[0]} frames exceeds the maximum of {self.max_frames}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def width(self) -> int:
        return self.frames.shape[1]


def prior_init(d: int) -> DiagonalGaussian:
    """Standard-normal prior: zero mean, unit precision."""
    if d < 1:
        raise DataError(f"prior dimension must be >= 1, got {d}")
    return DiagonalGaussian(np.zeros(d), np.ones(d))


def pool_arrays(means, precisions, prior_mean, prior_precision):
    """Batched posterior pooling.

    Args:
        means: ``(..., T, d)`` frame means.
        precisions: ``(..., T, d)`` frame precisions (positive).
        prior_mean: ``(d,)`` prior mean.
        prior_precision: ``(d,)`` prior precision (positive).

    Returns:
        ``(phi, L)``, each of shape ``(..., d)``.
    """
    weighted = np.sum(precisions * means, axis=-2) + prior_precision * prior_mean
    total = np.sum(precisions, axis=-2) + prior_precision
    assert np.all(total > 0), "pooled precision must be positive"
    return weighted / total, total


def pool_arrays_backward(means, precisions, prior_mean, prior_precision, grad_mean, grad_precision):
    """Reverse-mode derivative of :func:`pool_arrays`.

    Prior gradients are summed over all leading batch dimensions.

    Returns:
        ``(d_means, d_precisions, d_prior_mean, d_prior_precision)``.
    """
    phi, total = pool_arrays(means, precisions, prior_mean, prior_precision)
    g_weighted = grad_mean / total
    g_total = grad_precision - g_weighted * phi
    g_weighted_t = g_weighted[..., None, :]
    d_means = g_weighted_t * precisions
    d_precisions = g_weighted_t * means + g_total[..., None, :]
    lead = tuple(range(g_weighted.ndim - 1))
    d_prior_mean = np.sum(g_weighted * prior_precision, axis=lead)
    d_prior_precision = np.sum(g_weighted * prior_mean + g_total, axis=lead)
    return d_means, d_precisions, d_prior_mean, d_prior_precision


def _stack(frames: Sequence[DiagonalGaussian], prior: DiagonalGaussian):
    d = prior.dim
    for i, f in enumerate(frames):
        if f.dim != d:
            raise ShapeError(f"frame {i} has dimension {f.dim}, prior has {d}")
    if not frames:
        return np.zeros((0, d)), np.zeros((0, d))
    return np.stack([f.mean for f in frames]), np.stack([f.precision for f in frames])


def posterior_pool(frames: Sequence[DiagonalGaussian], prior: DiagonalGaussian) -> UtteranceGaussian:
    """Pool frame-level beliefs with the prior into one utterance Gaussian.

    Positivity and dimension checks happen in :class:`DiagonalGaussian`; an
    empty frame list returns the prior itself.
    """
    means, precisions = _stack(frames, prior)
    phi, total = pool_arrays(means, precisions, prior.mean, prior.precision)
    return UtteranceGaussian(phi, total)


@dataclass(frozen=True)
class PoolGradients:
    frame_means: np.ndarray
    frame_precisions: np.ndarray
    prior_mean: np.ndarray
    prior_precision: np.ndarray


def posterior_pool_grad(frames, prior, grad_mean, grad_precision) -> PoolGradients:
    """Gradients of a scalar objective w.r.t. all pooling inputs.

    ``grad_mean`` and ``grad_precision`` are the upstream gradients on the
    pooled mean and precision.
    """
    means, precisions = _stack(frames, prior)
    grad_mean = _as_vector(grad_mean, "grad_mean")
    grad_precision = _as_vector(grad_precision, "grad_precision")
    if grad_mean.shape != prior.mean.shape or grad_precision.shape != prior.mean.shape:
        raise ShapeError("upstream gradients must match the pooled dimension")
    return PoolGradients(
        *pool_arrays_backward(means, precisions, prior.mean, prior.precision, grad_mean, grad_precision)
    )
