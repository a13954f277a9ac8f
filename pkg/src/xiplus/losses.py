"""Training objectives.

* additive angular margin softmax on length-normalized embeddings,
* per-speaker centroids from a frozen pre-trained model,
* the stochastic variance loss, which regresses the scaled predicted standard
  deviation ``alpha * sqrt(diag(Sigma))`` onto the absolute deviation
  ``|phi - c|`` of each embedding from its speaker centroid,
* the epoch-dependent weight ``kappa`` that phases the variance loss in.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, DataError, MissingCentroidError, ShapeError


@dataclass(frozen=True)
class CentroidTable:
    """Speaker id -> mean embedding, computed once and treated as constant."""

    centroids: Mapping[str, np.ndarray]
    counts: Mapping[str, int]
    source: str = ""

    def __post_init__(self):
        for spk, c in self.centroids.items():
            if not np.all(np.isfinite(c)):
                raise DataError(f"centroid for {spk!r} is not finite")
            if self.counts.get(spk, 0) < 1:
                raise DataError(f"speaker {spk!r} has no utterances")

    def __getitem__(self, speaker) -> np.ndarray:
        try:
            return self.centroids[speaker]
        except KeyError:
            raise MissingCentroidError(speaker) from None

    def __contains__(self, speaker) -> bool:
        return speaker in self.centroids

    def __len__(self) -> int:
        return len(self.centroids)

    @property
    def speakers(self) -> list:
        return list(self.centroids)

    def lookup(self, speakers: Iterable) -> np.ndarray:
        return np.stack([self[s] for s in speakers])


def build_centroids(embeddings, source: str = "") -> CentroidTable:
    """Average the embeddings of each speaker.

    Args:
        embeddings: iterable of ``(speaker_id, vector)`` pairs.
        source: free-form tag naming the model that produced the embeddings.
    """
    sums: dict = OrderedDict()
    counts: dict = OrderedDict()
    dim = None
    for spk, vec in embeddings:
        vec = np.asarray(vec, dtype=np.float64)
        if dim is None:
            dim = vec.shape
        elif vec.shape != dim:
            raise ShapeError(f"embedding for {spk!r} has shape {vec.shape}, expected {dim}")
        if spk in sums:
            sums[spk] = sums[spk] + vec
            counts[spk] += 1
        else:
            sums[spk] = vec.copy()
            counts[spk] = 1
    if not sums:
        raise DataError("cannot build centroids from an empty embedding list")
    centroids = OrderedDict((spk, sums[spk] / counts[spk]) for spk in sorted(sums))
    return CentroidTable(centroids, OrderedDict((s, counts[s]) for s in centroids), source)


@dataclass
class SvlParams:
    """Variance-loss parameters; ``alpha = exp(log_alpha)`` stays positive."""

    log_alpha: float = math.log(0.1)
    lam: float = 0.01
    ep_svl: int = 70
    ep_max: int = 150

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if not self.ep_svl < self.ep_max:
            raise ConfigError("ep_svl must be smaller than ep_max")

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)


def kappa(ep: float, params: SvlParams) -> float:
    """Variance-loss weight: 0 up to ``ep_svl``, then linear up to ``lam`` at ``ep_max``."""
    if ep < 0 or ep > params.ep_max:
        raise ConfigError(f"epoch {ep} outside [0, {params.ep_max}]")
    if ep <= params.ep_svl:
        return 0.0
    return params.lam * (ep - params.ep_svl) / (params.ep_max - params.ep_svl)


@dataclass
class SvlResult:
    loss: float
    grad_mean: np.ndarray
    grad_var: np.ndarray
    grad_log_alpha: float


def svl_loss(means, covariances, speakers, centroids: CentroidTable, params: SvlParams,
             stop_grad_mean: bool = False) -> SvlResult:
    """Stochastic variance loss over a batch.

    Args:
        means: ``(B, d)`` embeddings.
        covariances: ``(B, d, d)`` full or ``(B, d)`` diagonal covariances;
            only the diagonal is used.
        speakers: ``B`` speaker ids, each present in ``centroids``.
        stop_grad_mean: zero the gradient into ``means`` (ablation switch).

    Returns:
        :class:`SvlResult`; ``grad_var`` is w.r.t. the covariance diagonal.
        Centroids are constants.  At ``|phi_i - c_i| = 0`` the absolute value
        contributes subgradient 0, as does ``sqrt`` at zero variance.
    """
    means = np.asarray(means, dtype=np.float64)
    cov = np.asarray(covariances, dtype=np.float64)
    var = np.diagonal(cov, axis1=-2, axis2=-1) if cov.ndim == 3 else cov
    if means.ndim != 2 or var.shape != means.shape:
        raise ShapeError(f"means {means.shape} and covariance diagonal {var.shape} disagree")
    speakers = list(speakers)
    if len(speakers) != means.shape[0]:
        raise ShapeError("one speaker id per embedding is required")
    if np.any(var < 0):
        raise DataError("covariance diagonal must be nonnegative")
    bsz = means.shape[0]
    alpha = params.alpha
    dev = means - centroids.lookup(speakers)
    std = np.sqrt(var)
    resid = alpha * std - np.abs(dev)
    loss = float(np.sum(resid**2) / bsz)

    grad_mean = -2.0 * resid * np.sign(dev) / bsz
    if stop_grad_mean:
        grad_mean = np.zeros_like(grad_mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        grad_var = np.where(std > 0, resid * alpha / (bsz * std), 0.0)
    grad_log_alpha = float(np.sum(2.0 * resid * alpha * std) / bsz)
    return SvlResult(loss, grad_mean, grad_var, grad_log_alpha)


@dataclass
class AamParams:
    """Class weights and margin schedule of the angular-margin softmax."""

    weight: np.ndarray  # (num_classes, d)
    scale: float = 32.0
    margin_start: float = 20
    margin_end: float = 40
    margin_final: float = 0.2
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError("AAM scale must be positive")
        if not 0.0 <= self.margin_final <= 0.5:
            raise ConfigError("AAM margin must lie in [0, 0.5]")
        if self.margin_end < self.margin_start:
            raise ConfigError("margin ramp must end after it starts")

    def margin(self, epoch: float) -> float:
        if epoch <= self.margin_start:
            return 0.0
        if epoch >= self.margin_end:
            return self.margin_final
        return self.margin_final * (epoch - self.margin_start) / (self.margin_end - self.margin_start)


def _normalize_rows(x, name):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DataError(f"{name} contains a zero-norm row")
    return x / norms, norms


def _normalize_backward(grad, unit, norms):
    return (grad - unit * np.sum(grad * unit, axis=-1, keepdims=True)) / norms


@dataclass
class AamResult:
    loss: float
    grad_embeddings: np.ndarray
    grad_weight: np.ndarray
    logits: np.ndarray


def aam_loss(embeddings, labels, params: AamParams, epoch: float | None = None,
             margin: float | None = None) -> AamResult:
    """Mean cross-entropy over ``s*cos(theta_y + m)`` / ``s*cos(theta_j)`` logits.

    The margin comes from the epoch schedule unless given explicitly.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    w = params.weight
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"embeddings must be (B, {w.shape[1]})")
    if labels.shape != (x.shape[0],):
        raise ShapeError("one label per embedding is required")
    if labels.size and (labels.min() < 0 or labels.max() >= w.shape[0]):
        raise DataError("label out of range")
    if margin is None:
        margin = 0.0 if epoch is None else params.margin(epoch)
    s = params.scale
    bsz = x.shape[0]
    rows = np.arange(bsz)

    x_unit, x_norm = _normalize_rows(x, "embeddings")
    w_unit, w_norm = _normalize_rows(w, "class weights")
    cos = x_unit @ w_unit.T
    cos_t = cos[rows, labels]
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
    cm, sm = math.cos(margin), math.sin(margin)
    target = cos_t * cm - sin_t * sm

    logits = s * cos
    logits[rows, labels] = s * target
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[rows, labels]))

    probs = np.exp(shifted - log_z[:, None])
    d_logits = probs
    d_logits[rows, labels] -= 1.0
    d_logits /= bsz
    d_cos = s * d_logits
    with np.errstate(divide="ignore", invalid="ignore"):
        d_target = np.where(sin_t > 1e-12, cm + sm * cos_t / sin_t, cm)
    d_cos[rows, labels] *= d_target

    grad_x = _normalize_backward(d_cos @ w_unit, x_unit, x_norm)
    grad_w = _normalize_backward(d_cos.T @ x_unit, w_unit, w_norm)
    return AamResult(loss, grad_x, grad_w, logits)


def total_loss(ce: float, svl: float, kappa_value: float) -> float:
    return ce + kappa_value * svl
