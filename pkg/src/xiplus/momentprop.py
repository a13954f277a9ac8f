"""Twin mean/variance branches through batch norm and the embedding projection.

The mean branch is ordinary batch normalization followed by an affine layer::

    phi_bn = (phi - mu) / sqrt(var + eps) * gamma + beta
    phi_fc = phi_bn @ W.T + b

The variance branch pushes the diagonal posterior covariance ``1/L`` through
the same two maps.  Batch norm is elementwise affine given its statistics, so
the covariance scales by ``gamma**2 / (var + eps)``; the projection turns the
diagonal into the full matrix ``W diag(c) W.T``.  Both branches read the same
:class:`BnState` and :class:`FcParams` objects, so they cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError, StaleCacheError

SYMMETRY_TOL = 1e-10
PSD_TOL = -1e-8


@dataclass(eq=False)
class BnState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.eps <= 0:
            raise DataError("batch-norm epsilon must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise DataError("batch-norm momentum must lie in [0, 1]")
        if np.any(np.asarray(self.running_var) < 0):
            raise DataError("running variance must be nonnegative")

    @classmethod
    def identity(cls, d: int, eps: float = 1e-5, momentum: float = 0.1) -> "BnState":
        return cls(np.ones(d), np.zeros(d), np.zeros(d), np.ones(d), eps, momentum)

    @property
    def dim(self) -> int:
        return self.gamma.size

    def bump(self):
        self.version += 1


@dataclass(eq=False)
class FcParams:
    weight: np.ndarray  # (d_out, d)
    bias: np.ndarray  # (d_out,)
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("fc weight must be (d_out, d) and bias (d_out,)")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise DataError("fc parameters must be finite")

    @classmethod
    def init(cls, d: int, d_out: int, rng=None) -> "FcParams":
        rng = np.random.default_rng(0) if rng is None else rng
        bound = 1.0 / np.sqrt(d)
        return cls(rng.uniform(-bound, bound, size=(d_out, d)), np.zeros(d_out))

    def bump(self):
        self.version += 1


@dataclass(frozen=True)
class ProjectedGaussian:
    """Embedding mean and covariance after the projection.

    ``covariance`` is ``(d_out, d_out)`` unless ``diagonal`` is set, in which
    case it holds only the ``(d_out,)`` diagonal.  ``None`` means the
    embedding carries no uncertainty at all.
    """

    mean: np.ndarray
    covariance: np.ndarray | None
    diagonal: bool = False

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        if mean.ndim != 1:
            raise ShapeError(f"mean must be a vector, got shape {mean.shape}")
        object.__setattr__(self, "mean", mean)
        if self.covariance is None:
            return
        cov = np.asarray(self.covariance, dtype=np.float64)
        d = mean.shape[-1]
        if self.diagonal:
            if cov.shape != (d,):
                raise ShapeError(f"diagonal covariance must have shape ({d},)")
            if np.any(cov < PSD_TOL):
                raise DataError("covariance diagonal has negative entries")
        else:
            if cov.shape != (d, d):
                raise ShapeError(f"covariance must have shape ({d}, {d})")
            if np.max(np.abs(cov - cov.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.abs(cov).max(initial=0.0)):
                raise DataError("covariance is not symmetric")
            if d and np.linalg.eigvalsh(cov)[0] < PSD_TOL * max(1.0, np.abs(cov).max()):
                raise DataError("covariance is not positive semidefinite")
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def has_covariance(self) -> bool:
        return self.covariance is not None

    def variance(self) -> np.ndarray:
        if self.covariance is None:
            return np.zeros_like(self.mean)
        return self.covariance if self.diagonal else np.diag(self.covariance).copy()

    def dense(self) -> np.ndarray:
        if self.covariance is None:
            return np.zeros((self.dim, self.dim))
        return np.diag(self.covariance) if self.diagonal else self.covariance


@dataclass(eq=False)
class BnStats:
    """Statistics used by one batch-norm call, shared with the variance branch."""

    state: BnState
    mode: str
    mean: np.ndarray
    var: np.ndarray
    batch_size: int


def _check_batch(x, d, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"{name} must have shape (B, {d}), got {x.shape}")
    return x


def bn_forward(state: BnState, phi, mode: str = "train", update_running: bool = True):
    """Batch-normalize a ``(B, d)`` batch.

    Train mode uses the batch mean and biased variance and (optionally)
    updates the running statistics; infer mode uses the running statistics.

    Returns:
        ``(phi_bn, stats)``.
    """
    phi = _check_batch(phi, state.dim, "phi")
    if mode == "train":
        if phi.shape[0] < 2:
            raise DataError("batch normalization in train mode needs a batch of at least 2")
        mu = phi.mean(axis=0)
        var = phi.var(axis=0)
        if update_running:
            mom = state.momentum
            state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
            state.running_var[...] = (1 - mom) * state.running_var + mom * var
    elif mode == "infer":
        mu = state.running_mean.copy()
        var = state.running_var.copy()
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    phi_bn = (phi - mu) / np.sqrt(var + state.eps) * state.gamma + state.beta
    return phi_bn, BnStats(state, mode, mu, var, phi.shape[0])


def bn_var_forward(state: BnState, precision, stats: BnStats):
    """Covariance branch of batch norm: ``(1/L) * gamma**2 / (var + eps)``."""
    if stats.state is not state:
        raise DataError("batch-norm statistics belong to a different state")
    precision = _check_batch(precision, state.dim, "precision")
    if stats.mode == "train" and precision.shape[0] != stats.batch_size:
        raise DataError("variance batch does not match the batch that produced the statistics")
    return state.gamma**2 / (precision * (stats.var + state.eps))


def fc_forward(params: FcParams, phi_bn):
    phi_bn = np.asarray(phi_bn, dtype=np.float64)
    if phi_bn.shape[-1] != params.weight.shape[1]:
        raise ShapeError(f"input width {phi_bn.shape[-1]} != fc input width {params.weight.shape[1]}")
    return phi_bn @ params.weight.T + params.bias


def fc_var_forward(params: FcParams, cov_bn, diagonal: bool = False):
    """Push diagonal covariances ``(..., d)`` through the projection.

    Returns ``W diag(c) W.T`` with shape ``(..., d_out, d_out)``, or just its
    diagonal ``(..., d_out)`` when ``diagonal`` is set.
    """
    cov_bn = np.asarray(cov_bn, dtype=np.float64)
    w = params.weight
    if cov_bn.shape[-1] != w.shape[1]:
        raise ShapeError(f"covariance width {cov_bn.shape[-1]} != fc input width {w.shape[1]}")
    if diagonal:
        return cov_bn @ (w * w).T
    sigma = np.einsum("ik,...k,jk->...ij", w, cov_bn, w)
    # exact symmetry regardless of summation order
    return 0.5 * (sigma + np.swapaxes(sigma, -1, -2))


@dataclass(eq=False)
class MomentCache:
    bn: BnState
    fc: FcParams
    versions: tuple
    stats: BnStats
    phi: np.ndarray
    precision: np.ndarray
    phi_bn: np.ndarray
    cov_bn: np.ndarray
    diagonal: bool


class TwinBranch:
    """Batch norm + projection shared by the mean and covariance branches."""

    def __init__(self, bn: BnState, fc: FcParams):
        if fc.weight.shape[1] != bn.dim:
            raise ShapeError("fc input width must equal the batch-norm width")
        self.bn = bn
        self.fc = fc

    def forward(self, phi, precision, mode="train", diagonal=False, update_running=True):
        """Returns ``(phi_fc, cov_fc, cache)`` for a batch of utterance posteriors."""
        phi_bn, stats = bn_forward(self.bn, phi, mode, update_running)
        cov_bn = bn_var_forward(self.bn, precision, stats)
        phi_fc = fc_forward(self.fc, phi_bn)
        cov_fc = fc_var_forward(self.fc, cov_bn, diagonal)
        cache = MomentCache(self.bn, self.fc, (self.bn.version, self.fc.version), stats,
                            np.asarray(phi, dtype=np.float64), np.asarray(precision, dtype=np.float64),
                            phi_bn, cov_bn, diagonal)
        return phi_fc, cov_fc, cache

    def project(self, phi, precision, diagonal=False) -> list[ProjectedGaussian]:
        """Inference-mode projection of a batch into :class:`ProjectedGaussian` objects."""
        phi_fc, cov_fc, _ = self.forward(phi, precision, "infer", diagonal)
        return [ProjectedGaussian(m, c, diagonal) for m, c in zip(phi_fc, cov_fc)]

    def backward(self, cache: MomentCache, grad_mean, grad_cov):
        return momentprop_backward(cache, grad_mean, grad_cov)


def momentprop_backward(cache: MomentCache, grad_mean, grad_cov):
    """Gradients of both branches w.r.t. their inputs and shared parameters.

    Args:
        cache: from :meth:`TwinBranch.forward`.
        grad_mean: ``(B, d_out)`` upstream gradient on ``phi_fc``.
        grad_cov: ``(B, d_out, d_out)`` upstream gradient on the covariance, or
            ``(B, d_out)`` in diagonal mode.  ``None`` means zero.

    Returns:
        dict with keys ``phi``, ``precision``, ``gamma``, ``beta``, ``weight``, ``bias``.
    """
    bn, fc = cache.bn, cache.fc
    if (bn.version, fc.version) != cache.versions or cache.stats.state is not bn:
        raise StaleCacheError("moment-propagation cache is stale")
    w = fc.weight
    bsz = cache.phi.shape[0]
    grad_mean = np.asarray(grad_mean, dtype=np.float64)
    if grad_mean.shape != (bsz, w.shape[0]):
        raise ShapeError(f"grad_mean must have shape {(bsz, w.shape[0])}")
    c = cache.cov_bn

    # projection
    d_weight = grad_mean.T @ cache.phi_bn
    d_bias = grad_mean.sum(axis=0)
    d_phi_bn = grad_mean @ w
    if grad_cov is None:
        d_cov_bn = np.zeros_like(c)
    elif cache.diagonal:
        grad_cov = np.asarray(grad_cov, dtype=np.float64)
        if grad_cov.shape != (bsz, w.shape[0]):
            raise ShapeError("diagonal grad_cov must have shape (B, d_out)")
        d_cov_bn = grad_cov @ (w * w)
        d_weight = d_weight + 2.0 * w * (grad_cov.T @ c)
    else:
        grad_cov = np.asarray(grad_cov, dtype=np.float64)
        if grad_cov.shape != (bsz, w.shape[0], w.shape[0]):
            raise ShapeError("grad_cov must have shape (B, d_out, d_out)")
        sym = grad_cov + np.swapaxes(grad_cov, -1, -2)
        d_cov_bn = np.einsum("ik,bij,jk->bk", w, grad_cov, w)
        d_weight = d_weight + np.einsum("bij,jk,bk->ik", sym, w, c)

    # batch norm, covariance branch: c = gamma^2 / (L (var + eps))
    stats = cache.stats
    denom = stats.var + bn.eps
    g_c = d_cov_bn * c
    d_gamma = (d_cov_bn * 2.0 * bn.gamma / (cache.precision * denom)).sum(axis=0)
    d_precision = -g_c / cache.precision
    d_var = -g_c.sum(axis=0) / denom

    # batch norm, mean branch
    inv_std = 1.0 / np.sqrt(denom)
    x_hat = (cache.phi - stats.mean) * inv_std
    d_gamma = d_gamma + (d_phi_bn * x_hat).sum(axis=0)
    d_beta = d_phi_bn.sum(axis=0)
    d_xhat = d_phi_bn * bn.gamma
    if stats.mode == "train":
        d_phi = inv_std * (d_xhat - d_xhat.mean(axis=0) - x_hat * (d_xhat * x_hat).mean(axis=0))
        d_phi = d_phi + d_var * 2.0 * (cache.phi - stats.mean) / bsz
    else:
        d_phi = d_xhat * inv_std

    return dict(phi=d_phi, precision=d_precision, gamma=d_gamma, beta=d_beta,
                weight=d_weight, bias=d_bias)
