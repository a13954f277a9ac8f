"""Toy end-to-end model: per-frame MLP encoder, uncertainty head, posterior
pooling, twin mean/variance projection, and the two training losses.

Every component has an explicit backward pass; :meth:`XiPlusModel.loss_and_grads`
chains them.  Parameters are exposed as a flat ``name -> array`` mapping of
live arrays so the optimizer and the checkpoint code can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..gausscore import pool_arrays, pool_arrays_backward
from ..losses import AamParams, CentroidTable, SvlParams, aam_loss, svl_loss, total_loss
from ..momentprop import BnState, FcParams, ProjectedGaussian, TwinBranch
from ..uhead import estimate_beliefs, init_uhead_params, uhead_backward, UncertaintyHeadParams


@dataclass(frozen=True)
class Architecture:
    frame_dim: int
    num_classes: int
    enc_hidden: int = 32
    model_dim: int = 16
    heads: int = 8
    pool_dim: int = 16
    embed_dim: int = 8
    aam_scale: float = 32.0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    diagonal_cov: bool = False


def _lin(rng, n_in, n_out):
    bound = 1.0 / math.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out))


@dataclass
class LossParts:
    ce: float
    svl: float
    kappa: float
    total: float


@dataclass(eq=False)
class ForwardCache:
    frames: np.ndarray
    hidden: np.ndarray
    features: np.ndarray
    means: np.ndarray
    precisions: np.ndarray
    head_cache: object
    moment_cache: object
    phi: np.ndarray
    precision: np.ndarray


class XiPlusModel:
    def __init__(self, arch: Architecture, encoder: dict, head: UncertaintyHeadParams,
                 prior_mean, prior_log_precision, twin: TwinBranch, aam: AamParams, log_alpha):
        self.arch = arch
        self.encoder = encoder
        self.head = head
        self.prior_mean = prior_mean
        self.prior_log_precision = prior_log_precision
        self.twin = twin
        self.aam = aam
        self.log_alpha = log_alpha  # 0-d array so it can be updated in place

    @classmethod
    def init(cls, arch: Architecture, rng, margin_schedule=(20, 40, 0.2), log_alpha=math.log(0.1)):
        """Fresh model; draws happen in a fixed order from ``rng``."""
        a = arch
        encoder = {
            "w1": _lin(rng, a.frame_dim, a.enc_hidden), "b1": np.zeros(a.enc_hidden),
            "w2": _lin(rng, a.enc_hidden, a.model_dim), "b2": np.zeros(a.model_dim),
        }
        head = init_uhead_params(a.model_dim, a.pool_dim, a.heads, rng)
        twin = TwinBranch(BnState.identity(a.pool_dim, a.bn_eps, a.bn_momentum),
                          FcParams.init(a.pool_dim, a.embed_dim, rng))
        start, end, final = margin_schedule
        aam = AamParams(rng.standard_normal((a.num_classes, a.embed_dim)), a.aam_scale, start, end, final)
        return cls(arch, encoder, head, np.zeros(a.pool_dim), np.zeros(a.pool_dim), twin, aam,
                   np.array(float(log_alpha)))

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> dict:
        params = {f"encoder.{k}": v for k, v in self.encoder.items()}
        params.update({f"head.{k}": v for k, v in self.head.named().items()})
        params["prior.mean"] = self.prior_mean
        params["prior.log_precision"] = self.prior_log_precision
        params["bn.gamma"] = self.twin.bn.gamma
        params["bn.beta"] = self.twin.bn.beta
        params["fc.weight"] = self.twin.fc.weight
        params["fc.bias"] = self.twin.fc.bias
        params["aam.weight"] = self.aam.weight
        params["svl.log_alpha"] = self.log_alpha
        return params

    def buffers(self) -> dict:
        return {"bn.running_mean": self.twin.bn.running_mean, "bn.running_var": self.twin.bn.running_var}

    def state(self) -> dict:
        return {**self.parameters(), **self.buffers()}

    def bump(self):
        """Invalidate outstanding forward caches after an in-place update."""
        self.head.bump()
        self.twin.bn.bump()
        self.twin.fc.bump()

    @property
    def alpha(self) -> float:
        return math.exp(float(self.log_alpha))

    def svl_params(self, lam, ep_svl, ep_max) -> SvlParams:
        return SvlParams(float(self.log_alpha), lam, ep_svl, ep_max)

    # -- forward / backward -------------------------------------------------

    def encode(self, frames):
        e = self.encoder
        hidden = np.tanh(frames @ e["w1"] + e["b1"])
        return hidden, np.tanh(hidden @ e["w2"] + e["b2"])

    def forward(self, frames, mode="train", diagonal=None, update_running=True):
        """Frames ``(B, T, d_in)`` -> ``(phi_fc, cov_fc, cache)``."""
        frames = np.asarray(frames, dtype=np.float64)
        diagonal = self.arch.diagonal_cov if diagonal is None else diagonal
        hidden, feats = self.encode(frames)
        beliefs, head_cache = estimate_beliefs(self.head, feats)
        prec = beliefs.precisions
        phi, total = pool_arrays(beliefs.means, prec, self.prior_mean, np.exp(self.prior_log_precision))
        phi_fc, cov_fc, mcache = self.twin.forward(phi, total, mode, diagonal, update_running)
        cache = ForwardCache(frames, hidden, feats, beliefs.means, prec, head_cache, mcache, phi, total)
        return phi_fc, cov_fc, cache

    def backward(self, cache: ForwardCache, grad_mean, grad_cov) -> dict:
        mg = self.twin.backward(cache.moment_cache, grad_mean, grad_cov)
        prior_prec = np.exp(self.prior_log_precision)
        d_means, d_prec, d_pm, d_pp = pool_arrays_backward(
            cache.means, cache.precisions, self.prior_mean, prior_prec, mg["phi"], mg["precision"])
        hg, d_feats = uhead_backward(self.head, cache.head_cache, d_means, d_prec * cache.precisions)
        e = self.encoder
        d_feats = d_feats * (1.0 - cache.features**2)
        d_hidden = (d_feats @ e["w2"].T) * (1.0 - cache.hidden**2)
        flat = lambda a: a.reshape(-1, a.shape[-1])
        grads = {
            "encoder.w1": flat(cache.frames).T @ flat(d_hidden),
            "encoder.b1": flat(d_hidden).sum(axis=0),
            "encoder.w2": flat(cache.hidden).T @ flat(d_feats),
            "encoder.b2": flat(d_feats).sum(axis=0),
        }
        grads.update({f"head.{k}": v for k, v in hg.items()})
        grads["prior.mean"] = d_pm
        grads["prior.log_precision"] = d_pp * prior_prec
        grads["bn.gamma"] = mg["gamma"]
        grads["bn.beta"] = mg["beta"]
        grads["fc.weight"] = mg["weight"]
        grads["fc.bias"] = mg["bias"]
        return grads

    def loss_and_grads(self, frames, labels, epoch, speakers=None, centroids: CentroidTable | None = None,
                       kappa_value=0.0, svl_config=(0.01, 70, 150), stop_grad_mean=False,
                       update_running=True):
        """Final loss ``CE + kappa * SVL`` and its gradient for every parameter.

        The variance loss is evaluated whenever centroids are given (so it can
        be logged), but contributes only through ``kappa_value``.
        """
        phi_fc, cov_fc, cache = self.forward(frames, "train", update_running=update_running)
        aam = aam_loss(phi_fc, labels, self.aam, epoch)
        grad_mean = aam.grad_embeddings
        grad_cov = None
        svl_value = float("nan")
        grad_log_alpha = 0.0
        if centroids is not None:
            lam, ep_svl, ep_max = svl_config
            svl = svl_loss(phi_fc, cov_fc, speakers, centroids, self.svl_params(lam, ep_svl, ep_max),
                           stop_grad_mean)
            svl_value = svl.loss
            grad_mean = grad_mean + kappa_value * svl.grad_mean
            gv = kappa_value * svl.grad_var
            if cov_fc.ndim == 3:
                grad_cov = np.zeros_like(cov_fc)
                idx = np.arange(cov_fc.shape[-1])
                grad_cov[:, idx, idx] = gv
            else:
                grad_cov = gv
            grad_log_alpha = kappa_value * svl.grad_log_alpha
        grads = self.backward(cache, grad_mean, grad_cov)
        grads["aam.weight"] = aam.grad_weight
        grads["svl.log_alpha"] = np.array(grad_log_alpha)
        svl_term = 0.0 if centroids is None else svl_value
        parts = LossParts(aam.loss, svl_value, kappa_value, total_loss(aam.loss, svl_term, kappa_value))
        ordered = {name: grads[name] for name in self.parameters()}
        return parts, ordered

    # -- inference ----------------------------------------------------------

    def embed_arrays(self, frames, diagonal=None):
        """Inference-mode embeddings ``(phi_fc, cov_fc)`` for a batch of utterances."""
        phi_fc, cov_fc, _ = self.forward(frames, "infer", diagonal)
        return phi_fc, cov_fc

    def embed(self, frames, diagonal=None) -> list:
        diagonal = self.arch.diagonal_cov if diagonal is None else diagonal
        phi_fc, cov_fc = self.embed_arrays(frames, diagonal)
        return [ProjectedGaussian(m, c, diagonal) for m, c in zip(phi_fc, cov_fc)]

    def frame_precisions(self, frames) -> np.ndarray:
        _, feats = self.encode(np.asarray(frames, dtype=np.float64))
        beliefs, _ = estimate_beliefs(self.head, feats)
        return beliefs.precisions
