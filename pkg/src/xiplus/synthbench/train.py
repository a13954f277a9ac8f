"""Two-stage training on the synthetic benchmark.

Stage 1 trains with the angular-margin softmax alone.  Its embeddings of the
training utterances give frozen speaker centroids.  Stage 2 starts from the
stage-1 weights and adds the variance loss with the ``kappa`` ramp.

Optimization is SGD with momentum 0.9.  The learning rate warms up linearly
from 0 and then decays exponentially to ``lr_final`` at the last epoch; it is
evaluated at fractional epoch progress after every step.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .._rng import stream
from ..errors import ConfigError, DivergenceError, NumericalError
from ..losses import CentroidTable, build_centroids, kappa
from .data import Dataset, Split
from .model import Architecture, XiPlusModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training schedule and architecture knobs.

    Defaults are the full-scale constants; :meth:`desk_scale` gives the small
    reference run used by the benchmark.
    """

    ep_max: int = 150
    ep_svl: int = 70
    lam: float = 0.01
    warmup_epochs: float = 6
    lr_peak: float = 0.1
    lr_final: float = 5e-5
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 20
    aam_scale: float = 32.0
    margin_start: float = 20
    margin_end: float = 40
    margin_final: float = 0.2
    seed: int = 0
    checkpoint_every: int = 0
    enc_hidden: int = 32
    model_dim: int = 16
    heads: int = 8
    pool_dim: int = 16
    embed_dim: int = 8
    cov_mode: str = "full"
    stop_grad_mean: bool = False
    init_log_alpha: float = math.log(0.1)
    dropout: float = 0.0

    def __post_init__(self):
        if self.ep_max < 0:
            raise ConfigError("ep_max must be >= 0")
        if not 0 <= self.ep_svl < max(self.ep_max, 1):
            raise ConfigError("ep_svl must lie in [0, ep_max)")
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        if self.ep_max and not 0 <= self.warmup_epochs < self.ep_max:
            raise ConfigError("warmup_epochs must be smaller than ep_max")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch normalization")
        if not (0 < self.lr_final <= self.lr_peak):
            raise ConfigError("need 0 < lr_final <= lr_peak")
        if self.cov_mode not in ("full", "diag"):
            raise ConfigError("cov_mode must be 'full' or 'diag'")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if self.dropout != 0.0:
            raise ConfigError("dropout is not supported")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """60-epoch reference run; SVL starts at 28/60 (the 70/150 ratio)."""
        base = dict(ep_max=60, ep_svl=28, margin_start=8, margin_end=16, lam=0.5, lr_peak=0.05,
                    lr_final=5e-5, warmup_epochs=3)
        base.update(overrides)
        return cls(**base)

    def architecture(self, frame_dim: int, num_classes: int) -> Architecture:
        return Architecture(frame_dim, num_classes, self.enc_hidden, self.model_dim, self.heads,
                            self.pool_dim, self.embed_dim, self.aam_scale,
                            diagonal_cov=self.cov_mode == "diag")

    @property
    def svl_config(self):
        return (self.lam, self.ep_svl, self.ep_max)


def learning_rate(progress: float, config: TrainConfig) -> float:
    """Learning rate at fractional epoch ``progress`` in ``[0, ep_max]``."""
    warm = config.warmup_epochs
    if progress <= warm:
        return config.lr_peak * (progress / warm if warm > 0 else 1.0)
    span = config.ep_max - warm
    frac = min(1.0, (progress - warm) / span)
    return config.lr_peak * (config.lr_final / config.lr_peak) ** frac


def optimizer_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9,
                   weight_decay: float = 0.0):
    """In-place SGD-with-momentum update of ``params``; ``velocity`` is updated too."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= lr * v


@dataclass
class Checkpoint:
    model: XiPlusModel
    config: TrainConfig
    epoch: int
    stage: str
    rng_state: dict | None = None
    history: list = field(default_factory=list)

    @property
    def alpha(self) -> float:
        return self.model.alpha


def new_model(dataset: Dataset, config: TrainConfig) -> XiPlusModel:
    arch = config.architecture(dataset.frame_dim, len(dataset.train.speaker_set))
    return XiPlusModel.init(arch, stream(config.seed, "init"),
                            (config.margin_start, config.margin_end, config.margin_final),
                            config.init_log_alpha)


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start:start + batch_size]


def _train(dataset: Dataset, config: TrainConfig, init: Checkpoint | None, stage: str,
           centroids: CentroidTable | None) -> Checkpoint:
    if init is None:
        model = new_model(dataset, config)
        rng = stream(config.seed, "batch")
    else:
        model = copy.deepcopy(init.model)
        rng = stream(config.seed, "batch")
        if init.rng_state is not None:
            rng.bit_generator.state = copy.deepcopy(init.rng_state)
    split = dataset.train
    if len(split) < config.batch_size:
        raise ConfigError(f"batch_size {config.batch_size} exceeds {len(split)} training utterances")
    spk_index = dataset.speaker_index()
    labels = np.array([spk_index[s] for s in split.speakers])
    speakers = np.array(split.speakers)
    params = model.parameters()
    velocity: dict = {}
    n_steps = len(split) // config.batch_size
    history = []
    svl_params = model.svl_params(*config.svl_config) if centroids is not None else None

    for epoch in range(1, config.ep_max + 1):
        k = kappa(epoch, svl_params) if svl_params is not None else 0.0
        ce_sum = svl_sum = total_sum = 0.0
        lr = 0.0
        for step, idx in enumerate(_batches(rng, len(split), config.batch_size)):
            parts, grads = model.loss_and_grads(
                split.frames[idx], labels[idx], epoch, speakers[idx], centroids, k,
                config.svl_config, config.stop_grad_mean)
            if not math.isfinite(parts.total):
                raise DivergenceError(f"non-finite loss at {stage} epoch {epoch} step {step}: {parts}")
            lr = learning_rate(epoch - 1 + (step + 1) / n_steps, config)
            optimizer_step(params, grads, velocity, lr, config.momentum, config.weight_decay)
            model.bump()
            ce_sum += parts.ce
            svl_sum += parts.svl
            total_sum += parts.total
        record = dict(epoch=epoch, ce_loss=ce_sum / n_steps, svl_loss=svl_sum / n_steps,
                      total_loss=total_sum / n_steps, kappa=k, alpha=model.alpha, lr=lr)
        history.append(record)
        log.debug("%s epoch %d: %s", stage, epoch, record)
    return Checkpoint(model, config, config.ep_max, stage, copy.deepcopy(rng.bit_generator.state), history)


def pretrain(dataset: Dataset, config: TrainConfig, init: Checkpoint | None = None) -> Checkpoint:
    """Stage 1: angular-margin softmax only (``kappa`` is identically 0)."""
    return _train(dataset, config, init, "pretrain", None)


def finetune_svl(dataset: Dataset, init: Checkpoint, centroids: CentroidTable,
                 config: TrainConfig) -> Checkpoint:
    """Stage 2: continue from ``init`` optimizing ``CE + kappa(ep) * SVL``."""
    missing = [s for s in dataset.train.speaker_set if s not in centroids]
    if missing:
        raise ConfigError(f"centroids missing for training speakers: {missing[:5]}")
    return _train(dataset, config, init, "svl", centroids)


def embed_split(model: XiPlusModel, split: Split, diagonal=None, chunk: int = 256):
    """Inference-mode ``(phi_fc, cov_fc)`` for every utterance of a split."""
    means, covs = [], []
    for start in range(0, len(split), chunk):
        m, c = model.embed_arrays(split.frames[start:start + chunk], diagonal)
        means.append(m)
        covs.append(c)
    return np.concatenate(means), np.concatenate(covs)


def centroids_from_model(model: XiPlusModel, split: Split, source: str = "stage1") -> CentroidTable:
    means, _ = embed_split(model, split)
    return build_centroids(zip(split.speakers, means), source)
