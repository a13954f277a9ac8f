"""Synthetic speakers drawn from the linear Gaussian frame model.

For every speaker an identity ``h ~ N(0, I_d)`` is drawn.  Each utterance
picks a noise level ``sigma`` from a small configured set and emits frames

    x_t = A (h + eps_t) + c,    eps_t ~ N(0, sigma^2 I_d)

where ``A`` is a fixed random ``d_in x d`` mixing matrix and ``c`` an optional
per-utterance channel offset.  With ``noise_mode = "frame"`` every frame draws
its own ``sigma``; the utterance-level truth is then the mean frame variance.
The train and eval splits use disjoint speakers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields

import numpy as np

from .._rng import stream
from ..errors import ConfigError
from ..scoring import Trial


@dataclass
class SynthConfig:
    num_speakers: int = 20
    utterances_per_speaker: int = 10
    frames_per_utterance: int = 20
    frame_dim: int = 16
    identity_dim: int = 8
    sigmas: tuple = (0.1, 1.0)
    noise_mode: str = "utterance"
    channel_scale: float = 0.0
    eval_speakers: int = 20
    eval_utterances_per_speaker: int = 10
    seed: int = 0
    mixing_seed: int = -1  # negative: derive from seed

    def __post_init__(self):
        self.sigmas = tuple(float(s) for s in self.sigmas)
        counts = ("num_speakers", "utterances_per_speaker", "frames_per_utterance", "frame_dim",
                  "identity_dim", "eval_speakers", "eval_utterances_per_speaker")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.sigmas or any(not s > 0 for s in self.sigmas):
            raise ConfigError("sigmas must be a nonempty list of positive values")
        if self.noise_mode not in ("utterance", "frame"):
            raise ConfigError("noise_mode must be 'utterance' or 'frame'")
        if self.channel_scale < 0:
            raise ConfigError("channel_scale must be nonnegative")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class Split:
    ids: list
    speakers: list
    frames: np.ndarray  # (N, T, d_in)
    frame_sigmas: np.ndarray  # (N, T)

    def __len__(self):
        return len(self.ids)

    @property
    def true_variance(self) -> np.ndarray:
        """Per-utterance noise variance (mean over frames)."""
        return np.mean(self.frame_sigmas**2, axis=1)

    @property
    def speaker_set(self) -> list:
        return sorted(set(self.speakers))


@dataclass
class Dataset:
    config: SynthConfig
    train: Split
    eval: Split
    trials: list
    identities: dict = field(default_factory=dict)
    mixing: np.ndarray | None = None

    @property
    def frame_dim(self) -> int:
        return self.train.frames.shape[-1]

    def speaker_index(self) -> dict:
        return {spk: i for i, spk in enumerate(self.train.speaker_set)}


def _emit_split(cfg, rng, mixing, prefix, n_spk, n_utt, identities):
    d = cfg.identity_dim
    T = cfg.frames_per_utterance
    sigmas = np.asarray(cfg.sigmas)
    ids, speakers, frames, frame_sigmas = [], [], [], []
    for s in range(n_spk):
        spk = f"{prefix}{s:03d}"
        h = rng.standard_normal(d)
        identities[spk] = h
        for u in range(n_utt):
            if cfg.noise_mode == "utterance":
                sig = np.full(T, sigmas[rng.integers(sigmas.size)])
            else:
                sig = sigmas[rng.integers(sigmas.size, size=T)]
            eps = rng.standard_normal((T, d)) * sig[:, None]
            x = (h + eps) @ mixing.T
            if cfg.channel_scale > 0:
                x = x + cfg.channel_scale * rng.standard_normal(cfg.frame_dim)
            ids.append(f"{spk}-u{u:02d}")
            speakers.append(spk)
            frames.append(x)
            frame_sigmas.append(sig)
    return Split(ids, speakers, np.stack(frames), np.stack(frame_sigmas))


def all_pair_trials(split: Split) -> list:
    return [
        Trial(split.ids[i], split.ids[j], "target" if split.speakers[i] == split.speakers[j] else "nontarget")
        for i, j in itertools.combinations(range(len(split)), 2)
    ]


def generate(config: SynthConfig) -> Dataset:
    """Draw a train split, a disjoint-speaker eval split and all eval pair trials."""
    mix_seed = config.seed if config.mixing_seed < 0 else config.mixing_seed
    mix_rng = stream(mix_seed, "mixing")
    mixing = mix_rng.standard_normal((config.frame_dim, config.identity_dim))
    mixing /= np.sqrt(config.identity_dim)
    identities: dict = {}
    train = _emit_split(config, stream(config.seed, "data-train"), mixing, "spk",
                        config.num_speakers, config.utterances_per_speaker, identities)
    evl = _emit_split(config, stream(config.seed, "data-eval"), mixing, "evspk",
                      config.eval_speakers, config.eval_utterances_per_speaker, identities)
    return Dataset(config, train, evl, all_pair_trials(evl), identities, mixing)
