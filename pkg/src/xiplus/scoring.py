"""Verification back-end: uncertainty-aware cosine scoring, EER and minDCF.

The uncertainty-aware score of two embeddings ``(phi1, S1)`` and ``(phi2, S2)``
is

    <phi1, phi2> / sqrt(phi1' (I + rho S1)^-1 phi1) / sqrt(phi2' (I + rho S2)^-1 phi2)

which is the plain cosine when ``rho = 0`` or both covariances vanish.  The
denominator factorizes per embedding, so :func:`evaluate` computes each
quadratic form once and reuses it across all trials.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import ConfigError, DataError, NumericalError
from .momentprop import ProjectedGaussian

LABELS = ("target", "nontarget", "unknown")
RHO_MODES = ("zero", "inv_d", "alpha")
JITTER = 1e-10


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str = "unknown"

    def __post_init__(self):
        if not self.enroll_id or not self.test_id:
            raise DataError("trial ids must be nonempty")
        if self.label not in LABELS:
            raise DataError(f"unknown trial label {self.label!r}")


def rho_policy(mode: str, d: int, alpha: float | None = None) -> float:
    """Covariance scale for scoring: ``0``, ``1/d`` or the learned ``alpha``."""
    if mode == "zero":
        return 0.0
    if mode == "inv_d":
        if d < 1:
            raise ConfigError("embedding dimension must be positive")
        return 1.0 / d
    if mode == "alpha":
        if alpha is None:
            raise ConfigError("rho mode 'alpha' needs a learned alpha (checkpoint or override)")
        if not (alpha > 0 and math.isfinite(alpha)):
            raise ConfigError(f"alpha must be positive and finite, got {alpha}")
        return float(alpha)
    raise ConfigError(f"unknown rho mode {mode!r}; expected one of {RHO_MODES}")


def uncertainty_norm(emb: ProjectedGaussian, rho: float) -> float:
    """``phi' (I + rho S)^-1 phi`` via elementwise or Cholesky solves."""
    phi = emb.mean
    if rho < 0:
        raise ConfigError("rho must be nonnegative")
    if rho == 0:
        return float(phi @ phi)
    if not emb.has_covariance:
        raise DataError("embedding has no covariance; only rho = 0 is allowed")
    if emb.diagonal:
        return float(np.sum(phi * phi / (1.0 + rho * emb.covariance)))
    mat = np.eye(emb.dim) + rho * emb.covariance
    try:
        factor = scipy.linalg.cho_factor(mat, lower=True)
    except np.linalg.LinAlgError:
        try:
            factor = scipy.linalg.cho_factor(mat + JITTER * np.eye(emb.dim), lower=True)
        except np.linalg.LinAlgError:
            raise NumericalError("I + rho*Sigma is not positive definite") from None
    return float(phi @ scipy.linalg.cho_solve(factor, phi))


def cosine_score(e1: ProjectedGaussian, e2: ProjectedGaussian, rho: float = 0.0) -> float:
    """Uncertainty-aware cosine similarity (plain cosine for ``rho = 0``)."""
    if e1.dim != e2.dim:
        raise DataError(f"embedding dimensions differ: {e1.dim} vs {e2.dim}")
    n1 = uncertainty_norm(e1, rho)
    n2 = uncertainty_norm(e2, rho)
    if n1 == 0 or n2 == 0:
        raise DataError("score is undefined for a zero embedding")
    return float(e1.mean @ e2.mean) / (math.sqrt(n1) * math.sqrt(n2))


def _split_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.dtype.kind in "US":
        is_tar = labels == "target"
        is_non = labels == "nontarget"
    else:
        is_tar = labels.astype(bool)
        is_non = ~is_tar
    tar, non = scores[is_tar], scores[is_non]
    if tar.size == 0 or non.size == 0:
        raise DataError("need at least one target and one nontarget score")
    return tar, non


def operating_points(tar, non):
    """Miss and false-alarm rates at every distinct decision threshold.

    A trial is accepted when ``score >= threshold``.  Thresholds are the
    sorted distinct scores followed by ``+inf``, so ``p_miss`` rises from 0
    to 1 while ``p_fa`` falls from 1 to 0.
    """
    tar = np.sort(np.asarray(tar, dtype=np.float64))
    non = np.sort(np.asarray(non, dtype=np.float64))
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    p_miss = np.searchsorted(tar, thresholds, side="left") / tar.size
    p_fa = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    return thresholds, p_miss, p_fa


def compute_eer(tar, non):
    """Equal error rate and the threshold of the operating point where it is reached.

    The FAR/FRR crossing is linearly interpolated between the two adjacent
    operating points that bracket it.
    """
    thresholds, p_miss, p_fa = operating_points(tar, non)
    gap = p_miss - p_fa
    k = int(np.argmax(gap >= 0))
    if gap[k] == 0 or k == 0:
        return float(p_miss[k]), float(thresholds[k])
    # segment (k-1, k) crosses the diagonal
    t = -gap[k - 1] / (gap[k] - gap[k - 1])
    eer = p_fa[k - 1] + t * (p_fa[k] - p_fa[k - 1])
    return float(eer), float(thresholds[k])


def eer(scores, labels) -> float:
    return compute_eer(*_split_scores(scores, labels))[0]


def compute_min_dcf(tar, non, p_target=0.01, c_miss=1.0, c_fa=1.0):
    """Normalized minimum detection cost and its threshold."""
    if not 0 < p_target < 1:
        raise ConfigError("p_target must lie in (0, 1)")
    thresholds, p_miss, p_fa = operating_points(tar, non)
    cost = c_miss * p_target * p_miss + c_fa * (1 - p_target) * p_fa
    cost /= min(c_miss * p_target, c_fa * (1 - p_target))
    k = int(np.argmin(cost))
    return float(cost[k]), float(thresholds[k])


def min_dcf(scores, labels, p_target=0.01, c_miss=1.0, c_fa=1.0) -> float:
    tar, non = _split_scores(scores, labels)
    return compute_min_dcf(tar, non, p_target, c_miss, c_fa)[0]


@dataclass
class ScoreReport:
    trials: list
    scores: np.ndarray
    rho: float
    eer: float
    min_dcf: float
    eer_threshold: float
    dcf_threshold: float
    p_target: float = 0.01
    meta: dict = field(default_factory=dict)

    def summary(self) -> str:
        return f"EER={self.eer!r},minDCF={self.min_dcf!r}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        header = {"rho": repr(self.rho), **self.meta}
        buf.write("# " + ",".join(f"{k}={v}" for k, v in header.items()) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["trial_index", "enroll_id", "test_id", "score", "label"])
        for i, (trial, score) in enumerate(zip(self.trials, self.scores)):
            writer.writerow([i, trial.enroll_id, trial.test_id, "%.17g" % score, trial.label])
        return buf.getvalue()


def score_trials(trials: Sequence[Trial], store: Mapping[str, ProjectedGaussian], rho: float) -> np.ndarray:
    """Scores in trial order; each embedding's quadratic form is computed once."""
    norms = {}
    for trial in trials:
        for key in (trial.enroll_id, trial.test_id):
            if key not in norms:
                if key not in store:
                    raise DataError(f"unknown embedding id {key!r}")
                value = uncertainty_norm(store[key], rho)
                if value == 0:
                    raise DataError(f"embedding {key!r} is zero; score undefined")
                norms[key] = math.sqrt(value)
    out = np.empty(len(trials))
    for i, trial in enumerate(trials):
        e1, e2 = store[trial.enroll_id], store[trial.test_id]
        if e1.dim != e2.dim:
            raise DataError(f"dimension mismatch in trial {i}")
        out[i] = float(e1.mean @ e2.mean) / (norms[trial.enroll_id] * norms[trial.test_id])
    return out


def evaluate(trials: Sequence[Trial], store: Mapping[str, ProjectedGaussian], rho: float,
             p_target: float = 0.01) -> ScoreReport:
    """Score every trial and compute EER / minDCF over the labeled ones."""
    trials = list(trials)
    scores = score_trials(trials, store, rho)
    labels = np.array([t.label for t in trials])
    if not np.any(labels != "unknown"):
        raise DataError("no labeled trials to compute metrics from")
    tar = scores[labels == "target"]
    non = scores[labels == "nontarget"]
    if tar.size == 0 or non.size == 0:
        raise DataError("metrics need at least one target and one nontarget trial")
    eer_value, eer_thr = compute_eer(tar, non)
    dcf_value, dcf_thr = compute_min_dcf(tar, non, p_target)
    return ScoreReport(trials, scores, rho, eer_value, dcf_value, eer_thr, dcf_thr, p_target)
