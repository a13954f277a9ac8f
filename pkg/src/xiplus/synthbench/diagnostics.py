"""Checks that predicted uncertainty tracks the injected noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import DataError
from .data import Split
from .train import embed_split


@dataclass
class DiagnosticsReport:
    ids: list
    predicted_variance: np.ndarray
    true_variance: np.ndarray
    spearman: float | None  # None when either side is constant
    frame_precision_by_sigma: dict

    @property
    def n(self) -> int:
        return len(self.ids)

    def summary(self) -> str:
        value = "nan" if self.spearman is None else repr(self.spearman)
        return f"spearman={value},n={self.n}"


def spearman(x, y) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.spearmanr(x, y).statistic)


def uncertainty_diagnostics(model, split: Split, shuffle_truth: bool = False, rng=None) -> DiagnosticsReport:
    """Rank correlation between mean predicted embedding variance and true noise variance.

    Also averages the per-frame precision (over dimensions and frames) for
    each distinct injected frame noise level.
    """
    if split.frame_sigmas is None:
        raise DataError("ground-truth noise levels are required")
    _, cov = embed_split(model, split)
    var = np.diagonal(cov, axis1=-2, axis2=-1) if cov.ndim == 3 else cov
    predicted = var.mean(axis=1)
    truth = split.true_variance.copy()
    if shuffle_truth:
        rng = np.random.default_rng(0) if rng is None else rng
        truth = rng.permutation(truth)
    frame_prec = model.frame_precisions(split.frames).mean(axis=-1)
    by_sigma = {float(s): float(frame_prec[split.frame_sigmas == s].mean())
                for s in np.unique(split.frame_sigmas)}
    return DiagnosticsReport(list(split.ids), predicted, truth, spearman(predicted, truth), by_sigma)
