"""Evaluation statistics: AUC, TPR at a threshold, 2-D PCA, and a linear probe.

Scores are oriented so that larger means more watermark-like before they
reach :func:`auc`; distance-style statistics are negated upstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "ScoreSample",
    "auc",
    "tpr_at_threshold",
    "Pca2",
    "fit_pca2",
    "pca2",
    "LinearProbe",
    "fit_linear_probe",
]


@dataclass(frozen=True)
class ScoreSample:
    """One scored observation: positive label means watermark-bearing."""

    label: bool
    score: float
    group: str = ""

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")


def auc(samples: list[ScoreSample]) -> float:
    """Mann-Whitney AUC of positives over negatives, ties counted one half."""
    labels = np.array([s.label for s in samples], dtype=bool)
    scores = np.array([s.score for s in samples], dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks on ties
    u = float(ranks[labels].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def tpr_at_threshold(samples: list[ScoreSample], threshold: float, direction: str) -> float:
    """Fraction of positives on the detecting side of the threshold.

    ``direction`` is "above" (detect when score > threshold) or "below"
    (detect when score < threshold); comparisons are strict, matching the
    scheme detectors.  Returns 0.0 when there are no positives.
    """
    if direction not in ("above", "below"):
        raise ValueError("direction must be 'above' or 'below'")
    pos = [s.score for s in samples if s.label]
    if not pos:
        return 0.0
    pos = np.asarray(pos)
    hits = pos > threshold if direction == "above" else pos < threshold
    return float(np.mean(hits))


# ---------------------------------------------------------------------------
# PCA

_RANK_RTOL = 1e-12


@dataclass(frozen=True)
class Pca2:
    """Top-2 principal directions of a centered sample."""

    mean: np.ndarray  # (d,)
    components: np.ndarray  # (2, d), rows unit-norm, descending eigenvalue
    eigenvalues: np.ndarray  # (2,)
    total_variance: float

    def transform(self, latents: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        return (x - self.mean) @ self.components.T


def fit_pca2(latents: np.ndarray) -> Pca2:
    """Eigendecomposition of the sample covariance; errors if rank < 2.

    The sign convention makes the first nonzero loading of each component
    positive.  Rank is judged relative to the leading eigenvalue with
    tolerance 1e-12.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("need at least 3 latents")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    if eigvals[1] <= eigvals[0] * _RANK_RTOL:
        raise ValueError("covariance has fewer than 2 nonzero eigenvalues")

    components = eigvecs[:, :2].T.copy()
    for row in components:
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return Pca2(
        mean=mean,
        components=components,
        eigenvalues=eigvals[:2].copy(),
        total_variance=float(eigvals.sum()),
    )


def pca2(latents: np.ndarray) -> np.ndarray:
    """Centered top-2 projections of the input latents, shape (n, 2)."""
    return fit_pca2(latents).transform(latents)


# ---------------------------------------------------------------------------
# linear probe (Fisher discriminant on the 2-D projections)


@dataclass(frozen=True)
class LinearProbe:
    weights: np.ndarray  # (d,)
    bias: float

    def predict(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.weights + self.bias > 0

    def accuracy(self, points: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(points) == np.asarray(labels, dtype=bool)))


def fit_linear_probe(points: np.ndarray, labels: np.ndarray) -> LinearProbe:
    """Fisher linear discriminant with equal priors and a small ridge."""
    pts = np.asarray(points, dtype=np.float64)
    lab = np.asarray(labels, dtype=bool)
    if pts.ndim != 2 or lab.shape != (pts.shape[0],):
        raise ValueError("points must be (n, d) with one label per row")
    if lab.all() or not lab.any():
        raise ValueError("probe needs both classes")
    mu1 = pts[lab].mean(axis=0)
    mu0 = pts[~lab].mean(axis=0)
    centered = np.concatenate([pts[lab] - mu1, pts[~lab] - mu0])
    scatter = centered.T @ centered / max(pts.shape[0] - 2, 1)
    scatter += np.eye(pts.shape[1]) * (1e-9 * max(np.trace(scatter), 1e-12))
    w = np.linalg.solve(scatter, mu1 - mu0)
    b = -float(w @ (mu0 + mu1)) / 2.0
    return LinearProbe(weights=w, bias=b)
