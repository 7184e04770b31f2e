"""Anomaly scoring, AUC evaluation, and saliency localization.

Classifier scoring reads the augmented-class probability straight off
the score head. OOD scoring compares contrastive features against a
region prototype (centroid + regularized covariance of normal
features); every method is oriented so that larger means more
anomalous. Localization is gradient-weighted class activation mapping
against the last conv stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    EvaluationError,
    InsufficientDataError,
    NormalizationError,
)
from .model import ModelState, backward, forward

OOD_METHODS = ("cosine", "euclid", "mahalanobis", "gauss_density")
SCORE_METHODS = ("clf",) + OOD_METHODS


@dataclass(frozen=True)
class Prototype:
    """Centroid and regularized covariance of normal contrastive features."""

    mean: np.ndarray  # (d,)
    covariance: np.ndarray  # (d, d), positive definite after +eps*I
    eps: float
    count: int


@dataclass(frozen=True)
class ScoredTile:
    tile: str  # "z/x/y"
    score: float
    method: str
    truth: str | None = None  # "normal" | "anomalous" | None


def classifier_score(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Augmented-class probability s^1 for each input; shape (B,)."""
    return forward(state, x).s[:, 1].copy()


def embed(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Contrastive features z for each input; shape (B, z_dim)."""
    return forward(state, x).z.copy()


def fit_prototype(z: np.ndarray, eps_scale: float = 1e-6) -> Prototype:
    """Centroid + sample covariance of normal features, regularized.

    The regularizer is eps_scale * trace(cov) / d (floored so identical
    rows still yield an invertible covariance).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise InsufficientDataError("prototype needs at least 2 feature rows")
    mean = z.mean(axis=0)
    centered = z - mean
    cov = centered.T @ centered / (z.shape[0] - 1)
    d = z.shape[1]
    eps = max(eps_scale * float(np.trace(cov)) / d, 1e-12)
    return Prototype(mean=mean, covariance=cov + eps * np.eye(d), eps=eps, count=z.shape[0])


def ood_score(z: np.ndarray, proto: Prototype, method: str) -> np.ndarray:
    """Score feature rows against the prototype; larger = more anomalous.

    cosine: (1 - cos(z, mean)) / 2, in [0, 1] (and in [0, 0.5] for
    non-negative features); euclid: ||z - mean||; mahalanobis:
    sqrt((z-m)^T Sigma^-1 (z-m)); gauss_density: negative log density
    under N(mean, Sigma).
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    diff = z - proto.mean
    if method == "cosine":
        z_norm = np.linalg.norm(z, axis=1)
        m_norm = float(np.linalg.norm(proto.mean))
        if (z_norm == 0).any() or m_norm == 0:
            raise NormalizationError("cosine score undefined for zero-norm features")
        cos = (z @ proto.mean) / (z_norm * m_norm)
        return (1.0 - cos) / 2.0
    if method == "euclid":
        return np.linalg.norm(diff, axis=1)
    if method == "mahalanobis":
        solved = np.linalg.solve(proto.covariance, diff.T)
        return np.sqrt(np.einsum("ij,ji->i", diff, solved))
    if method == "gauss_density":
        d = z.shape[1]
        sign, logdet = np.linalg.slogdet(proto.covariance)
        if sign <= 0:
            raise ConfigError("prototype covariance is not positive definite")
        solved = np.linalg.solve(proto.covariance, diff.T)
        maha_sq = np.einsum("ij,ji->i", diff, solved)
        return 0.5 * (d * np.log(2.0 * np.pi) + logdet + maha_sq)
    raise ConfigError(f"unknown OOD method {method!r}")


def auc(scored: list[ScoredTile]) -> float:
    """Probability a random anomalous tile outranks a random normal one.

    Mann-Whitney U from average ranks; ties count half. Requires both
    classes present.
    """
    labeled = [s for s in scored if s.truth is not None]
    pos = np.array([s.score for s in labeled if s.truth == "anomalous"], dtype=np.float64)
    neg = np.array([s.score for s in labeled if s.truth == "normal"], dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise EvaluationError("AUC needs at least one normal and one anomalous tile")
    return auc_from_scores(pos, neg)


def auc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    scores = np.concatenate([pos, neg])
    ranks = _average_ranks(scores)
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # ranks are 1-based; tied values share the mean rank
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def localize(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Saliency map for the augmented-class score of one input.

    Channel weights are the spatial mean of d(s^1)/d(activations) at the
    last conv stage; the weighted activation sum is rectified, bilinearly
    upsampled to the input size, and max-normalized to [0, 1]. An
    all-zero map (nothing survives rectification) is returned as zeros.

    d(s^1)/dA equals s^1 (1 - s^1) times the logit-margin gradient for a
    two-way softmax, and the positive per-example factor cancels under
    max-normalization, so the map is computed from the margin gradient;
    this keeps it well-defined where s^1 saturates and the probability
    gradient underflows to zero.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ConfigError("localize operates on a single tile")
    fwd = forward(state, x)
    grad_logits = np.zeros_like(fwd.s)
    grad_logits[:, 0] = -1.0
    grad_logits[:, 1] = 1.0
    _, d_act = backward(state, fwd, grad_z=None, grad_s=None, grad_logits=grad_logits)
    weights = d_act.mean(axis=(2, 3))  # (1, C)
    cam = np.maximum((weights[:, :, None, None] * fwd.last_conv).sum(axis=1), 0.0)[0]
    out_size = x.shape[-1]
    cam = _bilinear_upsample(cam, out_size, out_size)
    peak = float(cam.max())
    if peak > 0:
        cam = cam / peak
    return cam.astype(np.float64)


def _bilinear_upsample(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize with edge clamping."""
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    top = a * (1 - wx) + b * wx
    bot = c * (1 - wx) + d * wx
    return top * (1 - wy) + bot * wy


@dataclass(frozen=True)
class HistogramReport:
    edges: np.ndarray  # (bins + 1,) over [0, 1]
    counts: np.ndarray  # (bins,)
    fractions: np.ndarray  # (bins,)
    threshold: float
    below_threshold_fraction: float


def health_histogram(
    scores: np.ndarray, bins: int, threshold: float = 0.6
) -> HistogramReport:
    """Fixed-width score histogram over [0, 1] for data-health reports."""
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size < 1:
        raise EvaluationError("histogram needs at least one score")
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(scores, bins=edges)
    fractions = counts / scores.size
    below = float((scores < threshold).sum() / scores.size)
    return HistogramReport(
        edges=edges,
        counts=counts,
        fractions=fractions,
        threshold=threshold,
        below_threshold_fraction=below,
    )
