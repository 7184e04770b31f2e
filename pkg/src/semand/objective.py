"""Self-supervision objective: classification, contrastive, and
inverse-focal components with closed-form gradients.

Conventions, for a minibatch of N normal / N augmented examples:

  L_BC  = -mean_i ln s_n[i,0] - mean_i ln s_a[i,1]
  L_IF  = -mean_i e^(g*s_n[i,0]) ln s_n[i,0] - mean_i e^(g*s_a[i,1]) ln s_a[i,1]
  L_CL  = (1/N) sum_i (1/2N) sum_{j != i} (l_ij + lt_ij)

with l_ij = -ln[ exp(c_ij/t) / (exp(c_ij/t) + sum_k exp(ct_ik/t)) ],
c_ij the cosine between normal features i and j, ct_ik the cosine
between normal feature i and augmented feature k, and lt_ij the same
with the two feature sets swapped. Note the denominator's sum runs over
all N cross-set pairs including k = i, and the 1/2N inner constant is
kept verbatim (it is not a per-pair mean).

The total is the weight-normalized combination
  L = (w_bc*L_BC + w_cl*L_CL + w_if*L_IF) / (w_bc + w_cl + w_if).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NormalizationError

# Probabilities are clamped away from zero inside logarithms.
EPS = 1e-12
# Contrastive exponents are stabilized by subtracting the per-row max
# before exponentiation (mathematically a no-op).


@dataclass
class BatchFeatures:
    """Network outputs for a batch of N normal/augmented pairs."""

    z_normal: np.ndarray  # (N, d) contrastive features, non-negative
    z_aug: np.ndarray  # (N, d)
    s_normal: np.ndarray  # (N, 2) softmax rows
    s_aug: np.ndarray  # (N, 2)
    tau: float = 0.5
    gamma: float = 1.0
    w_bc: float = 1.0
    w_cl: float = 1.0
    w_if: float = 1.5

    def __post_init__(self) -> None:
        self.z_normal = np.asarray(self.z_normal, dtype=np.float64)
        self.z_aug = np.asarray(self.z_aug, dtype=np.float64)
        self.s_normal = np.asarray(self.s_normal, dtype=np.float64)
        self.s_aug = np.asarray(self.s_aug, dtype=np.float64)
        n = self.z_normal.shape[0]
        if n < 1:
            raise DataError("batch must contain at least one pair")
        if self.z_aug.shape != self.z_normal.shape:
            raise DataError("z_normal and z_aug shapes differ")
        if self.s_normal.shape != (n, 2) or self.s_aug.shape != (n, 2):
            raise DataError("score arrays must be (N, 2)")
        for s in (self.s_normal, self.s_aug):
            if np.abs(s.sum(axis=1) - 1.0).max() > 1e-6:
                raise DataError("softmax rows must sum to 1")
            if (s < 0).any() or (s > 1).any():
                raise DataError("softmax entries must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def n(self) -> int:
        return self.z_normal.shape[0]


@dataclass
class LossReport:
    l_bc: float
    l_cl: float
    l_if: float
    l_total: float
    grad_z_normal: np.ndarray
    grad_z_aug: np.ndarray
    grad_s_normal: np.ndarray
    grad_s_aug: np.ndarray
    clamped: bool = False


def _log_terms(s: np.ndarray, col: int) -> tuple[np.ndarray, np.ndarray, bool]:
    """ln of one softmax column with clamping; returns (log, dlog/ds, clamped)."""
    vals = s[:, col]
    clamped = bool((vals < EPS).any())
    safe = np.maximum(vals, EPS)
    logs = np.log(safe)
    # Gradient of ln(max(s, EPS)): zero on the clamped flat.
    grads = np.where(vals >= EPS, 1.0 / safe, 0.0)
    return logs, grads, clamped


def loss_bc(batch: BatchFeatures) -> tuple[float, np.ndarray, np.ndarray, bool]:
    """Binary cross-entropy: normals to class 0, augmented to class 1.

    Returns (value, grad wrt s_normal, grad wrt s_aug, clamped flag).
    """
    n = batch.n
    log_n, dlog_n, c1 = _log_terms(batch.s_normal, 0)
    log_a, dlog_a, c2 = _log_terms(batch.s_aug, 1)
    value = -log_n.mean() - log_a.mean()
    g_n = np.zeros_like(batch.s_normal)
    g_a = np.zeros_like(batch.s_aug)
    g_n[:, 0] = -dlog_n / n
    g_a[:, 1] = -dlog_a / n
    return float(value), g_n, g_a, c1 or c2


def loss_if(batch: BatchFeatures) -> tuple[float, np.ndarray, np.ndarray, bool]:
    """Inverse focal loss: cross-entropy with e^(gamma*s) weighting.

    The exponential weight grows with the predicted probability of the
    correct class, penalizing confident-but-borderline predictions
    relative to plain cross-entropy.
    """
    n = batch.n
    gamma = batch.gamma
    value = 0.0
    grads = []
    clamped = False
    for s, col in ((batch.s_normal, 0), (batch.s_aug, 1)):
        logs, dlogs, c = _log_terms(s, col)
        clamped = clamped or c
        w = np.exp(gamma * s[:, col])
        value += -(w * logs).mean()
        g = np.zeros_like(s)
        g[:, col] = -(gamma * w * logs + w * dlogs) / n
        grads.append(g)
    return float(value), grads[0], grads[1], clamped


def _cosine_block(z_a: np.ndarray, z_b: np.ndarray, tau: float) -> np.ndarray:
    na = np.linalg.norm(z_a, axis=1)
    nb = np.linalg.norm(z_b, axis=1)
    return (z_a @ z_b.T) / (tau * np.outer(na, nb))


def loss_cl(batch: BatchFeatures) -> tuple[float, np.ndarray, np.ndarray]:
    """Contrastive component over temperature-scaled cosine similarities.

    Same-set pairs are positives, cross-set pairs negatives; the batch
    of N pairs contributes N(N-1) ordered anchor/positive pairs per
    direction. Returns (value, grad wrt z_normal, grad wrt z_aug).
    """
    n, _ = batch.z_normal.shape
    if (np.linalg.norm(batch.z_normal, axis=1) == 0).any() or (
        np.linalg.norm(batch.z_aug, axis=1) == 0
    ).any():
        raise NormalizationError("contrastive features must have nonzero norm")
    if n == 1:
        return 0.0, np.zeros_like(batch.z_normal), np.zeros_like(batch.z_aug)
    tau = batch.tau

    zn_hat = batch.z_normal / np.linalg.norm(batch.z_normal, axis=1, keepdims=True)
    za_hat = batch.z_aug / np.linalg.norm(batch.z_aug, axis=1, keepdims=True)

    scale = 1.0 / (2.0 * n * n)  # (1/N) * (1/2N) applied to each pair term

    value = 0.0
    # dL/d(cosine/tau) for each ordered pair usage.
    g_nn = np.zeros((n, n))
    g_na = np.zeros((n, n))
    g_aa = np.zeros((n, n))
    g_an = np.zeros((n, n))

    for anchors, partners, g_same, g_cross in (
        (zn_hat, za_hat, g_nn, g_na),
        (za_hat, zn_hat, g_aa, g_an),
    ):
        sim_same = (anchors @ anchors.T) / tau  # c_ij / tau
        sim_cross = (anchors @ partners.T) / tau  # ct_ik / tau
        for i in range(n):
            row_same = sim_same[i]
            row_cross = sim_cross[i]
            m = max(row_same.max(), row_cross.max())
            e_same = np.exp(row_same - m)
            e_cross = np.exp(row_cross - m)
            denom_neg = e_cross.sum()
            for j in range(n):
                if j == i:
                    continue
                denom = e_same[j] + denom_neg
                # l_ij = -ln(e_same[j] / denom)
                value += scale * (np.log(denom) - (row_same[j] - m))
                p_pos = e_same[j] / denom
                g_same[i, j] += scale * (p_pos - 1.0)
                g_cross[i] += scale * (e_cross / denom)

    # Chain rule through cosine and the feature normalization.
    def grad_wrt_unit(g_pair_anchor_rows, partners_hat):
        # d/d anchor_hat of sum_ij g[i,j] * anchor_hat[i].partner_hat[j] / tau
        return (g_pair_anchor_rows @ partners_hat) / tau

    d_zn_hat = (
        grad_wrt_unit(g_nn, zn_hat)
        + grad_wrt_unit(g_nn.T, zn_hat)  # partner role in same-set pairs
        + grad_wrt_unit(g_na, za_hat)
        + grad_wrt_unit(g_an.T, za_hat)  # partner role in cross pairs
    )
    d_za_hat = (
        grad_wrt_unit(g_aa, za_hat)
        + grad_wrt_unit(g_aa.T, za_hat)
        + grad_wrt_unit(g_an, zn_hat)
        + grad_wrt_unit(g_na.T, zn_hat)
    )

    def through_normalization(z, z_hat, d_hat):
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        radial = (d_hat * z_hat).sum(axis=1, keepdims=True)
        return (d_hat - radial * z_hat) / norms

    g_zn = through_normalization(batch.z_normal, zn_hat, d_zn_hat)
    g_za = through_normalization(batch.z_aug, za_hat, d_za_hat)
    return float(value), g_zn, g_za


def loss_total(batch: BatchFeatures) -> LossReport:
    """Weight-normalized combination of the three components.

    A component with zero weight is skipped entirely (reported as 0 and
    contributing no gradient), which is what single-component ablation
    runs rely on.
    """
    if batch.w_bc < 0 or batch.w_cl < 0 or batch.w_if < 0:
        raise ConfigError("loss weights must be non-negative")
    w_sum = batch.w_bc + batch.w_cl + batch.w_if
    if w_sum <= 0:
        raise ConfigError("loss weights must sum to a positive value")
    v_bc, v_cl, v_if = 0.0, 0.0, 0.0
    gs_n = np.zeros_like(batch.s_normal)
    gs_a = np.zeros_like(batch.s_aug)
    gz_n = np.zeros_like(batch.z_normal)
    gz_a = np.zeros_like(batch.z_aug)
    clamped = False
    if batch.w_bc > 0:
        v_bc, g_n, g_a, c = loss_bc(batch)
        gs_n += (batch.w_bc / w_sum) * g_n
        gs_a += (batch.w_bc / w_sum) * g_a
        clamped = clamped or c
    if batch.w_if > 0:
        v_if, g_n, g_a, c = loss_if(batch)
        gs_n += (batch.w_if / w_sum) * g_n
        gs_a += (batch.w_if / w_sum) * g_a
        clamped = clamped or c
    if batch.w_cl > 0:
        v_cl, g_n, g_a = loss_cl(batch)
        gz_n += (batch.w_cl / w_sum) * g_n
        gz_a += (batch.w_cl / w_sum) * g_a
    total = (batch.w_bc * v_bc + batch.w_cl * v_cl + batch.w_if * v_if) / w_sum
    return LossReport(
        l_bc=v_bc,
        l_cl=v_cl,
        l_if=v_if,
        l_total=float(total),
        grad_z_normal=gz_n,
        grad_z_aug=gz_a,
        grad_s_normal=gs_n,
        grad_s_aug=gs_a,
        clamped=clamped,
    )
