"""Contrastive losses over mined pairs and their exact gradients.

The central objects are the per-anchor reliability score (softmax mass on
the matched column), the reliability-weighted contrastive loss whose
weighting factor is a constant during differentiation, the batch scaling
factor alpha that restores the loss magnitude lost to the weighting, and
the queue loss over cross-video negatives. A kept-gradient variant and a
focal-loss baseline exist purely for comparison; neither is used by
training defaults.

Gradient conventions: per-anchor similarity-space gradients are returned
unscaled, batch assembly multiplies in alpha / m (or 1 / m for the plain
baselines). The embedding-space conversion is s_ij = x_i . y_j, so
dL/dX = Y @ (dL/dS)^T and dL/dY = X @ (dL/dS).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AssociationMatrix, FeatureMatrix, Modulation, ShapeMismatchError

RELIABILITY_FLOOR = 1e-300
ALPHA_DENOMINATOR_FLOOR = 1e-30


@dataclass(frozen=True)
class ReliabilityReport:
    """Per-anchor reliability of the mined matches for one frame pair.

    similarities: (m, n) raw dot products between anchors and candidates.
    softmax: (m, n) row-wise softmax of similarities / tau.
    matched_col: (m,) column index each anchor was matched to.
    reliability: (m,) softmax mass on the matched column, in (0, 1].
    """

    similarities: np.ndarray
    softmax: np.ndarray
    matched_col: np.ndarray
    reliability: np.ndarray
    tau: float

    @property
    def num_anchors(self) -> int:
        return self.reliability.shape[0]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def reliability_from_similarities(similarities: np.ndarray, matched_col: np.ndarray,
                                  tau: float) -> ReliabilityReport:
    """Reliability report from a raw similarity matrix and matched columns."""
    similarities = np.asarray(similarities, dtype=np.float64)
    matched_col = np.asarray(matched_col, dtype=np.int64)
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if similarities.ndim != 2 or matched_col.shape != (similarities.shape[0],):
        raise ShapeMismatchError("similarities must be (m, n) with one matched column per row")
    sigma = softmax_rows(similarities / tau)
    p = sigma[np.arange(similarities.shape[0]), matched_col]
    return ReliabilityReport(
        similarities=similarities,
        softmax=sigma,
        matched_col=matched_col,
        reliability=np.clip(p, RELIABILITY_FLOOR, 1.0),
        tau=float(tau),
    )


def reliability(x: FeatureMatrix, y: FeatureMatrix, assoc: AssociationMatrix,
                tau: float) -> ReliabilityReport:
    """Reliability of each mined pair: softmax probability that the anchor
    aligns with its matched candidate among all candidates.

    Computed as sum_j pi_ij * sigma_ij; each row has exactly one match so
    this equals the matched column's softmax value.
    """
    if assoc.shape != (x.num_columns, y.num_columns):
        raise ShapeMismatchError(
            f"association shape {assoc.shape} does not fit "
            f"({x.num_columns}, {y.num_columns})"
        )
    similarities = x.data.T @ y.data
    report = reliability_from_similarities(similarities, assoc.matched_columns(), tau)
    # General-sum form of the score; identical to the matched-column value.
    general = (assoc.entries * report.softmax).sum(axis=1)
    assert np.allclose(general, report.reliability, atol=1e-12)
    return report


def _log_reliability(p: np.ndarray) -> np.ndarray:
    return np.log(np.clip(p, RELIABILITY_FLOOR, 1.0))


def rc_loss(report: ReliabilityReport, gamma: float) -> np.ndarray:
    """Per-anchor reliability-weighted contrastive loss -p^gamma * log p.

    The weighting factor p^gamma is treated as a constant during
    differentiation (see ``grad_wrt_reliability`` and
    ``grad_wrt_similarities``); only its value enters here.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    p = report.reliability
    return -np.power(p, gamma) * _log_reliability(p)


def rc_loss_kept_gradient(report: ReliabilityReport, gamma: float) -> np.ndarray:
    """Same values as ``rc_loss`` but with gradient flowing through p^gamma.

    Exists only so the property suite can demonstrate the interior
    zero-gradient point at p = e^(-1/gamma) that makes this variant
    unusable for training.
    """
    return rc_loss(report, gamma)


def focal_loss(report: ReliabilityReport, gamma: float) -> np.ndarray:
    """Per-anchor focal baseline -(1-p)^gamma * log p, gradient kept."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    p = report.reliability
    return -np.power(1.0 - p, gamma) * _log_reliability(p)


def per_anchor_loss(report: ReliabilityReport, gamma: float, modulation: Modulation) -> np.ndarray:
    if modulation in (Modulation.RELIABILITY_STOPGRAD, Modulation.RELIABILITY_KEPT):
        return rc_loss(report, gamma)
    if modulation is Modulation.FOCAL:
        return focal_loss(report, gamma)
    if modulation is Modulation.NONE:
        return rc_loss(report, 0.0)
    raise ValueError(f"unknown modulation {modulation!r}")


def rc_batch_loss(per_anchor_at_gamma: np.ndarray,
                  per_anchor_at_gamma_zero: np.ndarray) -> tuple[float, float]:
    """Scale the mini-batch mean back up to its unweighted size.

    Returns (alpha / m * sum(losses), alpha) where alpha is the ratio of
    the unweighted loss sum to the weighted one. Both sums are constants
    during differentiation. When all reliabilities are 1 the denominator
    vanishes and alpha is defined as 1 (the loss is 0 anyway).
    """
    per_anchor_at_gamma = np.asarray(per_anchor_at_gamma, dtype=np.float64)
    per_anchor_at_gamma_zero = np.asarray(per_anchor_at_gamma_zero, dtype=np.float64)
    if per_anchor_at_gamma.shape != per_anchor_at_gamma_zero.shape:
        raise ShapeMismatchError("per-anchor loss arrays must share a shape")
    m = per_anchor_at_gamma.shape[0]
    if m < 1:
        raise ValueError("batch must contain at least one anchor")
    denominator = float(per_anchor_at_gamma.sum())
    numerator = float(per_anchor_at_gamma_zero.sum())
    alpha = 1.0 if abs(denominator) < ALPHA_DENOMINATOR_FLOOR else numerator / denominator
    return alpha / m * denominator, alpha


def grad_wrt_reliability(p: np.ndarray, gamma: float, modulation: Modulation) -> np.ndarray:
    """dL/dp of the per-anchor loss under the given modulation mode.

    stopgrad:  -p^gamma / p            (magnitude p^(gamma-1))
    kept:      -p^(gamma-1) * (gamma * log p + 1)
    focal:     gamma * (1-p)^(gamma-1) * log p - (1-p)^gamma / p
    none:      -1 / p
    """
    p = np.clip(np.asarray(p, dtype=np.float64), RELIABILITY_FLOOR, 1.0)
    if modulation is Modulation.RELIABILITY_STOPGRAD:
        return -np.power(p, gamma) / p
    if modulation is Modulation.RELIABILITY_KEPT:
        return -np.power(p, gamma) / p * (gamma * np.log(p) + 1.0)
    if modulation is Modulation.FOCAL:
        if gamma == 0.0:
            return -1.0 / p
        return gamma * np.power(1.0 - p, gamma - 1.0) * np.log(p) - np.power(1.0 - p, gamma) / p
    if modulation is Modulation.NONE:
        return -1.0 / p
    raise ValueError(f"unknown modulation {modulation!r}")


def grad_wrt_similarities(report: ReliabilityReport, gamma: float,
                          modulation: Modulation) -> np.ndarray:
    """Per-anchor gradient dL_i/ds_ij of the modulated loss, shape (m, n).

    Chains dL/dp through dp/ds_j = p * (1[j = matched] - sigma_j) / tau.
    For the stop-gradient mode this reduces to the closed form
    p^gamma * (sigma_j - 1[j = matched]) / tau.
    """
    m, n = report.softmax.shape
    delta = np.zeros((m, n))
    delta[np.arange(m), report.matched_col] = 1.0
    dp_ds = report.reliability[:, None] * (delta - report.softmax) / report.tau
    dl_dp = grad_wrt_reliability(report.reliability, gamma, modulation)
    return dl_dp[:, None] * dp_ds


@dataclass(frozen=True)
class QueueLossResult:
    """Queue loss over per-anchor negative sets.

    value: batch mean over anchors (anchors with no negatives contribute 0).
    per_anchor: (m,) per-anchor mean softplus of similarities.
    grad_anchors: (d, m) gradient of ``value`` w.r.t. each anchor embedding.
    missing: (m,) flags anchors that had no eligible negatives.
    """

    value: float
    per_anchor: np.ndarray
    grad_anchors: np.ndarray
    missing: np.ndarray


def _softplus(s: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, s)


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def queue_loss(anchors: np.ndarray, negatives: list[np.ndarray]) -> QueueLossResult:
    """Mean softplus similarity between each anchor and its negatives.

    anchors: (d, m) unit columns; negatives: list of (d, k_i) arrays, one
    per anchor (k_i may be zero). Gradients flow into anchors only; the
    negatives are stored constants. Per-anchor gradient w.r.t. a
    similarity s_j is sigmoid(s_j) / k_i.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    d, m = anchors.shape
    if len(negatives) != m:
        raise ShapeMismatchError(f"expected {m} negative sets, got {len(negatives)}")
    per_anchor = np.zeros(m)
    grads = np.zeros((d, m))
    missing = np.zeros(m, dtype=bool)
    for i, negs in enumerate(negatives):
        negs = np.asarray(negs, dtype=np.float64)
        if negs.size == 0:
            missing[i] = True
            continue
        if negs.shape[0] != d:
            raise ShapeMismatchError(f"negative set {i} has dim {negs.shape[0]}, expected {d}")
        sims = negs.T @ anchors[:, i]
        k = sims.shape[0]
        per_anchor[i] = float(_softplus(sims).mean())
        grads[:, i] = negs @ (_sigmoid(sims) / k)
    value = float(per_anchor.mean()) if m else 0.0
    if m:
        grads /= m
    return QueueLossResult(value=value, per_anchor=per_anchor, grad_anchors=grads, missing=missing)


def total_loss(rc_value: float, queue_value: float, lam: float) -> float:
    """Weighted sum of the contrastive and queue terms."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return float(rc_value) + lam * float(queue_value)
