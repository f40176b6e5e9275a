"""Adversarial (hinge) and metric-preservation losses.

Sign convention: every function returns a quantity to MINIMIZE. The
discriminator hinge is the negated critic objective, so a perfectly
separated batch scores 0.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .metric import MetricStats, pairwise_distances


def loss_d_hinge(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """mean relu(1 - d_real) + mean relu(1 + d_fake)."""
    return T.tmean(T.relu(1.0 - d_real)) + T.tmean(T.relu(1.0 + d_fake))


def loss_g_adv(d_fake: Tensor) -> Tensor:
    return -T.tmean(d_fake)


def metric_loss(src_vecs: np.ndarray, features: Tensor,
                stats_x: MetricStats, stats_y: MetricStats) -> Tensor:
    """Mean absolute difference of standardized pairwise distances.

    Differentiable w.r.t. the translated-batch features; the source batch
    is a constant.
    """
    n = len(src_vecs)
    if n != features.shape[0]:
        raise ValueError("source/feature batch size mismatch")
    if n < 2:
        raise ValueError("need a batch of at least 2")
    dx = (pairwise_distances(src_vecs) - stats_x.mu) / stats_x.sigma
    iu, ju = np.triu_indices(n, 1)
    diff = T.embed_rows(features, iu) - T.embed_rows(features, ju)
    dy = T.sqrt(T.tsum(diff ** 2.0, axis=1) + 1e-12)
    dy_std = (dy - stats_y.mu) * (1.0 / stats_y.sigma)
    return T.tmean(T.absolute(dy_std - Tensor(dx.astype(features.dtype))))


def loss_g_total(d1_fake: Tensor, d2_fake: Tensor | None,
                 metric_term: Tensor | None, lam: float,
                 use_aux: bool) -> Tensor:
    loss = loss_g_adv(d1_fake)
    if use_aux:
        loss = loss + loss_g_adv(d2_fake)
    if lam != 0.0 and metric_term is not None:
        loss = loss + lam * metric_term
    return loss


def loss_d_total(d1_real: Tensor, d1_fake: Tensor,
                 d2_real: Tensor | None, d2_fake: Tensor | None,
                 use_aux: bool) -> Tensor:
    loss = loss_d_hinge(d1_real, d1_fake)
    if use_aux:
        loss = loss + loss_d_hinge(d2_real, d2_fake)
    return loss
