"""Measurable versions of the two metric-space inconsistencies.

``hardness_consistency`` asks whether batch-hard mining picks the same
positives/negatives under squared-Euclidean and cosine distance; on
L2-normalized inputs the two are monotonically related, so agreement is
exactly 1. ``grad_direction_report`` separates the per-sample gradients
contributed by the classification and triplet branches and measures how
the two branches interact geometrically.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .losses import CeConfig, TripletConfig, batch_hard_mine
from .numerics import ensure_mat, pairwise_cosine_sim, pairwise_sq_euclidean
from .pipeline import PipelineParams, feature_gradients, forward_loss


@dataclass
class ConsistencyReport:
    positive_agreement: float
    negative_agreement: float
    n_anchors: int


def hardness_consistency(features: np.ndarray, labels) -> ConsistencyReport:
    """Fraction of anchors whose mined hardest positive / hardest negative
    agree between squared-Euclidean and cosine distance."""
    features = ensure_mat(features, "features")
    d_sq = pairwise_sq_euclidean(features, features)
    d_cos = 1.0 - pairwise_cosine_sim(features, features)
    mined_sq = batch_hard_mine(d_sq, labels)
    mined_cos = batch_hard_mine(d_cos, labels)
    n = features.shape[0]
    return ConsistencyReport(
        positive_agreement=float((mined_sq.pos == mined_cos.pos).mean()),
        negative_agreement=float((mined_sq.neg == mined_cos.neg).mean()),
        n_anchors=n,
    )


@dataclass
class GradDirectionReport:
    """Geometry of the two loss branches at the backbone feature.

    mean_branch_cosine: mean over samples of cos(CE-branch grad,
    triplet-branch grad) at f_t, None when no sample has both branches
    active. radial_leakage: max over samples of the normalized radial
    component |<g, f_i>| / (|g| |f_i|) of the triplet-branch gradient at
    f_i; only defined for the variant whose triplet taps f_i (else None).
    """

    mean_branch_cosine: float | None
    radial_leakage: float | None
    n_samples: int


def grad_direction_report(
    x: np.ndarray,
    labels,
    params: PipelineParams,
    variant: str,
    triplet_cfg: TripletConfig | None = None,
    ce_cfg: CeConfig | None = None,
    ce_weight: float = 1.0,
    triplet_weight: float = 1.0,
) -> GradDirectionReport:
    # work on a copy: diagnostics must not touch running statistics
    params = copy.deepcopy(params)
    _, _, _, caches = forward_loss(x, labels, params, variant, triplet_cfg, ce_cfg)
    d_ft_ce, _ = feature_gradients(caches, ce_weight=ce_weight, triplet_weight=0.0)
    d_ft_tri, d_fi_tri = feature_gradients(caches, ce_weight=0.0, triplet_weight=triplet_weight)

    norms_ce = np.sqrt((d_ft_ce * d_ft_ce).sum(axis=1))
    norms_tri = np.sqrt((d_ft_tri * d_ft_tri).sum(axis=1))
    active = (norms_ce > 0) & (norms_tri > 0)
    if active.any():
        cosines = (d_ft_ce[active] * d_ft_tri[active]).sum(axis=1) / (
            norms_ce[active] * norms_tri[active]
        )
        mean_cosine = float(cosines.mean())
    else:
        mean_cosine = None

    leakage = None
    if d_fi_tri is not None:
        f_i = caches.f_i
        g_norms = np.sqrt((d_fi_tri * d_fi_tri).sum(axis=1))
        f_norms = np.sqrt((f_i * f_i).sum(axis=1))
        rows = (g_norms > 0) & (f_norms > 0)
        if rows.any():
            ratios = np.abs((d_fi_tri[rows] * f_i[rows]).sum(axis=1)) / (
                g_norms[rows] * f_norms[rows]
            )
            leakage = float(ratios.max())
        else:
            leakage = 0.0

    return GradDirectionReport(
        mean_branch_cosine=mean_cosine,
        radial_leakage=leakage,
        n_samples=x.shape[0],
    )
