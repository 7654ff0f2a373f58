"""Identity classification and batch-hard triplet losses with exact gradients.

The triplet loss mines, per anchor, the farthest same-identity sample and
the nearest different-identity sample inside the batch, then applies a
hinge (or softplus) on the mined distance gap. Gradients treat the mined
indices as fixed, i.e. they are subgradients of the piecewise-smooth loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchCompositionError, DegenerateInputError, LabelError, ParameterError, ShapeError
from .numerics import NORM_EPS, ensure_mat, pairwise_cosine_sim, pairwise_sq_euclidean, row_norms

METRICS = ("euclidean", "sq_euclidean", "cosine_distance")

# floor applied inside sqrt for the rooted metric, keeps the gradient finite
EUCLID_FLOOR = 1e-12


@dataclass
class TripletConfig:
    margin: float = 0.3
    metric: str = "euclidean"
    soft_margin: bool = False

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ParameterError(f"unknown triplet metric {self.metric!r}, want one of {METRICS}")
        if self.margin < 0:
            raise ParameterError(f"margin must be >= 0, got {self.margin}")


@dataclass
class CeConfig:
    label_smoothing: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ParameterError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


@dataclass
class TripletIndices:
    """Per-anchor hardest positive and hardest negative row indices."""
    pos: np.ndarray  # (n,)
    neg: np.ndarray  # (n,)


def softmax_cross_entropy(logits: np.ndarray, labels, cfg: CeConfig | None = None):
    """Mean cross-entropy against (optionally smoothed) one-hot targets.

    Returns (loss, dlogits). Targets: (1 - eps) extra mass on the true
    class plus eps/C spread over all classes. Stabilized by row-max
    subtraction; dlogits = (softmax - target) / n.
    """
    cfg = cfg or CeConfig()
    logits = ensure_mat(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if n < 1:
        raise ShapeError("need at least one row")
    if (labels < 0).any() or (labels >= c).any():
        raise LabelError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    eps = cfg.label_smoothing
    q = np.full((n, c), eps / c)
    q[np.arange(n), labels] += 1.0 - eps
    loss = float(-(q * log_p).sum() / n)
    dlogits = (np.exp(log_p) - q) / n
    return loss, dlogits


def _distance_matrix(features: np.ndarray, metric: str) -> np.ndarray:
    if metric == "sq_euclidean":
        return pairwise_sq_euclidean(features, features)
    if metric == "euclidean":
        d2 = pairwise_sq_euclidean(features, features)
        return np.sqrt(np.maximum(d2, EUCLID_FLOOR))
    if metric == "cosine_distance":
        return 1.0 - pairwise_cosine_sim(features, features)
    raise ParameterError(f"unknown metric {metric!r}")


def batch_hard_mine(dist: np.ndarray, labels) -> TripletIndices:
    """Hardest positive (max same-label distance, excluding self) and
    hardest negative (min different-label distance) per anchor.

    Ties resolve to the lowest index. Raises BatchCompositionError when an
    anchor has no positive or no negative in the batch.
    """
    dist = ensure_mat(dist, "dist")
    labels = np.asarray(labels, dtype=np.int64)
    n = dist.shape[0]
    if dist.shape != (n, n) or labels.shape != (n,):
        raise ShapeError(f"dist {dist.shape} and labels {labels.shape} must be (n, n) and (n,)")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        bad = int(np.flatnonzero(~pos_mask.any(axis=1))[0])
        raise BatchCompositionError(f"anchor {bad} has no positive in the batch")
    if not neg_mask.any(axis=1).all():
        bad = int(np.flatnonzero(~neg_mask.any(axis=1))[0])
        raise BatchCompositionError(f"anchor {bad} has no negative in the batch")
    # np.argmax/argmin return the first extremum, i.e. the lowest index
    pos = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    neg = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    return TripletIndices(pos=pos, neg=neg)


def _pair_dist_and_grads(features, a, b, metric):
    """Distance d(f_a, f_b) per metric plus gradients w.r.t. both rows."""
    fa = features[a]
    fb = features[b]
    diff = fa - fb
    if metric == "sq_euclidean":
        d = float(diff @ diff)
        return d, 2.0 * diff, -2.0 * diff
    if metric == "euclidean":
        d2 = float(diff @ diff)
        d = float(np.sqrt(max(d2, EUCLID_FLOOR)))
        if d2 <= EUCLID_FLOOR:
            zero = np.zeros_like(diff)
            return d, zero, zero.copy()
        return d, diff / d, -diff / d
    # cosine_distance
    na = float(np.sqrt(fa @ fa))
    nb = float(np.sqrt(fb @ fb))
    cos = float(fa @ fb) / (na * nb)
    ga = -(fb / (na * nb) - cos * fa / (na * na))
    gb = -(fa / (na * nb) - cos * fb / (nb * nb))
    return 1.0 - cos, ga, gb


def batch_hard_triplet_loss(features: np.ndarray, labels, cfg: TripletConfig):
    """Batch-hard triplet loss and its gradient w.r.t. the features.

    loss = mean_a hinge(d(a, hardest_pos) - d(a, hardest_neg) + margin),
    softplus of the same gap when cfg.soft_margin. Returns (loss, dfeatures).
    """
    features = ensure_mat(features, "features")
    if cfg.metric == "cosine_distance" and (row_norms(features) < NORM_EPS).any():
        raise DegenerateInputError("cosine triplet loss undefined for near-zero feature rows")
    dist = _distance_matrix(features, cfg.metric)
    mined = batch_hard_mine(dist, labels)
    n = features.shape[0]
    dfeatures = np.zeros_like(features)
    total = 0.0
    for a in range(n):
        p = int(mined.pos[a])
        ng = int(mined.neg[a])
        d_ap, g_ap_a, g_ap_p = _pair_dist_and_grads(features, a, p, cfg.metric)
        d_an, g_an_a, g_an_n = _pair_dist_and_grads(features, a, ng, cfg.metric)
        gap = d_ap - d_an + (0.0 if cfg.soft_margin else cfg.margin)
        if cfg.soft_margin:
            total += float(np.logaddexp(0.0, gap))
            scale = float(1.0 / (1.0 + np.exp(-gap))) / n
        else:
            if gap <= 0.0:
                continue
            total += gap
            scale = 1.0 / n
        dfeatures[a] += scale * (g_ap_a - g_an_a)
        dfeatures[p] += scale * g_ap_p
        dfeatures[ng] -= scale * g_an_n
    return total / n, dfeatures
