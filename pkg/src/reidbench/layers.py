"""Hand-differentiated layers: linear, batch norm, L2 row normalization, ReLU.

Each forward returns (output, cache); the matching backward consumes the
cache and returns exact gradients. Caches are plain tuples and are only
valid for the forward call that produced them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .numerics import NORM_EPS, ensure_mat, row_norms


@dataclass
class LinearParams:
    weight: np.ndarray              # (out, in)
    bias: np.ndarray | None = None  # (1, out) or absent

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class BnParams:
    gamma: np.ndarray         # (1, d)
    beta: np.ndarray          # (1, d)
    running_mean: np.ndarray  # (1, d)
    running_var: np.ndarray   # (1, d)
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = 0

    @property
    def dim(self) -> int:
        return self.gamma.shape[1]


def init_bn(d: int, momentum: float = 0.1, eps: float = 1e-5) -> BnParams:
    return BnParams(
        gamma=np.ones((1, d)),
        beta=np.zeros((1, d)),
        running_mean=np.zeros((1, d)),
        running_var=np.ones((1, d)),
        momentum=momentum,
        eps=eps,
    )


def linear(x: np.ndarray, p: LinearParams):
    """y = x W^T (+ bias broadcast over rows)."""
    x = ensure_mat(x, "x")
    if x.shape[1] != p.in_dim:
        raise ShapeError(f"linear: input dim {x.shape[1]} != weight in dim {p.in_dim}")
    y = x @ p.weight.T
    if p.bias is not None:
        y = y + p.bias
    return y, (x, p)


def linear_backward(dy: np.ndarray, cache):
    x, p = cache
    dy = ensure_mat(dy, "dy")
    if dy.shape != (x.shape[0], p.out_dim):
        raise ShapeError(f"linear_backward: dy shape {dy.shape} != {(x.shape[0], p.out_dim)}")
    dx = dy @ p.weight
    dweight = dy.T @ x
    dbias = dy.sum(axis=0, keepdims=True) if p.bias is not None else None
    return dx, dweight, dbias


def batchnorm_train(x: np.ndarray, p: BnParams):
    """Standardize per column with batch statistics (biased variance).

    Running statistics are updated in place:
    running <- (1 - momentum) * running + momentum * batch.
    """
    x = ensure_mat(x, "x")
    n, d = x.shape
    if d != p.dim:
        raise ShapeError(f"batchnorm: input dim {d} != param dim {p.dim}")
    if n < 2:
        raise ShapeError(f"batchnorm_train needs a batch of >= 2 rows, got {n}")
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv_std
    y = p.gamma * xhat + p.beta
    p.running_mean[...] = (1.0 - p.momentum) * p.running_mean + p.momentum * mu
    p.running_var[...] = (1.0 - p.momentum) * p.running_var + p.momentum * var
    p.num_batches_tracked += 1
    return y, (xhat, xc, inv_std, p.gamma, n)


def batchnorm_eval(x: np.ndarray, p: BnParams) -> np.ndarray:
    """Affine map using the stored running statistics; no state mutation."""
    x = ensure_mat(x, "x")
    if x.shape[1] != p.dim:
        raise ShapeError(f"batchnorm: input dim {x.shape[1]} != param dim {p.dim}")
    return p.gamma * (x - p.running_mean) / np.sqrt(p.running_var + p.eps) + p.beta


def batchnorm_backward(dy: np.ndarray, cache):
    """Exact gradient through the batch-coupled statistics."""
    xhat, xc, inv_std, gamma, n = cache
    dy = ensure_mat(dy, "dy")
    if dy.shape != xhat.shape:
        raise ShapeError(f"batchnorm_backward: dy shape {dy.shape} != {xhat.shape}")
    dgamma = (dy * xhat).sum(axis=0, keepdims=True)
    dbeta = dy.sum(axis=0, keepdims=True)
    dxhat = dy * gamma
    dx = inv_std / n * (
        n * dxhat
        - dxhat.sum(axis=0, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=0, keepdims=True)
    )
    return dx, dgamma, dbeta


def l2_normalize(x: np.ndarray):
    """Scale each row to unit Euclidean norm."""
    x = ensure_mat(x, "x")
    norms = row_norms(x)
    if (norms < NORM_EPS).any():
        raise DegenerateInputError("l2_normalize: near-zero row norm")
    y = x / norms[:, None]
    return y, (y, norms)


def l2_normalize_backward(dy: np.ndarray, cache):
    """dx_i = (dy_i - <dy_i, y_i> y_i) / |x_i|: the radial component of the
    upstream gradient is projected out, so <dx_i, x_i> = 0."""
    y, norms = cache
    dy = ensure_mat(dy, "dy")
    if dy.shape != y.shape:
        raise ShapeError(f"l2_normalize_backward: dy shape {dy.shape} != {y.shape}")
    radial = (dy * y).sum(axis=1, keepdims=True)
    return (dy - radial * y) / norms[:, None]


def relu(x: np.ndarray):
    x = ensure_mat(x, "x")
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy: np.ndarray, cache):
    # subgradient at exactly 0 is 0
    mask = cache
    dy = ensure_mat(dy, "dy")
    if dy.shape != mask.shape:
        raise ShapeError(f"relu_backward: dy shape {dy.shape} != {mask.shape}")
    return np.where(mask, dy, 0.0)
