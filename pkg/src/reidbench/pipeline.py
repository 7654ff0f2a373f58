"""The two training heads over a small MLP backbone, and the shared
inference feature.

Both variants share parameters and the classification path
(backbone -> f_t -> batchnorm -> f_i -> bias-free classifier -> CE).
They differ only in where the triplet loss taps in:

* ``strong``:   triplet on the raw backbone feature f_t (Euclidean metric).
* ``stronger``: triplet on the L2-normalized post-batchnorm feature f_i
  (cosine metric), so both losses optimize the same angular geometry.

Inference uses f_i computed with the frozen running statistics for either
variant.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError, StateError
from .layers import (
    BnParams,
    LinearParams,
    batchnorm_backward,
    batchnorm_eval,
    batchnorm_train,
    init_bn,
    l2_normalize,
    l2_normalize_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
)
from .losses import CeConfig, TripletConfig, batch_hard_triplet_loss, softmax_cross_entropy
from .numerics import Rng, ensure_mat, kaiming_init

VARIANTS = ("strong", "stronger")

CHECKPOINT_FORMAT = "reidbench-checkpoint"
CHECKPOINT_VERSION = 1


def default_triplet_config(variant: str) -> TripletConfig:
    if variant == "strong":
        return TripletConfig(margin=0.3, metric="euclidean")
    return TripletConfig(margin=0.3, metric="cosine_distance")


@dataclass
class HeadParams:
    bn: BnParams
    classifier: LinearParams  # bias-free, (num_classes, d_t)


@dataclass
class PipelineParams:
    backbone: list[LinearParams]
    head: HeadParams

    @property
    def in_dim(self) -> int:
        return self.backbone[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.backbone[-1].out_dim

    @property
    def num_classes(self) -> int:
        return self.head.classifier.out_dim


@dataclass
class PipelineGrads:
    backbone: list[tuple[np.ndarray, np.ndarray | None]]  # (dweight, dbias)
    dgamma: np.ndarray
    dbeta: np.ndarray
    dclassifier: np.ndarray


@dataclass
class ForwardCaches:
    """Intermediates of one forward_loss call, reused by its backward."""
    variant: str
    backbone: list          # per-layer (linear cache, relu mask | None)
    bn: tuple
    f_i: np.ndarray
    l2: tuple | None        # stronger only
    classifier: tuple
    dlogits: np.ndarray     # gradient of the CE term at the logits
    d_triplet_feat: np.ndarray  # gradient of the triplet term at its input feature


def init_pipeline(
    in_dim: int,
    hidden_dims: tuple[int, ...],
    num_classes: int,
    rng: Rng,
    bn_momentum: float = 0.1,
    bn_eps: float = 1e-5,
) -> PipelineParams:
    """Kaiming-initialized weights, zero biases, fresh identity batchnorm."""
    if len(hidden_dims) < 1:
        raise ParameterError("backbone needs at least one layer")
    dims = (in_dim, *hidden_dims)
    backbone = []
    for a, b in zip(dims[:-1], dims[1:]):
        backbone.append(LinearParams(weight=kaiming_init(a, b, a, rng), bias=np.zeros((1, b))))
    d_t = dims[-1]
    classifier = LinearParams(weight=kaiming_init(d_t, num_classes, d_t, rng), bias=None)
    return PipelineParams(
        backbone=backbone,
        head=HeadParams(bn=init_bn(d_t, bn_momentum, bn_eps), classifier=classifier),
    )


def backbone_forward(x: np.ndarray, params: PipelineParams):
    h = ensure_mat(x, "x")
    caches = []
    last = len(params.backbone) - 1
    for i, layer in enumerate(params.backbone):
        h, lin_cache = linear(h, layer)
        if i < last:
            h, mask = relu(h)
            caches.append((lin_cache, mask))
        else:
            caches.append((lin_cache, None))
    return h, caches


def _backbone_backward(d_ft, caches):
    grads = [None] * len(caches)
    d = d_ft
    for i in range(len(caches) - 1, -1, -1):
        lin_cache, mask = caches[i]
        if mask is not None:
            d = relu_backward(d, mask)
        d, dw, db = linear_backward(d, lin_cache)
        grads[i] = (dw, db)
    return d, grads


def forward_loss(
    x: np.ndarray,
    labels,
    params: PipelineParams,
    variant: str,
    triplet_cfg: TripletConfig | None = None,
    ce_cfg: CeConfig | None = None,
):
    """Training-mode forward pass of one variant.

    Returns (total_loss, ce_loss, triplet_loss, caches). Batch norm runs in
    training mode and updates the running statistics. The batch must give
    every anchor at least one positive and one negative.
    """
    if variant not in VARIANTS:
        raise ParameterError(f"unknown variant {variant!r}, want one of {VARIANTS}")
    triplet_cfg = triplet_cfg or default_triplet_config(variant)
    ce_cfg = ce_cfg or CeConfig()

    f_t, bb_caches = backbone_forward(x, params)
    if variant == "strong":
        triplet_loss, d_tri = batch_hard_triplet_loss(f_t, labels, triplet_cfg)
        f_i, bn_cache = batchnorm_train(f_t, params.head.bn)
        l2_cache = None
    else:
        f_i, bn_cache = batchnorm_train(f_t, params.head.bn)
        f_n, l2_cache = l2_normalize(f_i)
        triplet_loss, d_tri = batch_hard_triplet_loss(f_n, labels, triplet_cfg)
    logits, cls_cache = linear(f_i, params.head.classifier)
    ce_loss, dlogits = softmax_cross_entropy(logits, labels, ce_cfg)

    caches = ForwardCaches(
        variant=variant,
        backbone=bb_caches,
        bn=bn_cache,
        f_i=f_i,
        l2=l2_cache,
        classifier=cls_cache,
        dlogits=dlogits,
        d_triplet_feat=d_tri,
    )
    return ce_loss + triplet_loss, ce_loss, triplet_loss, caches


def _backprop(caches: ForwardCaches, ce_weight: float, triplet_weight: float):
    """Chain rule over one head graph; returns grads plus the gradients
    arriving at f_t and (stronger only) the triplet-branch gradient at f_i."""
    d_fi_cls, dcls, _ = linear_backward(ce_weight * caches.dlogits, caches.classifier)
    d_fi_triplet = None
    if caches.variant == "strong":
        d_fi = d_fi_cls
        d_ft_direct = triplet_weight * caches.d_triplet_feat
    else:
        d_fi_triplet = l2_normalize_backward(triplet_weight * caches.d_triplet_feat, caches.l2)
        d_fi = d_fi_cls + d_fi_triplet
        d_ft_direct = 0.0
    d_ft_bn, dgamma, dbeta = batchnorm_backward(d_fi, caches.bn)
    d_ft = d_ft_bn + d_ft_direct
    _, bb_grads = _backbone_backward(d_ft, caches.backbone)
    grads = PipelineGrads(backbone=bb_grads, dgamma=dgamma, dbeta=dbeta, dclassifier=dcls)
    return grads, d_ft, d_fi_triplet


def backward(
    caches: ForwardCaches,
    params: PipelineParams,
    ce_weight: float = 1.0,
    triplet_weight: float = 1.0,
) -> PipelineGrads:
    """Exact parameter gradients of ce_weight*CE + triplet_weight*triplet."""
    if len(caches.backbone) != len(params.backbone):
        raise ShapeError("caches do not match the given parameters")
    grads, _, _ = _backprop(caches, ce_weight, triplet_weight)
    return grads


def feature_gradients(caches: ForwardCaches, ce_weight: float = 1.0, triplet_weight: float = 1.0):
    """Gradient arriving at f_t, plus the triplet-branch gradient at f_i
    (None for the strong variant, whose triplet taps f_t directly)."""
    _, d_ft, d_fi_triplet = _backprop(caches, ce_weight, triplet_weight)
    return d_ft, d_fi_triplet


def inference_feature(x: np.ndarray, params: PipelineParams) -> np.ndarray:
    """f_i = batchnorm_eval(backbone(x)): the retrieval feature of both
    variants. Requires running statistics from at least one training batch."""
    if params.head.bn.num_batches_tracked < 1:
        raise StateError("batch norm running statistics not populated; train first")
    f_t, _ = backbone_forward(x, params)
    return batchnorm_eval(f_t, params.head.bn)


def param_blocks(params: PipelineParams) -> dict[str, np.ndarray]:
    """Named views of every trainable array (shared memory, not copies)."""
    blocks: dict[str, np.ndarray] = {}
    for i, layer in enumerate(params.backbone):
        blocks[f"backbone.{i}.weight"] = layer.weight
        if layer.bias is not None:
            blocks[f"backbone.{i}.bias"] = layer.bias
    blocks["bn.gamma"] = params.head.bn.gamma
    blocks["bn.beta"] = params.head.bn.beta
    blocks["classifier.weight"] = params.head.classifier.weight
    return blocks


def grad_blocks(grads: PipelineGrads) -> dict[str, np.ndarray]:
    blocks: dict[str, np.ndarray] = {}
    for i, (dw, db) in enumerate(grads.backbone):
        blocks[f"backbone.{i}.weight"] = dw
        if db is not None:
            blocks[f"backbone.{i}.bias"] = db
    blocks["bn.gamma"] = grads.dgamma
    blocks["bn.beta"] = grads.dbeta
    blocks["classifier.weight"] = grads.dclassifier
    return blocks


def _encode_array(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8")
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


def save_checkpoint(path, params: PipelineParams, variant: str, meta: dict | None = None) -> None:
    """Write all parameter blocks plus batchnorm state to a JSON container.

    Layout (version 1): {"format", "version", "variant", "bn": {momentum,
    eps, num_batches_tracked}, "arrays": {name: {shape, data}}, "meta"}.
    Arrays are row-major little-endian float64, base64 encoded, under the
    same names as param_blocks plus "bn.running_mean" / "bn.running_var".
    """
    arrays = {name: _encode_array(a) for name, a in param_blocks(params).items()}
    arrays["bn.running_mean"] = _encode_array(params.head.bn.running_mean)
    arrays["bn.running_var"] = _encode_array(params.head.bn.running_var)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": variant,
        "bn": {
            "momentum": params.head.bn.momentum,
            "eps": params.head.bn.eps,
            "num_batches_tracked": params.head.bn.num_batches_tracked,
        },
        "meta": meta or {},
        "arrays": arrays,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (params, variant, meta)."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    arrays = {name: _decode_array(obj) for name, obj in doc["arrays"].items()}
    backbone = []
    for i in range(len(arrays)):
        key = f"backbone.{i}.weight"
        if key not in arrays:
            break
        backbone.append(LinearParams(weight=arrays[key], bias=arrays.get(f"backbone.{i}.bias")))
    if not backbone:
        raise ConfigError(f"{path} holds no backbone layers")
    bn = BnParams(
        gamma=arrays["bn.gamma"],
        beta=arrays["bn.beta"],
        running_mean=arrays["bn.running_mean"],
        running_var=arrays["bn.running_var"],
        momentum=float(doc["bn"]["momentum"]),
        eps=float(doc["bn"]["eps"]),
        num_batches_tracked=int(doc["bn"]["num_batches_tracked"]),
    )
    classifier = LinearParams(weight=arrays["classifier.weight"], bias=None)
    params = PipelineParams(backbone=backbone, head=HeadParams(bn=bn, classifier=classifier))
    return params, doc["variant"], doc.get("meta", {})
