"""Identity-balanced batch sampling, LR schedules, optimizers, and the
epoch loop.

A training batch holds P distinct identities with K samples each, so the
triplet loss always finds a positive and a negative for every anchor. The
learning rate warms up linearly per epoch, then decays by a fixed factor
at each milestone. Runs are deterministic given the config seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, horizontal_flip, random_erasing
from .errors import DatasetError, ParameterError, ShapeError
from .evaluation import compute_dist_matrix, evaluate_market
from .losses import CeConfig, TripletConfig
from .numerics import Rng
from .pipeline import (
    PipelineParams,
    backward,
    default_triplet_config,
    forward_loss,
    grad_blocks,
    inference_feature,
    init_pipeline,
    param_blocks,
)

HISTORY_COLUMNS = ["epoch", "lr", "ce_loss", "triplet_loss", "total_loss", "mAP", "rank1"]


@dataclass
class Schedule:
    base_lr: float
    total_epochs: int
    warmup_epochs: int = 0
    warmup_start_lr: float = 0.0
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.base_lr <= 0:
            raise ParameterError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0.0 < self.gamma <= 1.0:
            raise ParameterError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.total_epochs < 0 or self.warmup_epochs < 0:
            raise ParameterError("epoch counts must be >= 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ParameterError(f"milestones must be strictly increasing, got {self.milestones}")
        if any(m < self.warmup_epochs for m in self.milestones):
            raise ParameterError("milestones must not fall inside the warmup phase")

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "total_epochs": self.total_epochs,
            "warmup_epochs": self.warmup_epochs,
            "warmup_start_lr": self.warmup_start_lr,
            "milestones": list(self.milestones),
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        d = dict(d)
        d["milestones"] = tuple(d.get("milestones", ()))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ParameterError(f"bad schedule config: {exc}") from exc


def market_schedule(total_epochs: int = 120) -> Schedule:
    """Warmup 3.5e-6 -> 3.5e-4 over 10 epochs, decay x0.1 at epochs 30 and 55."""
    return Schedule(
        base_lr=3.5e-4,
        total_epochs=total_epochs,
        warmup_epochs=10,
        warmup_start_lr=3.5e-6,
        milestones=(30, 55),
        gamma=0.1,
    )


def submission_schedule(total_epochs: int = 350) -> Schedule:
    """No warmup, base 0.065, decay x0.1 at epochs 150, 225 and 300."""
    return Schedule(
        base_lr=0.065,
        total_epochs=total_epochs,
        warmup_epochs=0,
        milestones=(150, 225, 300),
        gamma=0.1,
    )


def lr_at(s: Schedule, epoch: int) -> float:
    """Learning rate for a 0-based epoch index."""
    if not 0 <= epoch < s.total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.warmup_epochs:
        frac = epoch / s.warmup_epochs
        return s.warmup_start_lr + frac * (s.base_lr - s.warmup_start_lr)
    decays = sum(1 for m in s.milestones if m <= epoch)
    return s.base_lr * s.gamma**decays


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimState:
    kind: str  # "adam" | "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay_blocks: frozenset = frozenset()
    step_count: int = 0
    m: dict = field(default_factory=dict)  # Adam first moment / SGD velocity
    v: dict = field(default_factory=dict)  # Adam second moment


def init_optimizer(kind: str, blocks: dict, weight_decay: float = 0.0, **hyper) -> OptimState:
    """Zero-moment state for the named parameter blocks; weight decay is
    applied to blocks whose name ends in '.weight' (never to BN gamma/beta
    or biases)."""
    if kind not in ("adam", "sgd"):
        raise ParameterError(f"unknown optimizer {kind!r}")
    decayed = frozenset(name for name in blocks if name.endswith(".weight"))
    state = OptimState(kind=kind, weight_decay=weight_decay, decay_blocks=decayed, **hyper)
    for name, arr in blocks.items():
        state.m[name] = np.zeros_like(arr)
        if kind == "adam":
            state.v[name] = np.zeros_like(arr)
    return state


def _effective_grad(name, param, grad, state):
    if state.weight_decay and name in state.decay_blocks:
        return grad + state.weight_decay * param
    return grad


def adam_step(blocks: dict, grads: dict, state: OptimState, lr: float) -> None:
    """Standard Adam with bias correction; updates blocks in place."""
    state.step_count += 1
    t = state.step_count
    for name, p in blocks.items():
        g = _effective_grad(name, p, grads[name], state)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m[...] = state.beta1 * m + (1 - state.beta1) * g
        v[...] = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def sgd_momentum_step(blocks: dict, grads: dict, state: OptimState, lr: float) -> None:
    """Classic momentum: v <- mu v + g; p <- p - lr v."""
    state.step_count += 1
    for name, p in blocks.items():
        g = _effective_grad(name, p, grads[name], state)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        vel = state.m[name]
        vel[...] = state.momentum * vel + g
        p -= lr * vel


def optimizer_step(blocks, grads, state: OptimState, lr: float) -> None:
    if state.kind == "adam":
        adam_step(blocks, grads, state, lr)
    else:
        sgd_momentum_step(blocks, grads, state, lr)


# ---------------------------------------------------------------------------
# PK sampling


def pk_sample(labels, p: int, k: int, rng: Rng) -> np.ndarray:
    """Indices of P distinct identities x K samples each.

    Identities are drawn without replacement; samples within an identity
    are drawn without replacement when it has >= K samples, otherwise with
    replacement.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if ids.size < p:
        raise DatasetError(f"need >= {p} identities, dataset has {ids.size}")
    chosen = ids[rng.choice(ids.size, p)]
    out = []
    for ident in chosen:
        pool = np.flatnonzero(labels == ident)
        if pool.size >= k:
            sel = pool[rng.choice(pool.size, k)]
        else:
            sel = pool[rng.integers(pool.size, size=k)]
        out.extend(int(i) for i in sel)
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    variant: str = "stronger"
    p: int = 8
    k: int = 4
    schedule: Schedule = field(default_factory=lambda: market_schedule(40))
    optimizer: str = "adam"
    weight_decay: float = 5e-4
    sgd_momentum: float = 0.9
    triplet: TripletConfig | None = None  # None -> per-variant default
    ce: CeConfig = field(default_factory=CeConfig)
    seed: int = 0
    eval_every: int = 10
    eval_metric: str = "cosine"
    hidden_dims: tuple[int, ...] = (64, 32)
    flip_p: float = 0.5   # image payloads only
    erase_p: float = 0.5  # image payloads only
    dataset: dict | None = None  # provenance spec recorded in run manifests

    def __post_init__(self):
        if self.variant not in ("strong", "stronger"):
            raise ParameterError(f"unknown variant {self.variant!r}")
        if self.p < 2 or self.k < 2:
            raise ParameterError(f"need P >= 2 and K >= 2, got P={self.p}, K={self.k}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 0:
            raise ParameterError("eval_every must be >= 0 (0 disables validation)")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not self.hidden_dims:
            raise ParameterError("hidden_dims must name at least one layer width")

    def resolved_triplet(self) -> TripletConfig:
        return self.triplet if self.triplet is not None else default_triplet_config(self.variant)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "p": self.p,
            "k": self.k,
            "schedule": self.schedule.to_dict(),
            "optimizer": self.optimizer,
            "weight_decay": self.weight_decay,
            "sgd_momentum": self.sgd_momentum,
            "triplet": {
                "margin": self.resolved_triplet().margin,
                "metric": self.resolved_triplet().metric,
                "soft_margin": self.resolved_triplet().soft_margin,
            },
            "ce": {"label_smoothing": self.ce.label_smoothing},
            "seed": self.seed,
            "eval_every": self.eval_every,
            "eval_metric": self.eval_metric,
            "hidden_dims": list(self.hidden_dims),
            "flip_p": self.flip_p,
            "erase_p": self.erase_p,
            "dataset": self.dataset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = Schedule.from_dict(d["schedule"])
        if d.get("triplet") is not None:
            d["triplet"] = TripletConfig(**d["triplet"])
        if "ce" in d:
            d["ce"] = CeConfig(**d["ce"])
        if "hidden_dims" in d:
            d["hidden_dims"] = tuple(d["hidden_dims"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ParameterError(f"bad train config: {exc}") from exc


@dataclass
class EpochStats:
    epoch: int
    lr: float
    ce_loss: float
    triplet_loss: float
    total_loss: float
    map: float | None = None
    rank1: float | None = None


@dataclass
class TrainResult:
    history: list[EpochStats]
    params: PipelineParams


def _batch_matrix(dataset: Dataset, indices, cfg: TrainConfig, rng: Rng) -> np.ndarray:
    rows = []
    for i in indices:
        payload = dataset.items[int(i)].payload
        if payload.ndim == 3:
            payload = horizontal_flip(payload, cfg.flip_p, rng)
            payload = random_erasing(payload, cfg.erase_p, rng=rng)
        rows.append(payload.ravel().astype(np.float64))
    return np.stack(rows)


def evaluate_split(dataset: Dataset, params: PipelineParams, metric: str = "cosine", max_rank: int = 10):
    """Validation retrieval on the dataset's query/gallery splits."""
    q = dataset.features("query")
    g = dataset.features("gallery")
    if q.shape[0] == 0 or g.shape[0] == 0:
        raise DatasetError("dataset lacks query/gallery splits for validation")
    fq = inference_feature(q, params)
    fg = inference_feature(g, params)
    dist = compute_dist_matrix(fq, fg, metric)
    return evaluate_market(
        dist,
        dataset.pids("query"),
        dataset.camids("query"),
        dataset.pids("gallery"),
        dataset.camids("gallery"),
        max_rank=max_rank,
    )


def train_run(cfg: TrainConfig, dataset: Dataset) -> TrainResult:
    """Run the full training recipe; deterministic under cfg.seed.

    Returns per-epoch losses and learning rate, with validation mAP/rank-1
    every cfg.eval_every epochs (and on the final epoch). The trained
    parameters ride along on the result for checkpointing.
    """
    train_idx = dataset.indices("train")
    if not train_idx:
        raise DatasetError("dataset has no train split")
    labels = dataset.train_labels()
    num_classes = dataset.num_train_ids
    in_dim = dataset.items[train_idx[0]].payload.size

    rng = Rng(cfg.seed)
    params = init_pipeline(in_dim, cfg.hidden_dims, num_classes, rng)
    blocks = param_blocks(params)
    opt = init_optimizer(
        cfg.optimizer,
        blocks,
        weight_decay=cfg.weight_decay,
        momentum=cfg.sgd_momentum,
    )
    triplet_cfg = cfg.resolved_triplet()

    batch_size = cfg.p * cfg.k
    iters = max(1, len(train_idx) // batch_size)
    train_idx = np.asarray(train_idx, dtype=np.int64)

    history: list[EpochStats] = []
    for epoch in range(cfg.schedule.total_epochs):
        lr = lr_at(cfg.schedule, epoch)
        ce_sum = tri_sum = total_sum = 0.0
        for _ in range(iters):
            batch = pk_sample(labels, cfg.p, cfg.k, rng)
            x = _batch_matrix(dataset, train_idx[batch], cfg, rng)
            total, ce, tri, caches = forward_loss(
                x, labels[batch], params, cfg.variant, triplet_cfg, cfg.ce
            )
            grads = backward(caches, params)
            optimizer_step(blocks, grad_blocks(grads), opt, lr)
            ce_sum += ce
            tri_sum += tri
            total_sum += total
        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            ce_loss=ce_sum / iters,
            triplet_loss=tri_sum / iters,
            total_loss=total_sum / iters,
        )
        last_epoch = epoch == cfg.schedule.total_epochs - 1
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last_epoch):
            report = evaluate_split(dataset, params, cfg.eval_metric)
            stats.map = report.map
            stats.rank1 = report.rank(1)
        history.append(stats)
    return TrainResult(history=history, params=params)


def write_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for s in history:
            w.writerow(
                [
                    s.epoch,
                    repr(s.lr),
                    repr(s.ce_loss),
                    repr(s.triplet_loss),
                    repr(s.total_loss),
                    "" if s.map is None else repr(s.map),
                    "" if s.rank1 is None else repr(s.rank1),
                ]
            )


def load_history_csv(path) -> list[EpochStats]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(
                EpochStats(
                    epoch=int(row["epoch"]),
                    lr=float(row["lr"]),
                    ce_loss=float(row["ce_loss"]),
                    triplet_loss=float(row["triplet_loss"]),
                    total_loss=float(row["total_loss"]),
                    map=float(row["mAP"]) if row["mAP"] else None,
                    rank1=float(row["rank1"]) if row["rank1"] else None,
                )
            )
    return out
