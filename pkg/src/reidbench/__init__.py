"""Desk-scale re-identification training, evaluation and diagnostics."""

__version__ = "0.1.0"

from .data import Dataset, SynthConfig, gen_synthetic, load_manifest, write_dataset
from .diagnostics import grad_direction_report, hardness_consistency
from .evaluation import (
    EvalReport,
    average_precision_oracle,
    compute_dist_matrix,
    evaluate_market,
    k_reciprocal_rerank,
    query_expansion,
)
from .losses import CeConfig, TripletConfig, batch_hard_mine, batch_hard_triplet_loss, softmax_cross_entropy
from .numerics import Rng, finite_diff_grad, kaiming_init
from .pipeline import (
    PipelineParams,
    backward,
    forward_loss,
    inference_feature,
    init_pipeline,
    load_checkpoint,
    save_checkpoint,
)
from .training import Schedule, TrainConfig, lr_at, market_schedule, pk_sample, submission_schedule, train_run
