"""Diverse Norm: whitening, channel-attention branch split and relative
difficulty re-weighting for cloth-changing re-identification, at desk scale."""

from .diverse_norm import (
    BaselineNet,
    DiverseNormNet,
    ModelConfig,
    WhiteningState,
    attention_gate,
    build_model,
    dual_branch_loss,
    reweight_scores,
    split_features,
    whiten,
)
from .retrieval import branch_similarity, evaluate, protocol_mask, rank_metrics
from .synth_data import Dataset, SynthConfig, drop_outfits, generate, load_dataset, save_dataset
from .trainer import Checkpoint, TrainConfig, load_checkpoint, train_run

__version__ = "0.1.0"
