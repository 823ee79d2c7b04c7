"""Compact personalised adaptation of a self-attentive translation model.

Adapted models are stored as sparse offsets from a shared baseline; group
lasso regularisation decides which tensors are worth storing.
"""

from .adapt import (
    AdaptationConfig,
    Dense,
    GroupLassoConfig,
    OffsetSet,
    SparseRows,
    Zero,
    batch_adapt,
    clip_offsets,
    compose,
    group_lasso_penalty,
    group_lasso_subgradient,
    incremental_adapt,
    method_config,
    offset_param_count,
    restrict_to_observed_vocab,
    select_fixed_tensors,
)
from .data import ParallelCorpus, Segment, SyntheticTaskConfig, Vocabulary, generate_synthetic
from .metrics import bleu, repetition_rate
from .model import ModelConfig, greedy_decode, init_params, param_count, region_of, translate
from .persistence import load_checkpoint, load_offsets, save_checkpoint, save_offsets

__version__ = "0.1.0"
