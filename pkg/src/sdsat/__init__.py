"""Speculative decoding with semantic adaptive tokens, at desk scale."""

from .greedy import DraftState, GenStats, draft_step1, draft_step2, generate_greedy, verify_greedy
from .model import (
    ConfigError,
    DecoderLM,
    KvCache,
    ModelConfig,
    causal_mask,
    forward,
    init_model,
    load_checkpoint,
    param_checksum,
    rollback,
    save_checkpoint,
)
from .oracle import branch_logits, generate_vanilla_greedy, generate_vanilla_nucleus
from .tree import (
    BranchProfile,
    DraftTree,
    SamplingConfig,
    build_tree,
    build_tree_mask,
    generate_nucleus,
    truncate_dist,
    verify_tree,
)

__version__ = "0.1.0"
