"""Learned block-sparse attention gate for decoding.

numpy reference implementation: gate forward/backward, ground-truth
generation, self-distillation, compression cache, block selection policies,
split-scheduled sparse decode and an evaluation harness.
"""

from .attention import (
    AttentionInputs,
    GroundTruthMap,
    dense_attention,
    ground_truth_fused,
    ground_truth_fused_varlen,
    ground_truth_naive,
    streaming_attention,
)
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .decode import (
    BlockSelection,
    DecodeSession,
    KCompressionCache,
    SparsifyPolicy,
    cache_append,
    quest_metadata,
    quest_scores,
    select_blocks,
    sparse_decode,
)
from .errors import CheckpointError, CheckpointVersionError, NumericError, ShapeError, TensorFormatError
from .gate import GateParams, GateScores, gate_backward, gate_forward, init_gate_params, kl_loss
from .tensor import ModelShape
from .train import TrainConfig, train

__version__ = "0.1.0"
