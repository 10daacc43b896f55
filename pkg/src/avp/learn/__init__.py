"""Encoder, primitive decoder, flow-matching action expert, training, and rollout."""

from .checkpoint import checkpoint_bytes, config_hash, load_checkpoint, params_from_bytes, save_checkpoint
from .flow import expert_velocity, fm_loss, fm_sample
from .model import (
    Batch,
    ConditioningBundle,
    FeatureNorm,
    ModelDims,
    ModelParams,
    TrainConfig,
    ce_loss,
    decoder_forward,
    encode_observation,
    instruction_encoding,
    train_step,
)
from .nn import AdamState, adam_update, mlp_backward, mlp_forward
from .rollout import PolicySpec, policy_rollout
from .train import fit, init_params
