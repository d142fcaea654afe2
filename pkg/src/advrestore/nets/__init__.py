from .blocks import (
    BLOCK_KINDS,
    block_param_spec,
    block_parameter_count,
    channel_attention,
    gdfn,
    mdta,
    restoration_block,
    simplified_channel_attention,
)
from .checkpoint import CheckpointError, file_sha256, load_checkpoint, save_checkpoint
from .model import ArchVariant, Model, build_model, model_forward

__all__ = [
    "ArchVariant",
    "BLOCK_KINDS",
    "CheckpointError",
    "Model",
    "block_param_spec",
    "block_parameter_count",
    "build_model",
    "channel_attention",
    "file_sha256",
    "gdfn",
    "load_checkpoint",
    "mdta",
    "model_forward",
    "restoration_block",
    "save_checkpoint",
    "simplified_channel_attention",
]
