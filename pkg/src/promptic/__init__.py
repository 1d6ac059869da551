"""Prompt-conditioned Swin-transformer image codec with variable-rate and ROI coding."""

from .bitstream import BitstreamHeader, decode_file, decode_image, encode_file, encode_image
from .conditioning import MaskSpec, generate_mask, lambda_of
from .evaluation import prompt_attention_map, rd_sweep, weighted_psnr
from .io import load_checkpoint, save_checkpoint
from .network import TOY_CONFIG, CodecConfig, PromptCodec
from .profiling import profile_complexity
from .training import StagePlan, TrainingConfig, rd_loss, run_training

__version__ = "0.1.0"

__all__ = [
    "BitstreamHeader",
    "CodecConfig",
    "MaskSpec",
    "PromptCodec",
    "StagePlan",
    "TOY_CONFIG",
    "TrainingConfig",
    "decode_file",
    "decode_image",
    "encode_file",
    "encode_image",
    "generate_mask",
    "lambda_of",
    "load_checkpoint",
    "profile_complexity",
    "prompt_attention_map",
    "rd_loss",
    "rd_sweep",
    "run_training",
    "save_checkpoint",
    "weighted_psnr",
]
