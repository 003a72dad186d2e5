"""Relay residual diffusion image codec at toy scale.

The diffusion process starts from a noised copy of the compressed latent
rather than from pure noise, so a handful of reverse steps suffice.
"""
from .bitstream import compress_array, decompress_array
from .nets import ModelConfig, RRDModel, load_checkpoint, save_checkpoint
from .sampler import cfg_blend, reconstruct, spaced_steps
from .schedule import build_schedule, relay_weights
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "RRDModel", "TrainConfig", "build_schedule", "cfg_blend", "compress_array",
    "decompress_array", "load_checkpoint", "reconstruct", "relay_weights", "save_checkpoint",
    "spaced_steps", "train",
]
