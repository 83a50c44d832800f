"""Toy asymmetric learned image codec in numpy.

Heavy analysis transform, light synthesis transform, a checkerboard
context entropy model with a real range coder, and a small iterative
denoising decoder, all trained with a tape-based autodiff.
"""
from .bitstream import Bitstream, decode_image, encode_image
from .checkpoint import load_checkpoint, save_checkpoint
from .model import build_model
from .transforms import ModelConfig, load_config, toy_config

__version__ = "0.1.0"

__all__ = ["Bitstream", "ModelConfig", "build_model", "decode_image", "encode_image", "load_checkpoint",
           "load_config", "save_checkpoint", "toy_config"]
