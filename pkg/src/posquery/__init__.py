"""Positional-query conditioned diffusion for arbitrary-multiple image outpainting."""

from .diffusion import NoiseSchedule, linear_schedule
from .model import Denoiser, ModelConfig, PatchCodec
from .position import CropRegion, Explicit, Multiple, mode_to_regions, relative_grid, sincos_embed
from .sampler import SampleConfig, outpaint
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
