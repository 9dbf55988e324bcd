"""Real-time super-resolution with assembled convolutions: a numpy reference
implementation with a desk-scale trainer, quality metrics, and a latency
benchmark harness."""

__version__ = "0.1.0"

from .errors import (AsConvSRError, CheckpointError, ConfigError, DataError,
                     NumericError, ShapeError)
from .tensor import Rng
from .layers import ParamStore, pixel_shuffle, pixel_unshuffle, repeat_upscale
from .assembled import (assemble_kernels, assembled_conv_forward,
                        control_forward, dynamic_assemble)
from .model import (AsConvSR, ModelConfig, build_model, flops_estimate,
                    param_count, preset_asconvsr, preset_asconvsr_l)
from .training import (TrainConfig, Trainer, charbonnier_loss, checkpoint_load,
                       checkpoint_save)
from .metrics import (BenchReport, bicubic_resize, efficiency_score, psnr_rgb,
                      runtime_bench, ssim_rgb)
from .data import PairDataset, dataset_scan, png_read, png_write

__all__ = [
    "AsConvSR", "AsConvSRError", "BenchReport", "CheckpointError", "ConfigError",
    "DataError", "ModelConfig", "NumericError", "PairDataset", "ParamStore",
    "Rng", "ShapeError", "TrainConfig", "Trainer", "assemble_kernels",
    "assembled_conv_forward", "bicubic_resize", "build_model", "charbonnier_loss",
    "checkpoint_load", "checkpoint_save", "control_forward", "dataset_scan",
    "dynamic_assemble", "efficiency_score", "flops_estimate", "param_count",
    "pixel_shuffle", "pixel_unshuffle", "png_read", "png_write",
    "preset_asconvsr", "preset_asconvsr_l", "psnr_rgb", "repeat_upscale",
    "runtime_bench", "ssim_rgb",
]
