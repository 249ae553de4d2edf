"""Patch-wise diffusion with a masked-autoencoder U-Net for unsupervised anomaly segmentation."""
from .errors import (
    BadMagicError, ConfigError, MAEDiffError, MetricError, NumericError, StepError,
    TensorFormatError, TruncatedFileError, VersionMismatchError,
)
from .schedule import DiffusionConfig, NoiseSchedule, build_linear_schedule, forward_diffuse
from .simplex import SimplexParams, fractal_field, simplex2d
from .patching import PatchPlan, enumerate_patches, make_mask

__version__ = "0.1.0"
