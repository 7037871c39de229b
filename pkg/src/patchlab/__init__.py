"""patchlab: adversarial patch generation, evaluation, and robustness
training for object detectors."""

__version__ = "0.1.0"

from .sampler import SamplerConfig, BatchSequence, poisson_sample  # noqa: F401
from .patching import (Patch, TransformConfig, TransformSpec,  # noqa: F401
                       apply_patch, random_noise_patch, sample_transform)
