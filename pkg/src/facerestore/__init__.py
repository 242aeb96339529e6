"""Configurable-scale blind face restoration toolkit.

Subpackages cover imaging primitives, the degradation synthesis pipeline,
the mixed multi-path residual block, the asymmetric codec, the GAN-prior
generator, global/local discriminators, training objectives, the fine-tuning
loop, quality metrics, and a batch CLI.
"""

from .errors import ConfigError, DataError, FaceRestoreError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "FaceRestoreError", "NumericError", "__version__"]
