"""Channel compression for small CNNs via trained orthonormal projections.

Compression happens in three stages: learn an orthonormal-column projection
per layer through an unconstrained proxy matrix, fold the projection into
the producer's and consumer's kernels so no extra layer remains, then
optionally relax the folded kernels and fine-tune.

Only lightweight symbols are exported here; importing :mod:`caproj` must not
pull in numpy so the CLI can pin BLAS thread pools first.
"""

from .errors import (
    ConfigError,
    DegenerateSpectrumError,
    NumericError,
    PlanError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "ConfigError",
    "DegenerateSpectrumError",
    "NumericError",
    "PlanError",
    "ShapeError",
]
