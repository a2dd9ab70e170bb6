"""Privacy-preserving semantic image transmission, simulated end to end.

A transmitter detects and masks sensitive entities, a learned block codec
carries the masked image plus an entity index over an AWGN channel, an
authorized receiver regenerates the masked region with a conditional
diffusion inpainter, and a simulated eavesdropper without the shared
privacy database serves as the baseline it is measured against.
"""

__version__ = "0.1.0"

from privsem.errors import (
    ConfigurationError,
    DimensionError,
    EmptyRegionError,
    IngestionError,
    MissingDependencyError,
    StaleDatabaseError,
    VersionError,
)

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "EmptyRegionError",
    "IngestionError",
    "MissingDependencyError",
    "StaleDatabaseError",
    "VersionError",
    "__version__",
]
