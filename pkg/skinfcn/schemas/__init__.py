from skinfcn.schemas.architecture import (
    ArchitectureConfig,
    CANONICAL,
    DESK,
    MICRO,
    PRESETS,
    preset,
)
from skinfcn.schemas.training import RunConfig, SgdConfig

__all__ = [
    "ArchitectureConfig",
    "CANONICAL",
    "DESK",
    "MICRO",
    "PRESETS",
    "preset",
    "RunConfig",
    "SgdConfig",
]
