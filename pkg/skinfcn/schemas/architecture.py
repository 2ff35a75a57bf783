from typing import Literal

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from skinfcn.errors import ConfigError

STAGE_COUNT = 5


class ArchitectureConfig(BaseModel):
    """Declarative description of the skip-layer FCN topology.

    Five convolution stages, each closed by a 2x2 max-pool, two
    convolutionalized fully connected layers (fc6 7x7, fc7 1x1), and one
    2-class prediction head tapped after every pool plus one after fc7.
    """

    model_config = ConfigDict(frozen=True)

    stage_widths: tuple[tuple[int, ...], ...] = (
        (64, 64),
        (128, 128),
        (256, 256, 256),
        (512, 512, 512),
        (512, 512, 512),
    )
    fc_widths: tuple[int, int] = (4096, 4096)
    num_classes: int = 2
    head_count: int = 6
    input_multiple: int = 32
    in_channels: int = 3
    fusion: Literal["concat", "sum"] = "concat"

    @field_validator("stage_widths")
    @classmethod
    def _check_stages(cls, stages: tuple[tuple[int, ...], ...]) -> tuple[tuple[int, ...], ...]:
        if len(stages) != STAGE_COUNT:
            raise ValueError(f"exactly {STAGE_COUNT} stages are required, got {len(stages)}")
        for index, widths in enumerate(stages, start=1):
            if not widths:
                raise ValueError(f"stage {index} has no convolutions")
            if any(width < 1 for width in widths):
                raise ValueError(f"stage {index} has a non-positive width: {widths}")
        return stages

    @field_validator("fc_widths")
    @classmethod
    def _check_fc(cls, widths: tuple[int, int]) -> tuple[int, int]:
        if any(width < 1 for width in widths):
            raise ValueError(f"fc widths must be positive, got {widths}")
        return widths

    @model_validator(mode="after")
    def _check_topology(self) -> "ArchitectureConfig":
        if self.num_classes != 2:
            raise ValueError("only binary (2-class) segmentation is supported")
        if self.head_count != STAGE_COUNT + 1:
            raise ValueError(f"head_count must be {STAGE_COUNT + 1} (one per pool plus fc7)")
        if self.input_multiple != 2**STAGE_COUNT:
            raise ValueError(f"input_multiple must be {2 ** STAGE_COUNT}")
        if self.in_channels != 3:
            raise ValueError("inputs are RGB images (3 channels)")
        return self

    @property
    def upsample_factors(self) -> tuple[int, ...]:
        """Head upsampling factors in tap order: pool1..pool5, then fc7."""
        return tuple(2**stage for stage in range(1, STAGE_COUNT + 1)) + (2**STAGE_COUNT,)

    @property
    def fusion_channels(self) -> int:
        if self.fusion == "concat":
            return self.head_count * self.num_classes
        return self.num_classes


CANONICAL = ArchitectureConfig()
DESK = ArchitectureConfig(
    stage_widths=((4, 4), (8, 8), (8, 8, 8), (16, 16, 16), (16, 16, 16)),
    fc_widths=(32, 32),
)
MICRO = ArchitectureConfig(
    stage_widths=((2, 2), (2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2)),
    fc_widths=(4, 4),
)

PRESETS = {"canonical": CANONICAL, "desk": DESK, "micro": MICRO}


def preset(name: str, fusion: str = "concat") -> ArchitectureConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown architecture preset '{name}'; choose from {sorted(PRESETS)}")
    config = PRESETS[name]
    if fusion != config.fusion:
        try:
            config = ArchitectureConfig(**{**config.model_dump(), "fusion": fusion})
        except ValidationError as e:
            raise ConfigError(f"invalid fusion mode '{fusion}': {e}") from e
    return config
