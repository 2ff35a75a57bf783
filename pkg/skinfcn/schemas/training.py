from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


class SgdConfig(BaseModel):
    """SGD hyperparameters with the fine-tuning defaults."""

    learning_rate: float = Field(default=0.001, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0001, ge=0)
    batch_size: int = Field(default=6, ge=1)


class RunConfig(BaseModel):
    """Everything `train` needs, flattened so it maps onto key=value config files."""

    manifest: Path
    out: Path
    epochs: int = Field(ge=1)
    seed: int = Field(ge=0)
    preset: Literal["canonical", "desk", "micro"] = "canonical"
    fusion: Literal["concat", "sum"] = "concat"
    learning_rate: float = Field(default=0.001, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0001, ge=0)
    batch_size: int = Field(default=6, ge=1)
    target_size: int = Field(default=384, ge=32)
    threads: int = Field(default=1, ge=1)
    start_epoch: int = Field(default=0, ge=0)
    init: Optional[Path] = None
    val_manifest: Optional[Path] = None
    log: Optional[Path] = None

    @model_validator(mode="after")
    def _check_size(self) -> "RunConfig":
        if self.target_size % 32:
            raise ValueError(f"target_size must be divisible by 32, got {self.target_size}")
        return self

    @property
    def sgd(self) -> SgdConfig:
        return SgdConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
        )

    @property
    def log_path(self) -> Path:
        return self.log if self.log is not None else Path(f"{self.out}.log.csv")
