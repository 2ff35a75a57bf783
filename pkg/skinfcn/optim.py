"""
Stochastic gradient descent with heavy-ball momentum and L2 weight decay.

    v <- momentum * v + lr * (grad + weight_decay * w)
    w <- w - v
"""

import dataclasses
import logging
from typing import Sequence

import numpy as np

from skinfcn.errors import ContractError
from skinfcn.schemas.training import SgdConfig
from skinfcn.tensor import Parameter

_LOGGER = logging.getLogger(__name__)


@dataclasses.dataclass
class SgdState:
    """Momentum buffers keyed by parameter name."""

    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[Parameter]) -> "SgdState":
        return cls(velocity={p.name: np.zeros_like(p.value.data) for p in params if p.trainable})


def zero_grads(params: Sequence[Parameter]) -> None:
    for param in params:
        param.zero_grad()


def sgd_step(params: Sequence[Parameter], state: SgdState, cfg: SgdConfig) -> None:
    """Update every trainable parameter in place."""
    trainable = [p for p in params if p.trainable]
    names = {p.name for p in trainable}
    if names != set(state.velocity):
        raise ContractError(
            f"optimizer state does not match parameters: "
            f"unknown {sorted(set(state.velocity) - names)}, missing {sorted(names - set(state.velocity))}"
        )
    for param in trainable:
        velocity = state.velocity[param.name]
        weights = param.value.data
        if velocity.shape != weights.shape or velocity.dtype != weights.dtype:
            raise ContractError(
                f"velocity of '{param.name}' is {velocity.shape}/{velocity.dtype}, "
                f"parameter is {weights.shape}/{weights.dtype}"
            )
        velocity *= cfg.momentum
        velocity += cfg.learning_rate * (param.grad.data + cfg.weight_decay * weights)
        weights -= velocity
