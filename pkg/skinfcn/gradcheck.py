"""
Finite-difference verification of every backward rule.

Each operator is checked in float64 against central differences of the
projection loss sum(out * r) for a fixed random r, over several seeds. The
micro model is checked end to end on the softmax loss for a random subset
of parameters per layer class; elements whose perturbation flips a ReLU
sign or a max-pool winner are not differentiable there and are replaced by
other elements.
"""

import dataclasses
import logging
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from skinfcn.model import build_model, forward
from skinfcn.ops import (
    ConvSpec,
    DeconvSpec,
    concat_channels,
    conv2d,
    maxpool2,
    relu,
    softmax_cross_entropy,
    transposed_conv2d,
)
from skinfcn.schemas.architecture import MICRO
from skinfcn.tensor import Parameter, Tape, Tensor, mul, sum_all

_LOGGER = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5
SCALE_FLOOR = 1e-6
SEEDS_PER_OPERATOR = 5
PARAMS_PER_CLASS = 3
ELEMENTS_PER_PARAM = 3
MAX_ELEMENT_ATTEMPTS = 30


@dataclasses.dataclass(frozen=True)
class CheckResult:
    """Outcome of one gradient check."""

    name: str
    max_error: float
    passed: bool
    details: str | None = None


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), SCALE_FLOOR)
    return float(np.abs(analytic - numeric).max()) / scale


def central_difference(evaluate: Callable[[], float], array: np.ndarray, index: tuple[int, ...]) -> float:
    original = array[index]
    array[index] = original + STEP
    plus = evaluate()
    array[index] = original - STEP
    minus = evaluate()
    array[index] = original
    return (plus - minus) / (2 * STEP)


def _parameters(rng: np.random.Generator, **shapes: tuple[int, ...]) -> list[Parameter]:
    return [Parameter.create(name, rng.standard_normal(shape)) for name, shape in shapes.items()]


OperatorCase = tuple[list[Parameter], Callable[[Sequence[Parameter]], Tensor]]


def _conv_case(rng: np.random.Generator) -> OperatorCase:
    spec = ConvSpec.same(3, 4, 3)
    params = _parameters(rng, x=(2, 3, 5, 5), weight=(4, 3, 3, 3), bias=(1, 4, 1, 1))
    return params, lambda p: conv2d(p[0], p[1], p[2], spec)


def _strided_conv_case(rng: np.random.Generator) -> OperatorCase:
    spec = ConvSpec(3, 2, kernel=(2, 2), stride=(2, 2))
    params = _parameters(rng, x=(1, 3, 6, 6), weight=(2, 3, 2, 2), bias=(1, 2, 1, 1))
    return params, lambda p: conv2d(p[0], p[1], p[2], spec)


def _maxpool_case(rng: np.random.Generator) -> OperatorCase:
    # distinct values at least 0.1 apart keep every winner stable under +-STEP
    shape = (2, 2, 4, 6)
    values = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1
    return [Parameter.create("x", values.astype(np.float64))], lambda p: maxpool2(p[0])


def _relu_case(rng: np.random.Generator) -> OperatorCase:
    shape = (2, 3, 4, 4)
    magnitude = rng.uniform(0.1, 2.0, size=shape)
    values = np.where(rng.random(shape) < 0.5, -magnitude, magnitude)
    return [Parameter.create("x", values)], lambda p: relu(p[0])


def _deconv_case(factor: int, size: int) -> Callable[[np.random.Generator], OperatorCase]:
    def case(rng: np.random.Generator) -> OperatorCase:
        spec = DeconvSpec(2, factor)
        params = _parameters(rng, x=(1, 2, size, size), weight=(2, 1, spec.kernel, spec.kernel))
        return params, lambda p: transposed_conv2d(p[0], p[1], spec)

    return case


def _concat_case(rng: np.random.Generator) -> OperatorCase:
    params = _parameters(rng, a=(2, 2, 3, 3), b=(2, 1, 3, 3), c=(2, 3, 3, 3))
    return params, lambda p: concat_channels(p)


def _softmax_case(rng: np.random.Generator) -> OperatorCase:
    labels = rng.integers(0, 2, size=(2, 4, 4))
    params = _parameters(rng, logits=(2, 2, 4, 4))
    return params, lambda p: softmax_cross_entropy(p[0], labels)[0]


OPERATOR_CASES: dict[str, Callable[[np.random.Generator], OperatorCase]] = {
    "conv2d": _conv_case,
    "conv2d_strided": _strided_conv_case,
    "maxpool2": _maxpool_case,
    "relu": _relu_case,
    "transposed_conv2d": _deconv_case(2, 3),
    "transposed_conv2d_f4": _deconv_case(4, 2),
    "concat_channels": _concat_case,
    "softmax_cross_entropy": _softmax_case,
}


def check_operator(name: str, seed: int) -> CheckResult:
    """Compare every gradient element of one operator with central differences."""
    build = OPERATOR_CASES[name]
    worst = 0.0
    for trial in range(SEEDS_PER_OPERATOR):
        rng = np.random.default_rng([seed, trial])
        params, fn = build(rng)
        projection = rng.standard_normal(fn(params).shape.as_tuple())

        with Tape() as tape:
            loss = sum_all(mul(fn(params), Tensor(projection)))
        tape.backward(loss)

        def evaluate() -> float:
            return float((fn(params).data * projection).sum())

        for param in params:
            numeric = np.zeros_like(param.value.data)
            for index in np.ndindex(*numeric.shape):
                numeric[index] = central_difference(evaluate, param.value.data, index)
            worst = max(worst, relative_error(param.grad.data, numeric))
    return CheckResult(name=name, max_error=worst, passed=worst < TOLERANCE)


def _kink_signature(tape: Tape) -> list[np.ndarray]:
    """ReLU sign patterns and max-pool winners of a recorded forward pass."""
    signature = []
    for node in tape.nodes:
        x = node.inputs[0].data
        if node.name == "relu":
            signature.append(x > 0)
        elif node.name == "maxpool2":
            n, c, h, w = x.shape
            windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            signature.append(windows.reshape(n, c, h // 2, w // 2, 4).argmax(axis=-1))
    return signature


def _layer_class(name: str) -> str:
    prefix = name.split(".")[0]
    if prefix.startswith("stage"):
        return "backbone"
    return prefix.rstrip("0123456789")


def check_model(seed: int) -> list[CheckResult]:
    """End-to-end check of the micro model on a 1x3x32x32 input, one result per layer class."""
    rng = np.random.default_rng([seed, 1_000])
    model = build_model(MICRO, seed=seed, dtype=np.float64)
    batch = Tensor(rng.standard_normal((1, 3, 32, 32)))
    labels = rng.integers(0, 2, size=(1, 32, 32))

    result = forward(model, batch, record=True)
    with result.tape:
        loss, _ = softmax_cross_entropy(result.logits, labels)
    result.tape.backward(loss)
    reference = _kink_signature(result.tape)

    def evaluate_with_signature() -> tuple[float, list[np.ndarray]]:
        trial = forward(model, batch, record=True)
        value, _ = softmax_cross_entropy(trial.logits, labels)
        return value.item(), _kink_signature(trial.tape)

    def smooth_at(array: np.ndarray, index: tuple[int, ...]) -> bool:
        original = array[index]
        try:
            for offset in (STEP, -STEP):
                array[index] = original + offset
                _, signature = evaluate_with_signature()
                if any(not np.array_equal(a, b) for a, b in zip(signature, reference)):
                    return False
            return True
        finally:
            array[index] = original

    classes: dict[str, list[Parameter]] = {}
    for param in model.parameters:
        classes.setdefault(_layer_class(param.name), []).append(param)

    results = []
    for layer_class, params in classes.items():
        chosen = rng.choice(len(params), size=min(PARAMS_PER_CLASS, len(params)), replace=False)
        worst, checked = 0.0, []
        for i in sorted(chosen):
            param = params[i]
            data = param.value.data
            analytic, numeric = [], []
            for flat in rng.permutation(data.size)[:MAX_ELEMENT_ATTEMPTS]:
                index = np.unravel_index(int(flat), data.shape)
                if not smooth_at(data, index):
                    continue
                analytic.append(param.grad.data[index])
                numeric.append(central_difference(lambda: evaluate_with_signature()[0], data, index))
                if len(analytic) == ELEMENTS_PER_PARAM:
                    break
            if analytic:
                worst = max(worst, relative_error(np.array(analytic), np.array(numeric)))
                checked.append(param.name)
        results.append(
            CheckResult(
                name=f"model:{layer_class}",
                max_error=worst,
                passed=bool(checked) and worst < TOLERANCE,
                details=", ".join(checked),
            )
        )
    return results


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    results = [check_operator(name, seed) for name in OPERATOR_CASES]
    results.extend(check_model(seed))
    for r in results:
        _LOGGER.debug(f"{r.name}: max relative error {r.max_error:.3e}")
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    frame = pd.DataFrame(
        {
            "check": [r.name for r in results],
            "max_rel_error": [f"{r.max_error:.3e}" for r in results],
            "status": ["pass" if r.passed else "FAIL" for r in results],
        }
    )
    return frame.to_string(index=False)
