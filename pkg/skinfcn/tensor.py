"""
Rank-4 tensors, learnable parameters and the reverse-mode tape.

Tensors wrap an NCHW numpy array (float32 for training and inference,
float64 for gradient checking). Every operator goes through `emit`, which
wraps the result, enforces the finite-value policy and, when a `Tape` is
active, records the backward rule. `Tape.backward` replays the rules in
reverse recording order and accumulates into `Parameter.grad`.
"""

import contextvars
import dataclasses
import logging
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from skinfcn.errors import ContractError, NumericError, ParameterError, ShapeError

_LOGGER = logging.getLogger(__name__)

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_check_finite = os.getenv("SKINFCN_CHECK_FINITE", "0").lower() in ("1", "true")


def set_check_finite(enabled: bool) -> None:
    """Turn the NaN/Inf check on every operator output on or off."""
    global _check_finite
    _check_finite = enabled


def check_finite_enabled() -> bool:
    return _check_finite


@dataclasses.dataclass(frozen=True)
class Shape:
    """Batch x channel x height x width extents."""

    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for axis in ("n", "c", "h", "w"):
            value = getattr(self, axis)
            if int(value) != value or value < 1:
                raise ShapeError(f"dimension {axis}={value} must be a positive integer")

    @classmethod
    def of(cls, dims: "Shape | Sequence[int]") -> "Shape":
        if isinstance(dims, Shape):
            return dims
        dims = tuple(int(d) for d in dims)
        if len(dims) != 4:
            raise ShapeError(f"expected 4 dimensions (n, c, h, w), got {dims}")
        return cls(*dims)

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)


class Tensor:
    """An NCHW array.

    The tensor takes ownership of `data`. Operator outputs are frozen
    (read-only); parameter buffers stay writable so the optimizer can
    update them in place.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray, *, frozen: bool = True):
        array = np.asarray(data)
        if array.ndim != 4:
            raise ShapeError(f"tensors are rank 4 (n, c, h, w), got shape {array.shape}")
        if array.dtype not in SUPPORTED_DTYPES:
            raise ParameterError(f"unsupported precision {array.dtype}; use float32 or float64")
        Shape.of(array.shape)
        if frozen:
            array.flags.writeable = False
        self.data = array

    @property
    def shape(self) -> Shape:
        return Shape.of(self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape.as_tuple()}, dtype={self.dtype})"


@dataclasses.dataclass
class Parameter:
    """A named learnable tensor with its gradient accumulator."""

    name: str
    value: Tensor
    grad: Tensor
    trainable: bool = True

    def __post_init__(self):
        if self.value.shape != self.grad.shape:
            raise ShapeError(
                f"parameter '{self.name}': grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @classmethod
    def create(cls, name: str, data: np.ndarray, trainable: bool = True) -> "Parameter":
        value = Tensor(np.array(data), frozen=False)
        grad = Tensor(np.zeros_like(value.data), frozen=False)
        return cls(name=name, value=value, grad=grad, trainable=trainable)

    @property
    def shape(self) -> Shape:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.data[...] = 0


TensorLike = Tensor | Parameter
BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclasses.dataclass
class TapeNode:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "skinfcn_active_tape", default=None
)


class Tape:
    """Define-by-run record of the operations of one forward pass.

    Use as a context manager; operators executed inside the block are
    recorded. A tape supports exactly one `backward` call.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._watched: dict[int, Parameter] = {}
        self._consumed = False
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise ContractError("this tape was already replayed; record a new forward pass")
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def watch(self, param: Parameter) -> None:
        self._watched[id(param.value)] = param

    def record(self, name: str, inputs: Iterable[Tensor], output: Tensor, rule: BackwardRule) -> None:
        if self._consumed:
            raise ContractError("cannot record onto a tape that was already replayed")
        self.nodes.append(TapeNode(name=name, inputs=tuple(inputs), output=output, backward=rule))

    def backward(self, loss: Tensor) -> None:
        """Fill `grad` of every watched trainable parameter with d(loss)/d(parameter)."""
        if self._consumed:
            raise ContractError("backward already ran on this tape; record a new forward pass")
        if loss.shape != Shape(1, 1, 1, 1):
            raise ContractError(f"loss must be a scalar tensor (1, 1, 1, 1), got {loss.shape.as_tuple()}")
        if not any(node.output is loss for node in self.nodes):
            raise ContractError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            contributions = node.backward(upstream)
            for tensor, grad in zip(node.inputs, contributions):
                if grad is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        for key, param in self._watched.items():
            grad = grads.get(key)
            if grad is not None and param.trainable:
                param.grad.data += grad
        _LOGGER.debug(f"Replayed {len(self.nodes)} tape nodes into {len(self._watched)} parameters")


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(tape: Tape, loss: Tensor) -> None:
    """Replay `tape` from `loss`; see `Tape.backward`."""
    tape.backward(loss)


def unwrap(x: TensorLike) -> Tensor:
    """Return the tensor behind `x`, registering parameters with the active tape."""
    if isinstance(x, Parameter):
        tape = active_tape()
        if tape is not None:
            tape.watch(x)
        return x.value
    return x


def emit(name: str, inputs: Sequence[Tensor], output: np.ndarray, rule: BackwardRule) -> Tensor:
    """Wrap an operator result, apply the finite policy and record it."""
    result = Tensor(np.ascontiguousarray(output))
    if _check_finite and not np.all(np.isfinite(result.data)):
        raise NumericError(f"{name} produced non-finite values")
    tape = active_tape()
    if tape is not None:
        tape.record(name, inputs, result, rule)
    return result


def tensor_full(shape: Shape | Sequence[int], fill: float, dtype=np.float32) -> Tensor:
    shape = Shape.of(shape)
    return Tensor(np.full(shape.as_tuple(), fill, dtype=dtype))


def gaussian_init(shape: Shape | Sequence[int], std: float, seed: int, dtype=np.float32) -> Tensor:
    """Zero-mean Gaussian samples from a generator seeded with `seed`."""
    if not std > 0:
        raise ParameterError(f"std must be > 0, got {std}")
    shape = Shape.of(shape)
    rng = np.random.default_rng(seed)
    samples = rng.standard_normal(shape.as_tuple()) * std
    return Tensor(samples.astype(dtype))


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ {a.shape.as_tuple()} vs {b.shape.as_tuple()}")


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = unwrap(a), unwrap(b)
    _same_shape("add", a, b)
    return emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = unwrap(a), unwrap(b)
    _same_shape("mul", a, b)
    return emit("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def sum_all(a: TensorLike) -> Tensor:
    a = unwrap(a)
    total = a.data.sum(dtype=a.dtype).reshape(1, 1, 1, 1)
    return emit("sum_all", (a,), total, lambda g: (np.broadcast_to(g.reshape(()), a.data.shape),))
