"""
Differentiable operators of the segmentation network.

Each operator computes its forward result with numpy and hands a backward
rule to `skinfcn.tensor.emit`. Backward math lives in module-level
functions (`_conv2d_backward`, `_relu_backward`, ...).
"""

import dataclasses
import logging
from typing import Sequence

import numpy as np

from skinfcn.errors import DataError, ParameterError, ShapeError
from skinfcn.parallel import parallel_map
from skinfcn.tensor import Tensor, TensorLike, emit, unwrap

_LOGGER = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int) -> "ConvSpec":
        """Stride-1 convolution with an odd square kernel that keeps the spatial size."""
        return cls(in_channels, out_channels, (kernel, kernel), (1, 1), (kernel // 2, kernel // 2))

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.pad
        span_h, span_w = h + 2 * ph - kh, w + 2 * pw - kw
        if span_h < 0 or span_w < 0 or span_h % sh or span_w % sw:
            raise ShapeError(
                f"conv geometry kernel={self.kernel} stride={self.stride} pad={self.pad} "
                f"does not tile input {h}x{w}"
            )
        return span_h // sh + 1, span_w // sw + 1


@dataclasses.dataclass(frozen=True)
class DeconvSpec:
    """Per-channel upsampling by `factor` (kernel 2f, stride f, pad f/2)."""

    channels: int
    factor: int

    def __post_init__(self):
        if self.factor < 2 or self.factor % 2:
            raise ParameterError(f"upsampling factor must be even and >= 2, got {self.factor}")

    @property
    def kernel(self) -> int:
        return 2 * self.factor

    @property
    def stride(self) -> int:
        return self.factor

    @property
    def pad(self) -> int:
        return self.factor // 2


def _im2col(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Patches of one padded (C, Hp, Wp) sample as a (C*kh*kw, ho*wo) matrix."""
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    c = xp.shape[0]
    s_c, s_h, s_w = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(s_c, s_h, s_w, sh * s_h, sw * s_w),
        writeable=False,
    )
    return patches.reshape(c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape: tuple[int, int, int], spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    c, hp, wp = padded_shape
    cols = cols.reshape(c, kh, kw, ho, wo)
    image = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            image[:, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, i, j]
    return image


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x: TensorLike, weight: TensorLike, bias: TensorLike | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation of `x` with `weight` (out, in, kh, kw) plus `bias` (1, out, 1, 1)."""
    x_t, w_t = unwrap(x), unwrap(weight)
    b_t = unwrap(bias) if bias is not None else None
    n, c, h, w = x_t.shape.as_tuple()
    kh, kw = spec.kernel
    if c != spec.in_channels:
        raise ShapeError(f"conv2d expects {spec.in_channels} input channels, got {c}")
    expected = (spec.out_channels, spec.in_channels, kh, kw)
    if w_t.shape.as_tuple() != expected:
        raise ShapeError(f"conv2d weight shape {w_t.shape.as_tuple()} != {expected}")
    if b_t is not None and b_t.shape.as_tuple() != (1, spec.out_channels, 1, 1):
        raise ShapeError(f"conv2d bias shape {b_t.shape.as_tuple()} != (1, {spec.out_channels}, 1, 1)")
    ho, wo = spec.output_size(h, w)

    xp = _pad(x_t.data, *spec.pad)
    w_mat = w_t.data.reshape(spec.out_channels, -1)

    def forward_one(i: int) -> np.ndarray:
        return w_mat @ _im2col(xp[i], spec, ho, wo)

    out = np.stack(parallel_map(forward_one, range(n))).reshape(n, spec.out_channels, ho, wo)
    if b_t is not None:
        out = out + b_t.data
    inputs = (x_t, w_t) if b_t is None else (x_t, w_t, b_t)

    def rule(g: np.ndarray):
        dx, dw, db = _conv2d_backward(xp, w_t.data, g, spec, (h, w))
        return (dx, dw) if b_t is None else (dx, dw, db)

    return emit("conv2d", inputs, out, rule)


def _conv2d_backward(
    xp: np.ndarray, weight: np.ndarray, g: np.ndarray, spec: ConvSpec, size: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, _, ho, wo = g.shape
    c, hp, wp = xp.shape[1:]
    ph, pw = spec.pad
    h, w = size
    w_mat = weight.reshape(spec.out_channels, -1)

    def backward_one(i: int) -> tuple[np.ndarray, np.ndarray]:
        cols = _im2col(xp[i], spec, ho, wo)
        g_mat = g[i].reshape(spec.out_channels, -1)
        dx_padded = _col2im(w_mat.T @ g_mat, (c, hp, wp), spec, ho, wo)
        return g_mat @ cols.T, dx_padded[:, ph:ph + h, pw:pw + w]

    partials = parallel_map(backward_one, range(n))
    dw = partials[0][0].copy()
    for dw_i, _ in partials[1:]:
        dw += dw_i
    dx = np.stack([dx_i for _, dx_i in partials])
    db = g.sum(axis=(0, 2, 3)).reshape(1, spec.out_channels, 1, 1)
    return dx, dw.reshape(weight.shape), db


def maxpool2(x: TensorLike) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element in row-major order."""
    x_t = unwrap(x)
    n, c, h, w = x_t.shape.as_tuple()
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {h}x{w}")
    windows = (
        x_t.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    winners = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winners[..., None], axis=-1)[..., 0]
    return emit("maxpool2", (x_t,), out, lambda g: (_maxpool2_backward(winners, g),))


def _maxpool2_backward(winners: np.ndarray, g: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = g.shape
    routed = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
    np.put_along_axis(routed, winners[..., None], g[..., None], axis=-1)
    return routed.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def relu(x: TensorLike) -> Tensor:
    x_t = unwrap(x)
    out = np.maximum(x_t.data, x_t.dtype.type(0))
    return emit("relu", (x_t,), out, lambda g: (_relu_backward(x_t.data, g),))


def _relu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return g * (x > 0)


def _kernel_quadrants(weight: np.ndarray, f: int) -> np.ndarray:
    """(C, 1, 2f, 2f) kernels as (2, 2, C, f, f) quadrants: q[a, b, c] = K[c, a*f:, b*f:]."""
    c = weight.shape[0]
    return weight[:, 0].reshape(c, 2, f, 2, f).transpose(1, 3, 0, 2, 4)


def transposed_conv2d(x: TensorLike, weight: TensorLike, spec: DeconvSpec) -> Tensor:
    """Per-channel transposed convolution; output is exactly `spec.factor` times the input size.

    Every input pixel scatters x * K into a 2f x 2f window of the padded
    output at stride f; f/2 pixels are then cropped from each side.
    """
    x_t, w_t = unwrap(x), unwrap(weight)
    n, c, h, w = x_t.shape.as_tuple()
    f = spec.factor
    if c != spec.channels:
        raise ShapeError(f"transposed_conv2d expects {spec.channels} channels, got {c}")
    expected = (spec.channels, 1, spec.kernel, spec.kernel)
    if w_t.shape.as_tuple() != expected:
        raise ShapeError(f"transposed_conv2d weight shape {w_t.shape.as_tuple()} != {expected}")

    quadrants = _kernel_quadrants(w_t.data, f)
    tiles = np.zeros((n, c, h + 1, w + 1, f, f), dtype=np.result_type(x_t.dtype, w_t.dtype))
    for a in range(2):
        for b in range(2):
            tiles[:, :, a:a + h, b:b + w] += x_t.data[..., None, None] * quadrants[a, b][None, :, None, None]
    full = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, (h + 1) * f, (w + 1) * f)
    p = spec.pad
    out = full[:, :, p:p + h * f, p:p + w * f]
    return emit(
        "transposed_conv2d",
        (x_t, w_t),
        out,
        lambda g: _transposed_conv2d_backward(x_t.data, quadrants, g, f),
    )


def _transposed_conv2d_backward(
    x: np.ndarray, quadrants: np.ndarray, g: np.ndarray, f: int
) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    p = f // 2
    full = np.zeros((n, c, (h + 1) * f, (w + 1) * f), dtype=g.dtype)
    full[:, :, p:p + h * f, p:p + w * f] = g
    g_tiles = full.reshape(n, c, h + 1, f, w + 1, f).transpose(0, 1, 2, 4, 3, 5)

    dx = np.zeros(x.shape, dtype=g.dtype)
    dq = np.zeros(quadrants.shape, dtype=g.dtype)
    for a in range(2):
        for b in range(2):
            window = g_tiles[:, :, a:a + h, b:b + w]
            dx += np.einsum("ncijuv,cuv->ncij", window, quadrants[a, b])
            dq[a, b] = np.einsum("ncij,ncijuv->cuv", x, window)
    dw = dq.transpose(2, 0, 3, 1, 4).reshape(c, 1, 2 * f, 2 * f)
    return dx, dw


def bilinear_kernel(f: int, dtype=np.float32) -> Tensor:
    """Separable bilinear upsampling kernel of size 2f x 2f as a (1, 1, 2f, 2f) tensor."""
    if int(f) != f or f < 2 or f % 2:
        raise ParameterError(f"bilinear kernel factor must be even and >= 2, got {f}")
    taps = 1.0 - np.abs(np.arange(2 * f) + 0.5 - f) / f
    return Tensor(np.outer(taps, taps).astype(dtype)[None, None])


def concat_channels(inputs: Sequence[TensorLike]) -> Tensor:
    """Stack tensors along the channel axis in the given order."""
    if not inputs:
        raise ParameterError("concat_channels needs at least one input")
    tensors = [unwrap(t) for t in inputs]
    n, _, h, w = tensors[0].shape.as_tuple()
    for t in tensors[1:]:
        if (t.shape.n, t.shape.h, t.shape.w) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape.as_tuple()} does not match batch/spatial ({n}, {h}, {w})")
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([t.shape.c for t in tensors])[:-1]
    return emit("concat_channels", tensors, out, lambda g: tuple(np.split(g, offsets, axis=1)))


def softmax_cross_entropy(logits: TensorLike, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Mean per-pixel softmax loss over the channel axis.

    Returns the scalar loss (recorded) and the class probabilities (not recorded).
    """
    z_t = unwrap(logits)
    n, c, h, w = z_t.shape.as_tuple()
    labels = np.asarray(labels)
    if c != 2:
        raise ShapeError(f"softmax_cross_entropy expects 2 class channels, got {c}")
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 (skin) or 1 (lesion)")

    z = z_t.data
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    probs = exp / denom
    log_probs = shifted - np.log(denom)
    onehot = (labels[:, None] == np.arange(c)[None, :, None, None]).astype(z.dtype)
    count = n * h * w
    loss = -(log_probs * onehot).sum() / count

    loss_t = emit(
        "softmax_cross_entropy",
        (z_t,),
        np.asarray(loss, dtype=z.dtype).reshape(1, 1, 1, 1),
        lambda g: (_softmax_cross_entropy_backward(probs, onehot, g, count),),
    )
    return loss_t, Tensor(probs)


def _softmax_cross_entropy_backward(probs: np.ndarray, onehot: np.ndarray, g: np.ndarray, count: int) -> np.ndarray:
    return g.reshape(()) * (probs - onehot) / count
