"""
Skip-layer fully convolutional network for binary lesion segmentation.

The backbone is a VGG-style stack of five same-padded 3x3 convolution
stages, each closed by a 2x2 max-pool, followed by two convolutionalized
fully connected layers (fc6 7x7, fc7 1x1). A 1x1 prediction head is
attached after every pool and after fc7; each head's 2-channel score map is
upsampled back to the input size by a per-channel transposed convolution.
The six upsampled maps are fused (channel concatenation plus a 1x1 `fuse`
convolution, or an element-wise sum) into the final logits.
"""

import contextlib
import dataclasses
import functools
import logging
from typing import Any, Mapping, Sequence

import numpy as np
from PIL import Image
from pydantic import ValidationError

from skinfcn.data import normalize, pad_to_multiple
from skinfcn.errors import ConfigError, FormatError, ParameterError, ShapeError
from skinfcn.ops import (
    ConvSpec,
    DeconvSpec,
    bilinear_kernel,
    concat_channels,
    conv2d,
    maxpool2,
    relu,
    transposed_conv2d,
)
from skinfcn.schemas.architecture import STAGE_COUNT, ArchitectureConfig
from skinfcn.tensor import Parameter, Tape, Tensor, add, gaussian_init

_LOGGER = logging.getLogger(__name__)

DECONV_INITS = ("random", "bilinear")


@dataclasses.dataclass(frozen=True)
class ParameterSpec:
    name: str
    shape: tuple[int, int, int, int]
    fan_in: float | None  # None: bias, initialized to zero
    factor: int | None = None  # upsampling factor of deconv weights


def tap_channels(config: ArchitectureConfig) -> list[int]:
    """Channel count of every head tap in tap order (pool1..pool5, fc7)."""
    return [widths[-1] for widths in config.stage_widths] + [config.fc_widths[1]]


def parameter_specs(config: ArchitectureConfig) -> list[ParameterSpec]:
    """Every parameter of the network, in canonical (checkpoint) order."""
    specs: list[ParameterSpec] = []

    def conv(prefix: str, c_in: int, c_out: int, k: int, bias: bool = True) -> None:
        specs.append(ParameterSpec(f"{prefix}.weight", (c_out, c_in, k, k), float(c_in * k * k)))
        if bias:
            specs.append(ParameterSpec(f"{prefix}.bias", (1, c_out, 1, 1), None))

    c_in = config.in_channels
    for s, widths in enumerate(config.stage_widths, start=1):
        for k, width in enumerate(widths, start=1):
            conv(f"stage{s}.conv{k}", c_in, width, 3)
            c_in = width
    conv("fc6", c_in, config.fc_widths[0], 7)
    conv("fc7", config.fc_widths[0], config.fc_widths[1], 1)

    classes = config.num_classes
    for i, channels in enumerate(tap_channels(config), start=1):
        conv(f"head{i}", channels, classes, 1)
    for i, factor in enumerate(config.upsample_factors, start=1):
        size = 2 * factor
        # each output pixel receives (2f/f)^2 kernel taps from one input channel
        specs.append(ParameterSpec(f"up{i}.weight", (classes, 1, size, size), float(size * size) / (factor * factor), factor))
    if config.fusion == "concat":
        conv("fuse", config.fusion_channels, classes, 1)
    return specs


class FCNNModel:
    """Network parameters plus the per-channel input means.

    Parameters are held in canonical order and are addressable by name.
    """

    def __init__(
        self,
        config: ArchitectureConfig,
        parameters: Sequence[Parameter],
        means: Sequence[float] = (0.0, 0.0, 0.0),
    ):
        expected = [(spec.name, spec.shape) for spec in parameter_specs(config)]
        actual = [(p.name, p.shape.as_tuple()) for p in parameters]
        if actual != expected:
            raise ShapeError("parameter names/shapes do not match the architecture")
        self.config = config
        self.parameters = list(parameters)
        self._index = {p.name: p for p in self.parameters}
        self.means = means

    @property
    def means(self) -> tuple[float, float, float]:
        return self._means

    @means.setter
    def means(self, values: Sequence[float]) -> None:
        if len(values) != self.config.in_channels:
            raise ParameterError(f"expected {self.config.in_channels} channel means, got {len(values)}")
        # stored at checkpoint precision so a reloaded model normalizes identically
        self._means = tuple(float(np.float32(v)) for v in values)

    @property
    def dtype(self) -> np.dtype:
        return self.parameters[0].value.dtype

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.parameters]

    def __getitem__(self, name: str) -> Parameter:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def astype(self, dtype) -> "FCNNModel":
        """Copy of the model with parameters cast to `dtype`."""
        params = [Parameter.create(p.name, p.value.data.astype(dtype), p.trainable) for p in self.parameters]
        return FCNNModel(self.config, params, self.means)

    def __repr__(self) -> str:
        count = sum(p.shape.size for p in self.parameters)
        return f"FCNNModel(fusion={self.config.fusion}, parameters={len(self.parameters)}, values={count})"


def build_model(
    config: ArchitectureConfig | Mapping[str, Any],
    seed: int,
    dtype=np.float32,
    deconv_init: str = "random",
) -> FCNNModel:
    """Create a freshly initialized network.

    Weights are zero-mean Gaussian with std sqrt(2 / fan_in); biases start
    at zero. Every weight tensor draws from its own generator, derived from
    `seed`, so the result does not depend on creation order elsewhere.
    Transposed convolutions may instead start as exact bilinear upsamplers.
    """
    if not isinstance(config, ArchitectureConfig):
        try:
            config = ArchitectureConfig(**config)
        except ValidationError as e:
            raise ConfigError(f"invalid architecture: {e}") from e
    if deconv_init not in DECONV_INITS:
        raise ConfigError(f"unknown deconv init '{deconv_init}'; choose from {DECONV_INITS}")

    specs = parameter_specs(config)
    seeds = np.random.SeedSequence(seed).generate_state(len(specs))
    params = []
    for spec, param_seed in zip(specs, seeds):
        if spec.fan_in is None:
            data = np.zeros(spec.shape, dtype=dtype)
        elif spec.factor is not None and deconv_init == "bilinear":
            data = np.repeat(bilinear_kernel(spec.factor, dtype).data, spec.shape[0], axis=0)
        else:
            data = gaussian_init(spec.shape, np.sqrt(2.0 / spec.fan_in), int(param_seed), dtype).data
        params.append(Parameter.create(spec.name, data))
    _LOGGER.debug(f"Built model with {len(params)} parameter tensors (seed={seed})")
    return FCNNModel(config, params)


def infer_architecture(shapes: Mapping[str, Sequence[int]]) -> ArchitectureConfig:
    """Recover the architecture from parameter names and shapes."""
    stages = []
    for s in range(1, STAGE_COUNT + 1):
        widths = []
        while f"stage{s}.conv{len(widths) + 1}.weight" in shapes:
            widths.append(int(shapes[f"stage{s}.conv{len(widths) + 1}.weight"][0]))
        if not widths:
            raise FormatError("tensors", f"no convolutions found for stage {s}")
        stages.append(tuple(widths))
    try:
        fc = (int(shapes["fc6.weight"][0]), int(shapes["fc7.weight"][0]))
    except KeyError as e:
        raise FormatError("tensors", f"missing {e.args[0]}") from e
    fusion = "concat" if "fuse.weight" in shapes else "sum"
    try:
        return ArchitectureConfig(stage_widths=tuple(stages), fc_widths=fc, fusion=fusion)
    except ValidationError as e:
        raise FormatError("tensors", f"inconsistent architecture: {e}") from e


@dataclasses.dataclass
class ForwardResult:
    logits: Tensor
    heads: list[Tensor]
    fused: Tensor
    head_sizes: list[tuple[int, int]]
    tape: Tape | None = None


def forward(model: FCNNModel, batch: Tensor | np.ndarray, record: bool = False) -> ForwardResult:
    """Run the network on a normalized NCHW batch.

    With `record`, the pass is recorded on a new tape (returned in the
    result); record the loss under the same tape before calling backward.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    n, c, h, w = x.shape.as_tuple()
    config = model.config
    if c != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, got {c}")
    if h % config.input_multiple or w % config.input_multiple:
        raise ShapeError(f"input {h}x{w} is not divisible by {config.input_multiple}; pad it first")
    if x.dtype != model.dtype:
        raise ParameterError(f"batch dtype {x.dtype} does not match model dtype {model.dtype}")

    tape = Tape() if record else None
    with tape if tape is not None else contextlib.nullcontext():
        result = _forward(model, x)
    result.tape = tape
    return result


def _forward(model: FCNNModel, x: Tensor) -> ForwardResult:
    config = model.config
    taps = []
    hidden, c_in = x, config.in_channels
    for s, widths in enumerate(config.stage_widths, start=1):
        for k, width in enumerate(widths, start=1):
            prefix = f"stage{s}.conv{k}"
            hidden = relu(conv2d(hidden, model[f"{prefix}.weight"], model[f"{prefix}.bias"], ConvSpec.same(c_in, width, 3)))
            c_in = width
        hidden = maxpool2(hidden)
        taps.append(hidden)
    fc6, fc7 = config.fc_widths
    hidden = relu(conv2d(hidden, model["fc6.weight"], model["fc6.bias"], ConvSpec.same(c_in, fc6, 7)))
    hidden = relu(conv2d(hidden, model["fc7.weight"], model["fc7.bias"], ConvSpec.same(fc6, fc7, 1)))
    taps.append(hidden)

    classes = config.num_classes
    heads, sizes = [], []
    for i, (tap, factor) in enumerate(zip(taps, config.upsample_factors), start=1):
        sizes.append((tap.shape.h, tap.shape.w))
        score = conv2d(tap, model[f"head{i}.weight"], model[f"head{i}.bias"], ConvSpec.same(tap.shape.c, classes, 1))
        heads.append(transposed_conv2d(score, model[f"up{i}.weight"], DeconvSpec(classes, factor)))

    if config.fusion == "concat":
        fused = concat_channels(heads)
        logits = conv2d(fused, model["fuse.weight"], model["fuse.bias"], ConvSpec.same(config.fusion_channels, classes, 1))
    else:
        fused = functools.reduce(add, heads)
        logits = fused
    return ForwardResult(logits=logits, heads=heads, fused=fused, head_sizes=sizes)


def predict_mask(logits: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax over (skin, lesion) as a uint8 (n, h, w) grid; lesion wins ties."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if z.ndim != 4 or z.shape[1] != 2:
        raise ShapeError(f"expected (n, 2, h, w) logits, got {z.shape}")
    return (z[:, 1] >= z[:, 0]).astype(np.uint8)


def segment_image(model: FCNNModel, image: np.ndarray, size: int | None = None) -> np.ndarray:
    """Binary mask (h, w) for one uint8 RGB image of any size.

    By default the image is reflect-padded up to a multiple of 32 and the
    logits cropped back. With `size`, the image is resized to size x size
    and the mask resized back with nearest-neighbour.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an (h, w, 3) RGB image, got {image.shape}")
    h, w = image.shape[:2]
    if size is not None:
        if size % model.config.input_multiple:
            raise ParameterError(f"size {size} is not divisible by {model.config.input_multiple}")
        resized = np.asarray(Image.fromarray(image).resize((size, size), Image.Resampling.BILINEAR))
        mask = _predict_padded(model, resized)
        return np.asarray(Image.fromarray(mask).resize((w, h), Image.Resampling.NEAREST))
    padded = pad_to_multiple(image, model.config.input_multiple)
    return _predict_padded(model, padded)[:h, :w]


def _predict_padded(model: FCNNModel, image: np.ndarray) -> np.ndarray:
    batch = image.transpose(2, 0, 1)[None].astype(model.dtype)
    result = forward(model, normalize(Tensor(batch), model.means))
    return predict_mask(result.logits)[0]
