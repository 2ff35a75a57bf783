"""
Binary checkpoint codec.

Layout (little-endian)::

    magic "FCNW" | version u32 | tensor count u32
    per tensor: name length u16, UTF-8 name, rank u8, dims u32 x rank, f32 data
    trailer: means 3 x f32 | velocity count u32 | velocity tensors (same encoding)

Writes go to a temporary file that replaces the target under a
`<path>.lock` file lock, so readers never observe a partial file.
"""

import dataclasses
import io
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from filelock import FileLock

from skinfcn.errors import DataError, FormatError
from skinfcn.model import FCNNModel, infer_architecture, parameter_specs
from skinfcn.optim import SgdState
from skinfcn.tensor import Parameter

_LOGGER = logging.getLogger(__name__)

MAGIC = b"FCNW"
VERSION = 1
MEAN_COUNT = 3
MAX_RANK = 8


@dataclasses.dataclass
class CheckpointContents:
    tensors: dict[str, np.ndarray]
    means: tuple[float, ...]
    velocities: dict[str, np.ndarray]


@dataclasses.dataclass
class ImportReport:
    """Outcome of a (possibly partial) weight import."""

    loaded: list[str]
    missing: list[str]
    skipped: list[str]

    @property
    def complete(self) -> bool:
        return not self.missing and not self.skipped


def _encode_tensor(buffer: io.BytesIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buffer.write(struct.pack("<H", len(encoded)))
    buffer.write(encoded)
    buffer.write(struct.pack("<B", array.ndim))
    buffer.write(struct.pack(f"<{array.ndim}I", *array.shape))
    buffer.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def encode_checkpoint(
    tensors: Iterable[tuple[str, np.ndarray]],
    means: Sequence[float],
    velocities: Iterable[tuple[str, np.ndarray]] = (),
) -> bytes:
    tensors, velocities = list(tensors), list(velocities)
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<II", VERSION, len(tensors)))
    for name, array in tensors:
        _encode_tensor(buffer, name, array)
    buffer.write(np.asarray(means, dtype="<f4").tobytes())
    buffer.write(struct.pack("<I", len(velocities)))
    for name, array in velocities:
        _encode_tensor(buffer, name, array)
    return buffer.getvalue()


def write_checkpoint(
    path: str | Path,
    tensors: Iterable[tuple[str, np.ndarray]],
    means: Sequence[float],
    velocities: Iterable[tuple[str, np.ndarray]] = (),
) -> None:
    path = Path(path)
    payload = encode_checkpoint(tensors, means, velocities)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(f"{path}.lock"):
            fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(payload)
                os.replace(tmp_name, path)
            except BaseException:
                Path(tmp_name).unlink(missing_ok=True)
                raise
    except OSError as e:
        raise DataError(f"cannot write checkpoint: {e}", str(path)) from e
    _LOGGER.debug(f"Wrote {len(payload)} bytes to {path}")


def save_checkpoint(model: FCNNModel, state: SgdState | None, path: str | Path) -> None:
    """Persist parameters, input means and (optionally) momentum buffers."""
    velocities = []
    if state is not None:
        velocities = [(p.name, state.velocity[p.name]) for p in model.parameters if p.name in state.velocity]
    write_checkpoint(path, ((p.name, p.value.data) for p in model.parameters), model.means, velocities)


class _Reader:
    def __init__(self, payload: bytes, path: str | None):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, size: int, field: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise FormatError(field, f"truncated at byte {self.offset} (need {size} more bytes)", self.path)
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, field: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    def tensor(self, label: str) -> tuple[str, np.ndarray]:
        (length,) = self.unpack("<H", f"{label}.name")
        try:
            name = self.take(length, f"{label}.name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{label}.name", "not valid UTF-8", self.path) from e
        (rank,) = self.unpack("<B", f"{label}.rank")
        if not 1 <= rank <= MAX_RANK:
            raise FormatError(f"{label}.rank", f"rank {rank} out of range", self.path)
        dims = self.unpack(f"<{rank}I", f"{label}.dims")
        if any(d == 0 for d in dims):
            raise FormatError(f"{label}.dims", f"zero extent in {dims}", self.path)
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(self.take(4 * count, f"{label}.data"), dtype="<f4")
        return name, data.reshape(dims).astype(np.float32)


def decode_checkpoint(payload: bytes, path: str | None = None) -> CheckpointContents:
    reader = _Reader(payload, path)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}", path)
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}", path)
    (count,) = reader.unpack("<I", "tensor_count")

    def read_tensors(total: int, prefix: str) -> dict[str, np.ndarray]:
        result: dict[str, np.ndarray] = {}
        for i in range(total):
            name, array = reader.tensor(f"{prefix}[{i}]")
            if name in result:
                raise FormatError(f"{prefix}[{i}].name", f"duplicate name '{name}'", path)
            result[name] = array
        return result

    tensors = read_tensors(count, "tensor")
    means = tuple(float(m) for m in np.frombuffer(reader.take(4 * MEAN_COUNT, "means"), dtype="<f4"))
    (velocity_count,) = reader.unpack("<I", "velocity_count")
    velocities = read_tensors(velocity_count, "velocity")
    if reader.offset != len(payload):
        raise FormatError("trailer", f"{len(payload) - reader.offset} unexpected trailing bytes", path)
    return CheckpointContents(tensors=tensors, means=means, velocities=velocities)


def read_checkpoint(path: str | Path) -> CheckpointContents:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint: {e}", str(path)) from e
    return decode_checkpoint(payload, str(path))


def _name_mismatch(field: str, expected: Sequence[str], actual: Iterable[str], path: str | None) -> FormatError:
    expected_set, actual_set = set(expected), set(actual)
    unknown = sorted(actual_set - expected_set)
    missing = sorted(expected_set - actual_set)
    return FormatError(field, f"unknown tensors {unknown}, missing tensors {missing}", path)


def model_from_contents(contents: CheckpointContents, path: str | None = None) -> tuple[FCNNModel, SgdState | None]:
    shapes = {name: array.shape for name, array in contents.tensors.items()}
    config = infer_architecture(shapes)
    specs = parameter_specs(config)
    names = [spec.name for spec in specs]
    if set(names) != set(contents.tensors):
        raise _name_mismatch("tensors", names, contents.tensors, path)
    for spec in specs:
        if shapes[spec.name] != spec.shape:
            raise FormatError("tensors", f"'{spec.name}' has shape {shapes[spec.name]}, expected {spec.shape}", path)
    model = FCNNModel(config, [Parameter.create(name, contents.tensors[name]) for name in names], contents.means)

    state = None
    if contents.velocities:
        if set(contents.velocities) != set(names):
            raise _name_mismatch("velocity", names, contents.velocities, path)
        for name in names:
            if contents.velocities[name].shape != shapes[name]:
                raise FormatError("velocity", f"'{name}' velocity shape does not match its parameter", path)
        state = SgdState(velocity={name: contents.velocities[name].copy() for name in names})
    return model, state


def load_checkpoint(path: str | Path) -> tuple[FCNNModel, SgdState | None]:
    """Rebuild the model (architecture inferred from the tensors) and its optimizer state."""
    model, state = model_from_contents(read_checkpoint(path), str(path))
    _LOGGER.info(f"Loaded checkpoint {path} ({model!r})")
    return model, state


def import_weights(
    model: FCNNModel,
    source: str | Path | CheckpointContents | Mapping[str, np.ndarray],
    permissive: bool = False,
) -> ImportReport:
    """Copy matching tensors from `source` into `model` in place.

    Tensors whose name is unknown to the model, or whose shape differs, are
    skipped; model parameters absent from the source keep their current
    values. Unless `permissive`, anything short of a complete import
    raises FormatError (and leaves the model untouched).
    """
    path = None
    if isinstance(source, (str, Path)):
        path = str(source)
        tensors = read_checkpoint(source).tensors
    elif isinstance(source, CheckpointContents):
        tensors = source.tensors
    else:
        tensors = dict(source)

    loaded, skipped = [], []
    for name, array in tensors.items():
        if name in model and model[name].shape.as_tuple() == tuple(array.shape):
            loaded.append(name)
        else:
            skipped.append(name)
    missing = [name for name in model.names if name not in tensors or name in skipped]
    report = ImportReport(loaded=loaded, missing=missing, skipped=skipped)

    if not permissive and not report.complete:
        raise FormatError("tensors", f"incomplete import: missing {missing}, skipped {skipped}", path)
    for name in loaded:
        model[name].value.data[...] = tensors[name]
    if missing:
        _LOGGER.warning(f"{len(missing)} parameter(s) keep their initialization: {', '.join(missing)}")
    if skipped:
        _LOGGER.warning(f"Skipped {len(skipped)} tensor(s) not matching the model: {', '.join(skipped)}")
    return report
