"""
Dataset ingestion: manifests, image/mask decoding, resizing, normalization
and epoch batching.

Manifests are headerless tab-separated files with one
`id<TAB>image_path<TAB>mask_path` line per sample; relative paths resolve
against the manifest's directory. Masks are 8-bit grayscale PNGs holding
255 for lesion and 0 for skin; in memory they are {0, 1} uint8 grids.
"""

import collections
import dataclasses
import logging
import os
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from skinfcn.errors import DataError, ParameterError
from skinfcn.tensor import Tensor

_LOGGER = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["id", "image", "mask"]
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_SUFFIXES = ("_mask", "_segmentation")
OVERLAY_SUFFIX = "_overlay"
LESION_THRESHOLD = 128


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: Path
    mask: Path


@dataclasses.dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str = "train"

    def __post_init__(self):
        counts = collections.Counter(e.id for e in self.entries)
        duplicates = sorted(id_ for id_, n in counts.items() if n > 1)
        if duplicates:
            raise DataError(f"duplicate sample ids in manifest: {', '.join(duplicates)}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __getitem__(self, index: int) -> ManifestEntry:
        return self.entries[index]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]


def read_manifest(path: str | Path, split: str = "train", check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        frame = pd.read_csv(
            path,
            sep="\t",
            header=None,
            names=MANIFEST_COLUMNS,
            dtype=str,
            keep_default_na=False,
        )
    except pd.errors.EmptyDataError:
        return DatasetManifest(entries=[], split=split)
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"cannot read manifest: {e}", str(path)) from e

    if frame.isna().any().any() or (frame == "").any().any():
        raise DataError("every manifest line needs id, image and mask columns", str(path))
    base = path.parent
    entries = [
        ManifestEntry(id=row.id, image=base / row.image, mask=base / row.mask)
        for row in frame.itertuples(index=False)
    ]
    if check_paths:
        for entry in entries:
            for file in (entry.image, entry.mask):
                if not file.is_file():
                    raise DataError(f"file listed for sample '{entry.id}' does not exist", str(file))
    return DatasetManifest(entries=entries, split=split)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    base = path.parent
    frame = pd.DataFrame(
        [(e.id, os.path.relpath(e.image, base), os.path.relpath(e.mask, base)) for e in manifest],
        columns=MANIFEST_COLUMNS,
    )
    try:
        frame.to_csv(path, sep="\t", header=False, index=False, lineterminator="\n")
    except OSError as e:
        raise DataError(f"cannot write manifest: {e}", str(path)) from e


def _open_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            img.load()
            return img
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot decode image: {e}", str(path)) from e


def read_rgb(path: str | Path) -> np.ndarray:
    """Decode an 8-bit RGB image as an (h, w, 3) uint8 array."""
    img = _open_image(path)
    if img.mode != "RGB":
        raise DataError(f"expected an 8-bit RGB image, got mode {img.mode}", str(path))
    return np.asarray(img)


def _read_gray(path: str | Path) -> np.ndarray:
    img = _open_image(path)
    if img.mode == "1":
        img = img.convert("L")
    if img.mode != "L":
        raise DataError(f"expected an 8-bit grayscale mask, got mode {img.mode}", str(path))
    return np.asarray(img)


def encode_mask_png(mask: np.ndarray, path: str | Path) -> None:
    """Write a {0, 1} grid as a {0, 255} grayscale PNG."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise DataError("mask must be a 2-D grid of 0/1 values", str(path))
    try:
        Image.fromarray((mask * 255).astype(np.uint8)).save(path, format="PNG")
    except OSError as e:
        raise DataError(f"cannot write mask: {e}", str(path)) from e


def decode_mask_png(path: str | Path) -> np.ndarray:
    """Read a {0, 255} grayscale PNG as a {0, 1} uint8 grid."""
    raw = _read_gray(path)
    if not np.isin(raw, (0, 255)).all():
        raise DataError("mask holds values other than 0 and 255", str(path))
    return (raw == 255).astype(np.uint8)


def binarize_mask(raw: np.ndarray, path: str | Path | None = None) -> np.ndarray:
    """Map a grayscale mask to {0, 1}.

    Masks with values outside {0, 255} are thresholded at 128 with a
    warning; more than two distinct values is an error.
    """
    source = None if path is None else str(path)
    values = np.unique(raw)
    if len(values) > 2:
        raise DataError(f"mask is not binary ({len(values)} distinct values)", source)
    if not np.isin(values, (0, 255)).all():
        _LOGGER.warning(f"Mask values {values.tolist()} are not 0/255; thresholding at {LESION_THRESHOLD} ({source})")
    return (raw >= LESION_THRESHOLD).astype(np.uint8)


def _target_size(target: int | Sequence[int]) -> tuple[int, int]:
    if isinstance(target, int):
        return target, target
    h, w = target
    return int(h), int(w)


@dataclasses.dataclass
class Sample:
    image: Tensor  # (1, 3, h, w) float32, raw 0-255 values
    mask: np.ndarray  # (h, w) uint8 in {0, 1}
    id: str


def load_sample(
    image_path: str | Path,
    mask_path: str | Path,
    target: int | Sequence[int],
    id: str | None = None,
) -> Sample:
    """Decode and resize one image/mask pair (bilinear image, nearest mask)."""
    h, w = _target_size(target)
    image = Image.fromarray(read_rgb(image_path))
    mask = Image.fromarray(binarize_mask(_read_gray(mask_path), mask_path))
    if image.size != mask.size:
        raise DataError(f"image {image.size} and mask {mask.size} sizes differ", str(mask_path))
    if image.size != (w, h):
        image = image.resize((w, h), Image.Resampling.BILINEAR)
        mask = mask.resize((w, h), Image.Resampling.NEAREST)
    pixels = np.asarray(image, dtype=np.float32).transpose(2, 0, 1)[None]
    return Sample(image=Tensor(pixels), mask=np.asarray(mask, dtype=np.uint8), id=id or mask_id(image_path))


def normalize(batch: Tensor, means: Sequence[float]) -> Tensor:
    """Subtract per-channel means; no further scaling."""
    offsets = np.asarray(means, dtype=batch.dtype).reshape(1, -1, 1, 1)
    if offsets.shape[1] != batch.shape.c:
        raise ParameterError(f"{offsets.shape[1]} means for {batch.shape.c} channels")
    return Tensor(batch.data - offsets)


def pad_to_multiple(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    """Reflect-pad an (h, w, c) image at the bottom and right up to a multiple of `multiple`."""
    h, w = image.shape[:2]
    pad_h, pad_w = -h % multiple, -w % multiple
    if pad_h == 0 and pad_w == 0:
        return image
    return np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")


class SegmentationDataset:
    """Samples of a manifest, decoded on first access and optionally cached."""

    def __init__(self, manifest: DatasetManifest, target: int | Sequence[int], cache: bool = True):
        self.manifest = manifest
        self.target = _target_size(target)
        self.cache = cache
        self._samples: dict[int, Sample] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, index: int) -> Sample:
        if index in self._samples:
            return self._samples[index]
        entry = self.manifest[index]
        sample = load_sample(entry.image, entry.mask, self.target, entry.id)
        if self.cache:
            self._samples[index] = sample
        return sample

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))


def compute_channel_means(samples: Iterable[Sample]) -> tuple[float, float, float]:
    """Per-channel mean over every pixel of every sample."""
    totals = np.zeros(3, dtype=np.float64)
    count = 0
    for sample in samples:
        totals += sample.image.data.sum(axis=(0, 2, 3), dtype=np.float64)
        count += sample.image.shape.h * sample.image.shape.w
    if count == 0:
        raise DataError("cannot compute channel means of an empty dataset")
    r, g, b = (totals / count).tolist()
    return r, g, b


@dataclasses.dataclass
class Batch:
    images: Tensor  # normalized (n, 3, h, w)
    labels: np.ndarray  # (n, h, w) uint8
    ids: list[str]


def batch_order(count: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index groups of one epoch; the shuffle depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(count)
    return [order[start:start + batch_size] for start in range(0, count, batch_size)]


def make_batches(
    dataset: SegmentationDataset,
    batch_size: int,
    seed: int,
    epoch: int,
    means: Sequence[float],
) -> Iterator[Batch]:
    """Shuffled, normalized batches of one epoch; the last batch may be short."""
    if len(dataset) == 0:
        raise DataError("cannot batch an empty dataset")
    groups = batch_order(len(dataset), batch_size, seed, epoch)

    def batches() -> Iterator[Batch]:
        for group in groups:
            samples = [dataset[int(i)] for i in group]
            images = Tensor(np.concatenate([s.image.data for s in samples]))
            yield Batch(
                images=normalize(images, means),
                labels=np.stack([s.mask for s in samples]),
                ids=[s.id for s in samples],
            )

    return batches()


def mask_id(path: str | Path) -> str:
    """Sample id of an image or mask file: the stem without a `_mask`/`_segmentation` suffix."""
    stem = Path(path).stem
    for suffix in MASK_SUFFIXES:
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def is_mask_name(path: str | Path) -> bool:
    return mask_id(path) != Path(path).stem


def expand_inputs(paths: Iterable[str | Path]) -> list[Path]:
    """Files given directly plus the images found (sorted) inside given directories.

    Inside directories, mask files and rendered overlays are ignored.
    """
    files: list[Path] = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            files.extend(
                sorted(
                    p
                    for p in path.iterdir()
                    if p.suffix.lower() in IMAGE_SUFFIXES
                    and not is_mask_name(p)
                    and not p.stem.endswith(OVERLAY_SUFFIX)
                )
            )
        elif path.is_file():
            files.append(path)
        else:
            raise DataError("input does not exist", str(path))
    return files
