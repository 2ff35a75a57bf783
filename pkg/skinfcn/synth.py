"""
Synthetic dermoscopy-like dataset generator.

Each image is a textured skin-coloured background carrying one or two
soft-edged dark ellipses (the lesion) and, optionally, thin hair-like arcs.
The mask marks the exact ellipse interiors.
"""

import logging
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from skinfcn.data import DatasetManifest, ManifestEntry, encode_mask_png, write_manifest
from skinfcn.errors import DataError, ParameterError

_LOGGER = logging.getLogger(__name__)

MIN_LESION_FRACTION = 0.05
MAX_LESION_FRACTION = 0.6
MAX_ATTEMPTS = 50
EDGE_SOFTNESS = 0.15
MANIFEST_NAME = "manifest.tsv"


def _skin_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform([200.0, 150.0, 130.0], [240.0, 190.0, 170.0])
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 32) * 40.0
    grain = rng.standard_normal((size, size, 3)) * 4.0
    return base[None, None, :] + texture[..., None] + grain


def _ellipse_distance(rng: np.random.Generator, size: int) -> np.ndarray:
    """Normalized elliptical distance (1.0 on the boundary) of a random ellipse."""
    cy, cx = rng.uniform(0.25, 0.75, size=2) * size
    ry, rx = rng.uniform(0.12, 0.35, size=2) * size
    angle = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    return np.sqrt((u / rx) ** 2 + (v / ry) ** 2)


def _centred_distance(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    radius = 0.25 * size
    return np.hypot(yy - size / 2, xx - size / 2) / radius


def _lesion(rng: np.random.Generator, size: int) -> np.ndarray:
    """Distance field of the lesion (min over its ellipses), resampled until its area is plausible."""
    for _ in range(MAX_ATTEMPTS):
        count = int(rng.integers(1, 3))
        distance = np.minimum.reduce([_ellipse_distance(rng, size) for _ in range(count)])
        fraction = float((distance <= 1.0).mean())
        if MIN_LESION_FRACTION <= fraction <= MAX_LESION_FRACTION:
            return distance
    return _centred_distance(size)


def _draw_hair(rng: np.random.Generator, image: Image.Image, size: int) -> None:
    draw = ImageDraw.Draw(image)
    for _ in range(int(rng.integers(2, 6))):
        x0, y0 = rng.uniform(-0.5, 1.0, size=2) * size
        extent = rng.uniform(0.5, 1.5) * size
        start = float(rng.uniform(0, 360))
        shade = int(rng.integers(20, 60))
        draw.arc(
            [x0, y0, x0 + extent, y0 + extent],
            start=start,
            end=start + float(rng.uniform(40, 120)),
            fill=(shade, shade // 2, shade // 3),
            width=max(1, size // 128),
        )


def render_sample(seed: int, index: int, size: int, hair: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """One (image uint8 (size, size, 3), mask uint8 {0, 1}) pair."""
    rng = np.random.default_rng([seed, index])
    background = _skin_background(rng, size)
    distance = _lesion(rng, size)
    mask = (distance <= 1.0).astype(np.uint8)

    lesion_colour = rng.uniform([60.0, 30.0, 20.0], [140.0, 90.0, 70.0])
    alpha = np.clip((1.0 + EDGE_SOFTNESS - distance) / (2 * EDGE_SOFTNESS), 0.0, 1.0)
    alpha = np.where(mask == 1, np.maximum(alpha, 0.5), np.minimum(alpha, 0.5))
    blended = background * (1.0 - alpha[..., None]) + lesion_colour[None, None, :] * alpha[..., None]
    image = Image.fromarray(np.clip(np.rint(blended), 0, 255).astype(np.uint8))
    if hair:
        _draw_hair(rng, image, size)
    return np.asarray(image), mask


def synth_generate(count: int, size: int, seed: int, out_dir: str | Path, hair: bool = False) -> DatasetManifest:
    """Write `count` image/mask pairs plus `manifest.tsv` into `out_dir`."""
    if count < 0:
        raise ParameterError(f"count must be >= 0, got {count}")
    if size < 32 or size % 32:
        raise ParameterError(f"size must be a positive multiple of 32, got {size}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory: {e}", str(out_dir)) from e

    entries = []
    for index in range(count):
        sample_id = f"synth_{index:04d}"
        image, mask = render_sample(seed, index, size, hair)
        image_path, mask_path = out_dir / f"{sample_id}.png", out_dir / f"{sample_id}_mask.png"
        try:
            Image.fromarray(image).save(image_path, format="PNG")
        except OSError as e:
            raise DataError(f"cannot write image: {e}", str(image_path)) from e
        encode_mask_png(mask, mask_path)
        entries.append(ManifestEntry(id=sample_id, image=image_path, mask=mask_path))

    manifest = DatasetManifest(entries=entries)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    _LOGGER.info(f"Generated {count} synthetic samples of {size}x{size} in {out_dir}")
    return manifest
