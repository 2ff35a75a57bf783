import logging

import numpy as np
from scipy.ndimage import binary_erosion

from skinfcn.errors import ShapeError

_LOGGER = logging.getLogger(__name__)

PREDICTION_COLOUR = (255, 0, 0)
GROUND_TRUTH_COLOUR = (0, 0, 255)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Lesion pixels with at least one 8-connected skin neighbour (the image border counts as skin)."""
    lesion = np.asarray(mask).astype(bool)
    interior = binary_erosion(lesion, structure=np.ones((3, 3), dtype=bool), border_value=0)
    return lesion & ~interior


def overlay_contours(image: np.ndarray, pred: np.ndarray, gt: np.ndarray | None = None) -> np.ndarray:
    """Copy of an (h, w, 3) uint8 image with the ground-truth contour in blue and the predicted one in red.

    The prediction is drawn last, so it wins where the two contours overlap.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an (h, w, 3) image, got {image.shape}")
    layers = [(gt, GROUND_TRUTH_COLOUR), (pred, PREDICTION_COLOUR)]
    result = np.array(image, dtype=np.uint8, copy=True)
    for mask, colour in layers:
        if mask is None:
            continue
        if mask.shape != image.shape[:2]:
            raise ShapeError(f"mask {mask.shape} does not match image {image.shape[:2]}")
        result[mask_boundary(mask)] = colour
    return result
