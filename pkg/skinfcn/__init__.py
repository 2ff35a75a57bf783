"""Skip-layer fully convolutional network for skin lesion segmentation."""

__version__ = "0.1.0"
