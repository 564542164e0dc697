"""Layout-mask guided self-supervised pre-training for document segmentation."""

__version__ = "0.1.0"

CLASS_NAMES = ("TEXT_BLOCK", "FIGURE", "TABLE", "TITLE")
