"""Reading and writing the few image formats the toolkit deals with.

Colour images are PNG or binary PPM (P6), decoded to float64 H x W x 3
arrays in [0, 1] with byte v mapped to v / 255. Single-channel maps are
written as binary PGM (P5) with value round(255 * v).
"""
import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageLoadError, MissingFile

logger = logging.getLogger(__name__)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            if img.format not in ("PNG", "PPM"):
                raise ImageLoadError(path, f"unsupported format {img.format}")
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise ImageLoadError(path, str(e)) from e
    return rgb.astype(np.float64) / 255.0


def to_bytes(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_bytes(image), mode="RGB").save(path, format="PNG")


def write_pgm(path, values: np.ndarray) -> None:
    if values.ndim != 2:
        raise ValueError(f"expected a single-channel map, got shape {values.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_bytes(values), mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"map not found: {path}")
    with Image.open(path) as img:
        if img.mode != "L":
            raise ImageLoadError(path, f"expected 8-bit greyscale, got mode {img.mode}")
        return np.asarray(img, dtype=np.uint8).astype(np.float64) / 255.0
