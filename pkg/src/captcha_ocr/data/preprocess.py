from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
DEFAULT_HEIGHT = 50
DEFAULT_WIDTH = 200


class ImageError(ValueError):
    pass


def _as_array(image) -> np.ndarray:
    if isinstance(image, Image.Image):
        if image.mode in ("P", "LA", "PA"):
            image = image.convert("RGBA")
        elif image.mode not in ("L", "RGB", "RGBA", "F", "I;16"):
            image = image.convert("RGB")
        return np.asarray(image)
    return np.asarray(image)


def _white_level(arr: np.ndarray) -> float:
    if arr.dtype.kind in "ui":
        return 255.0 if arr.dtype.itemsize == 1 else float(np.iinfo(arr.dtype).max)
    return 1.0


def to_grayscale(image) -> np.ndarray:
    """Grayscale float image in [0, 1].

    Integer images are scaled by their dtype's white level; alpha is composited
    over a white background before the luma weighting.
    """
    arr = _as_array(image)
    if arr.size == 0 or arr.ndim < 2 or 0 in arr.shape[:2]:
        raise ImageError(f"zero-area image of shape {arr.shape}")
    white = _white_level(arr)
    arr = arr.astype(np.float64) / white
    if arr.ndim == 2:
        return arr
    if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
        raise ImageError(f"unsupported image shape {arr.shape}")
    if arr.shape[2] == 1:
        return arr[..., 0]
    rgb = arr[..., :3]
    if arr.shape[2] == 4:
        alpha = arr[..., 3:4]
        rgb = rgb * alpha + (1.0 - alpha)
    return rgb @ LUMA


def resize_bilinear(gray: np.ndarray, height: int, width: int) -> np.ndarray:
    if gray.shape == (height, width):
        return gray
    img = Image.fromarray(gray.astype(np.float32))
    return np.asarray(img.resize((width, height), Image.BILINEAR), dtype=np.float64)


def contrast_stretch(image: np.ndarray, low: float = 1.0, high: float = 99.0) -> np.ndarray:
    """Map the ``low``/``high`` intensity percentiles to 0/1; constant images pass through."""
    lo, hi = np.percentile(image, [low, high])
    if hi - lo < 1e-6:
        return image
    return np.clip((image - lo) / (hi - lo), 0.0, 1.0)


def standardize(image: np.ndarray) -> np.ndarray:
    """Zero-mean/unit-std, then remapped affinely onto [0, 1]."""
    std = image.std()
    if std < 1e-12:
        return image
    z = (image - image.mean()) / std
    return (z - z.min()) / (z.max() - z.min())


def preprocess(
    image,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    *,
    stretch: bool = True,
    denoise: bool = False,
    standardize_image: bool = False,
) -> np.ndarray:
    """Raw decoded image to an ``height×width`` float image in [0, 1]."""
    gray = resize_bilinear(to_grayscale(image), height, width)
    out = np.clip(gray, 0.0, 1.0)
    if denoise:
        out = ndimage.median_filter(out, size=3, mode="nearest")
    if stretch:
        out = contrast_stretch(out)
    if standardize_image:
        out = standardize(out)
    return out
