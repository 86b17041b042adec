"""PNG / PPM reading and writing through Pillow. Pixels are float32 in [0, 1]."""

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

_FORMATS = {".png": "PNG", ".ppm": "PPM", ".pnm": "PPM"}


class ImageReadError(OSError):
    pass


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(img):
    """Snap to the 8-bit grid so a write/read roundtrip is exact."""
    return (to_uint8(img).astype(np.float32) / np.float32(255.0)).astype(np.float32)


def read_image(path, mode="RGB"):
    """Load PNG/PPM as float32 in [0, 1]; ``mode="L"`` gives a 2-D array."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert(mode))
    except Exception as e:
        raise ImageReadError(f"cannot read image {path}: {e}") from None
    return arr.astype(np.float32) / np.float32(255.0)


def write_image(path, img):
    path = Path(path)
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(arr).save(path, format=_FORMATS.get(path.suffix.lower(), "PNG"))
    return path


def write_mask(path, mask):
    PILImage.fromarray(np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)).save(path, format="PNG")
