"""Raster input and adaptive-threshold binarization.

A pixel is foreground iff its value is strictly below the mean of the
window x window neighborhood around it minus a fixed offset. Borders are
handled by edge replication. The comparison is evaluated in exact integer
arithmetic ((v + offset) * count < window_sum) so results are reproducible
bit-for-bit and match a brute-force sliding-window oracle exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError


class UnsupportedFormatError(ValueError):
    pass


class CorruptImageError(ValueError):
    pass


class InvalidWindowError(ValueError):
    pass


@dataclass
class GrayImage:
    """8-bit grayscale raster; pixels[y, x] in 0..255."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ValueError("GrayImage requires a nonempty 2D array")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class BinaryImage:
    """Boolean foreground mask; mask[y, x] True = foreground (dark ink)."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2 or self.mask.size == 0:
            raise ValueError("BinaryImage requires a nonempty 2D array")

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def to_gray(self) -> GrayImage:
        """Render foreground black (0) on white (255)."""
        return GrayImage(np.where(self.mask, 0, 255).astype(np.uint8))


_SUPPORTED_EXT = {".png", ".pgm"}


def load_image(path: str) -> GrayImage:
    """Read a PNG or PGM file as 8-bit grayscale.

    Color inputs are converted with the standard luminance weights.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    ext = os.path.splitext(path)[1].lower()
    if ext not in _SUPPORTED_EXT:
        raise UnsupportedFormatError(f"unsupported image extension {ext!r} (need PNG or PGM)")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):  # PIL reports PGM under the PPM loader
                raise UnsupportedFormatError(f"unsupported image format {im.format!r}")
            if im.mode not in ("L", "LA", "RGB", "RGBA", "P", "1", "I;16", "I"):
                raise UnsupportedFormatError(f"unsupported image mode {im.mode!r}")
            if im.mode in ("I;16", "I"):
                arr = np.asarray(im, dtype=np.int64)
                if arr.max(initial=0) > 255:
                    arr = (arr.astype(np.float64) * (255.0 / max(1, arr.max()))).round()
                pix = arr.astype(np.uint8)
            else:
                pix = np.asarray(im.convert("L"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise CorruptImageError(f"cannot decode {path}: {exc}") from exc
    except (OSError, SyntaxError) as exc:
        raise CorruptImageError(f"cannot decode {path}: {exc}") from exc
    if pix.size == 0:
        raise CorruptImageError(f"{path} decodes to an empty image")
    return GrayImage(pix)


def save_png(img: GrayImage | BinaryImage, path: str) -> None:
    gray = img.to_gray() if isinstance(img, BinaryImage) else img
    from .ioutils import atomic_write_bytes
    import io

    buf = io.BytesIO()
    Image.fromarray(gray.pixels, mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def _window_sums(values: np.ndarray, window: int) -> np.ndarray:
    """Exact int64 sum of the window x window neighborhood per pixel.

    Edge replication via np.pad, then a 2D integral image.
    """
    r = window // 2
    padded = np.pad(values.astype(np.int64), r, mode="edge")
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    np.cumsum(padded, axis=0, out=ii[1:, 1:])
    np.cumsum(ii[1:, 1:], axis=1, out=ii[1:, 1:])
    h, w = values.shape
    s = (
        ii[window : window + h, window : window + w]
        - ii[0:h, window : window + w]
        - ii[window : window + h, 0:w]
        + ii[0:h, 0:w]
    )
    return s


def binarize(img: GrayImage, window: int = 13, offset: float = 10.0) -> BinaryImage:
    """Adaptive-mean threshold: foreground iff v < window_mean - offset (strict)."""
    if window < 3 or window % 2 == 0:
        raise InvalidWindowError(f"window must be odd and >= 3, got {window}")
    v = img.pixels
    sums = _window_sums(v, window)
    count = window * window
    # v < sum/count - offset  <=>  (v + offset) * count < sum, exact when
    # offset is integral; float offsets stay exact well past this magnitude.
    lhs = (v.astype(np.float64) + float(offset)) * count
    mask = lhs < sums
    return BinaryImage(mask)
