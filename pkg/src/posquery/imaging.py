"""Pixel-space helpers: bilinear resize, crops, 8-bit conversion."""

import numpy as np

from .errors import InvalidSize


def _axis_weights(n_in, n_out):
    # half-pixel centers, clamped at the borders (no anti-aliasing prefilter)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(image, out_h, out_w):
    """Separable bilinear resize of an (H, W) or (H, W, C) array."""
    out_h, out_w = int(out_h), int(out_w)
    image = np.asarray(image)
    if out_h < 1 or out_w < 1 or image.shape[0] < 1 or image.shape[1] < 1:
        raise InvalidSize(f"cannot resize {image.shape[:2]} to {out_h}x{out_w}")
    if image.shape[:2] == (out_h, out_w):
        return image.copy()
    x = image if image.dtype.kind == "f" else image.astype(np.float64)
    i0, i1, fy = _axis_weights(x.shape[0], out_h)
    j0, j1, fx = _axis_weights(x.shape[1], out_w)
    extra = (1,) * (x.ndim - 2)
    fy = fy.reshape((-1, 1) + extra).astype(x.dtype)
    fx = fx.reshape((1, -1) + extra).astype(x.dtype)
    rows = x[i0] * (1 - fy) + x[i1] * fy
    return rows[:, j0] * (1 - fx) + rows[:, j1] * fx


def crop(image, region):
    return image[region.top:region.bottom, region.left:region.right]


def resized_crop(image, region, out_h, out_w):
    return resize_bilinear(crop(image, region), out_h, out_w)


def to_unit(image_u8):
    """uint8 [0, 255] -> float [-1, 1]."""
    return np.asarray(image_u8, dtype=np.float64) / 127.5 - 1.0


def to_uint8(image):
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
