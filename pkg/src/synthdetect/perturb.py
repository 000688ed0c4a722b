"""Test-time post-processing transforms for the robustness study: Gaussian
blur, JPEG-style compression, and bilinear resizing.

All three map [0,1] images to [0,1] images of the original shape, so the
standard crop/normalize pipeline applies unchanged afterwards. JPEG is
simulated in-process as the DCT-quantization round trip (entropy coding is
lossless and cannot affect pixels); resizing re-upsamples to the original
grid by default since the model has a fixed input size.
"""

from __future__ import annotations

import math

import numpy as np


class PerturbError(ValueError):
    """Transform parameters outside their valid range."""


# --- Gaussian blur -----------------------------------------------------------


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter with reflect padding; sigma = 0 is identity.

    The kernel radius is ceil(3*sigma), truncated to the image extent, and the
    truncated kernel is renormalized so constants pass through exactly.
    """
    if sigma < 0:
        raise PerturbError(f"blur scale must be non-negative, got {sigma}")
    if sigma == 0:
        return img.copy()
    _, h, w = img.shape
    out = img
    for axis, extent in ((1, h), (2, w)):
        radius = min(math.ceil(3.0 * sigma), extent - 1)
        offsets = np.arange(-radius, radius + 1)
        kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
        kernel /= kernel.sum()
        pad = [(0, 0), (0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(img)
        for k, weight in zip(range(2 * radius + 1), kernel):
            sl = [slice(None)] * 3
            sl[axis] = slice(k, k + extent)
            acc += weight * padded[tuple(sl)]
        out = acc
    return out


# --- JPEG round trip ----------------------------------------------------------

# Baseline luminance / chrominance quantization tables.
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def _dct_matrix() -> np.ndarray:
    c = np.zeros((8, 8))
    for u in range(8):
        scale = math.sqrt(1.0 / 8.0) if u == 0 else math.sqrt(2.0 / 8.0)
        for x in range(8):
            c[u, x] = scale * math.cos((2 * x + 1) * u * math.pi / 16.0)
    return c


_DCT = _dct_matrix()


def scaled_quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    """libjpeg quality scaling: 5000/q below 50, else 200-2q; entries in [1,255]."""
    if not 1 <= quality <= 100:
        raise PerturbError(f"quality must be in 1..100, got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((base * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _dct_round_trip(channel: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = channel.shape
    blocks = channel.reshape(h // 8, 8, w // 8, 8)
    coeffs = np.einsum("ui,hiwj,vj->hwuv", _DCT, blocks, _DCT)
    coeffs = np.round(coeffs / table) * table
    back = np.einsum("ui,hwuv,vj->hiwj", _DCT, coeffs, _DCT)
    return back.reshape(h, w)


def jpeg_quality(img: np.ndarray, quality: int) -> np.ndarray:
    """RGB -> YCbCr -> blockwise DCT quantization -> RGB, clamped to [0,1]."""
    table_luma = scaled_quant_table(LUMA_TABLE, quality)
    table_chroma = scaled_quant_table(CHROMA_TABLE, quality)
    _, h, w = img.shape
    r, g, b = img[0] * 255.0, img[1] * 255.0, img[2] * 255.0
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    planes = []
    for plane, table in ((y, table_luma), (cb, table_chroma), (cr, table_chroma)):
        padded = np.pad(plane, ((0, pad_h), (0, pad_w)), mode="edge")
        coded = _dct_round_trip(padded - 128.0, table) + 128.0
        planes.append(coded[:h, :w])
    y, cb, cr = planes
    r = y + 1.402 * (cr - 128.0)
    g = y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0)
    b = y + 1.772 * (cb - 128.0)
    out = np.stack([r, g, b]) / 255.0
    return np.clip(out, 0.0, 1.0)


# --- bilinear resize -----------------------------------------------------------


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample [C,H,W] to [C,out_h,out_w], pixel-center (align-corners-false)
    convention, edge-clamped."""
    _, h, w = img.shape

    def _coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, yfrac = _coords(out_h, h)
    xlo, xhi, xfrac = _coords(out_w, w)
    top = img[:, ylo][:, :, xlo] * (1 - xfrac) + img[:, ylo][:, :, xhi] * xfrac
    bottom = img[:, yhi][:, :, xlo] * (1 - xfrac) + img[:, yhi][:, :, xhi] * xfrac
    return top * (1 - yfrac)[None, :, None] + bottom * yfrac[None, :, None]


def resize_bilinear(img: np.ndarray, factor: float, restore: bool = True) -> np.ndarray:
    """Downsample by ``factor``; with ``restore`` (default) upsample back to
    the original grid so the fixed-size crop still applies."""
    if not 0.0 < factor <= 1.0:
        raise PerturbError(f"resize factor must be in (0, 1], got {factor}")
    _, h, w = img.shape
    out_h = int(round(h * factor))
    out_w = int(round(w * factor))
    if out_h < 8 or out_w < 8:
        raise PerturbError(f"resized image {out_h}x{out_w} is below the 8px minimum")
    small = bilinear_resize(img, out_h, out_w)
    if not restore:
        return small
    return bilinear_resize(small, h, w)


# --- registry for the sweep driver ----------------------------------------------


def apply_transform(name: str, img: np.ndarray, parameter: float) -> np.ndarray:
    if name == "blur":
        return gaussian_blur(img, float(parameter))
    if name == "jpeg":
        q = int(parameter)
        if q != parameter:
            raise PerturbError(f"jpeg quality must be an integer, got {parameter}")
        return jpeg_quality(img, q)
    if name == "resize":
        return resize_bilinear(img, float(parameter), restore=True)
    raise PerturbError(f"unknown transform {name!r}; valid: blur, jpeg, resize")


TRANSFORM_NAMES = ("blur", "jpeg", "resize")
