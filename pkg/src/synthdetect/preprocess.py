"""Image decoding, the input pipeline (center crop, RGB normalization), and
deterministic dataset splitting.

Supported raster formats are 8-bit RGB PNG and binary PPM (P6). Decoded
pixels are float64 in [0, 1], channel-first [3, H, W].

A dataset root is a directory with a ``real/`` subdirectory and zero or more
``anomalous-<name>/`` subdirectories; every regular file with a supported
extension inside them is a sample. Labels are used only for evaluation:
training splits contain real samples exclusively.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REAL_LABEL = "real"
SUPPORTED_EXTENSIONS = (".png", ".ppm")

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class DecodeError(ValueError):
    """Base class for image decoding failures."""


class UnsupportedFormatError(DecodeError):
    """Content is not one of the supported raster formats."""


class TruncatedFileError(DecodeError):
    """Content ended before the declared pixel data was complete."""


class ChannelError(DecodeError):
    """Image does not carry exactly three color channels."""


class DatasetError(ValueError):
    """Dataset directory layout or split request is invalid."""


@dataclass
class ImageRecord:
    """A decoded sample. ``source`` is ``"real"`` or the anomaly-source name."""

    path: str
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    source: str

    @property
    def is_real(self) -> bool:
        return self.source == REAL_LABEL


@dataclass
class DatasetSplit:
    split_fraction: float
    seed: int
    train: list[ImageRecord] = field(default_factory=list)
    validation: list[ImageRecord] = field(default_factory=list)
    test: list[ImageRecord] = field(default_factory=list)

    def __post_init__(self):
        bad = [r.path for r in self.train if not r.is_real]
        if bad:
            raise DatasetError(f"anomalous samples in training split: {bad[:3]}")


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and standard deviation of the training pool."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError(f"channel std must be positive, got {self.std}")


# --- decoding ---------------------------------------------------------------


def decode_image(data: bytes) -> np.ndarray:
    """Decode raw file content into a [3, H, W] tensor with values in [0, 1]."""
    if data[:8] == _PNG_SIGNATURE:
        return _decode_png(data)
    if data[:2] == b"P6":
        return _decode_ppm(data)
    raise UnsupportedFormatError("not a PNG or binary PPM file")


def load_image(path: str | os.PathLike) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def _decode_ppm(data: bytes) -> np.ndarray:
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token:
            raise TruncatedFileError("PPM header ended early")
        try:
            fields.append(int(token))
        except ValueError as err:
            raise UnsupportedFormatError(f"bad PPM header token {token!r}") from err
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedFormatError(f"only 8-bit PPM supported, maxval={maxval}")
    if width <= 0 or height <= 0:
        raise UnsupportedFormatError("non-positive PPM dimensions")
    pos += 1  # single whitespace after maxval
    raster = data[pos:pos + 3 * width * height]
    if len(raster) < 3 * width * height:
        raise TruncatedFileError("PPM pixel data incomplete")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def _decode_png(data: bytes) -> np.ndarray:
    pos = 8
    header = None
    idat = bytearray()
    while pos + 8 <= len(data):
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        pos += 8
        chunk = data[pos:pos + length]
        if len(chunk) < length:
            raise TruncatedFileError("PNG chunk data incomplete")
        pos += length + 4  # skip CRC
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", chunk)
        elif ctype == b"IDAT":
            idat.extend(chunk)
        elif ctype == b"IEND":
            break
    else:
        raise TruncatedFileError("PNG ended without IEND")
    if header is None:
        raise TruncatedFileError("PNG has no IHDR chunk")
    width, height, depth, color, comp, filt, interlace = header
    if color in (0, 4, 6):
        raise ChannelError(f"PNG color type {color} is not 3-channel RGB")
    if color != 2 or depth != 8:
        raise UnsupportedFormatError(f"only 8-bit RGB PNG supported (depth={depth}, color={color})")
    if comp != 0 or filt != 0 or interlace != 0:
        raise UnsupportedFormatError("compressed/interlaced variants beyond baseline PNG unsupported")
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as err:
        raise TruncatedFileError(f"PNG deflate stream corrupt: {err}") from err
    stride = 3 * width
    if len(raw) < height * (stride + 1):
        raise TruncatedFileError("PNG scanline data incomplete")
    img = np.empty((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(height):
        offset = y * (stride + 1)
        ftype = raw[offset]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=offset + 1)
        img[y] = _unfilter_scanline(ftype, line, prev)
        prev = img[y]
    rgb = img.reshape(height, width, 3)
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def _unfilter_scanline(ftype: int, line: np.ndarray, prev: np.ndarray) -> np.ndarray:
    bpp = 3
    out = line.astype(np.int32)
    if ftype == 0:
        pass
    elif ftype == 1:
        for i in range(bpp, out.size):
            out[i] = (out[i] + out[i - bpp]) & 0xFF
    elif ftype == 2:
        out = (out + prev) & 0xFF
    elif ftype == 3:
        for i in range(out.size):
            left = out[i - bpp] if i >= bpp else 0
            out[i] = (out[i] + ((left + int(prev[i])) >> 1)) & 0xFF
    elif ftype == 4:
        for i in range(out.size):
            a = out[i - bpp] if i >= bpp else 0
            b = int(prev[i])
            c = int(prev[i - bpp]) if i >= bpp else 0
            p = a + b - c
            pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
            if pa <= pb and pa <= pc:
                pred = a
            elif pb <= pc:
                pred = b
            else:
                pred = c
            out[i] = (out[i] + pred) & 0xFF
    else:
        raise UnsupportedFormatError(f"unknown PNG filter type {ftype}")
    return out.astype(np.uint8)


# --- pipeline ---------------------------------------------------------------


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    """Centered size x size window; offsets round down for odd margins."""
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[:, top:top + size, left:left + size]


def rgb_normalize(img: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = np.asarray(stats.mean).reshape(3, 1, 1)
    std = np.asarray(stats.std).reshape(3, 1, 1)
    return (img - mean) / std


def rgb_denormalize(img: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = np.asarray(stats.mean).reshape(3, 1, 1)
    std = np.asarray(stats.std).reshape(3, 1, 1)
    return img * std + mean


def channel_stats(images: list[np.ndarray], min_std: float = 1e-6) -> NormStats:
    """Two-pass per-channel mean/std over a pool of [3, H, W] images.

    The std is floored at ``min_std`` so a degenerate constant channel cannot
    poison normalization.
    """
    if not images:
        raise ValueError("cannot compute statistics of an empty pool")
    counts = sum(img.shape[1] * img.shape[2] for img in images)
    total = np.zeros(3)
    for img in images:
        total += img.sum(axis=(1, 2))
    mean = total / counts
    sq = np.zeros(3)
    for img in images:
        sq += ((img - mean.reshape(3, 1, 1)) ** 2).sum(axis=(1, 2))
    std = np.sqrt(sq / counts)
    std = np.maximum(std, min_std)
    return NormStats(mean=tuple(mean), std=tuple(std))


def preprocess_pixels(pixels: np.ndarray, size: int, stats: NormStats) -> np.ndarray:
    return rgb_normalize(center_crop(pixels, size), stats)


# --- dataset loading and splitting ------------------------------------------


def load_dataset(root: str | os.PathLike) -> list[ImageRecord]:
    """Read every supported image under root/real and root/anomalous-*."""
    root = Path(root)
    real_dir = root / "real"
    if not real_dir.is_dir():
        raise DatasetError(f"dataset root {root} has no real/ directory")
    records: list[ImageRecord] = []
    for path in sorted(real_dir.iterdir()):
        if path.suffix.lower() in SUPPORTED_EXTENSIONS and path.is_file():
            records.append(ImageRecord(str(path), load_image(path), REAL_LABEL))
    for folder in sorted(root.iterdir()):
        if not folder.is_dir() or not folder.name.startswith("anomalous-"):
            continue
        source = folder.name[len("anomalous-"):]
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() in SUPPORTED_EXTENSIONS and path.is_file():
                records.append(ImageRecord(str(path), load_image(path), source))
    if not records:
        raise DatasetError(f"no supported images found under {root}")
    return records


def anomaly_sources(records: list[ImageRecord]) -> list[str]:
    return sorted({r.source for r in records if not r.is_real})


def make_split(pool: list[ImageRecord], fraction: float, seed: int) -> DatasetSplit:
    """Deterministic split: ``fraction`` of the real pool trains, the rest
    halves into validation and test; anomalous samples are injected into
    validation and test only, up to the real count of each part per source."""
    if not pool:
        raise DatasetError("cannot split an empty pool")
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"split fraction must be in (0, 1), got {fraction}")
    real = [r for r in pool if r.is_real]
    if not real:
        raise DatasetError("pool has no real samples")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(real))
    n_train = int(round(fraction * len(real)))
    n_train = min(max(n_train, 1), len(real) - 2) if len(real) > 3 else n_train
    rest = len(real) - n_train
    n_val = rest // 2
    train = [real[i] for i in order[:n_train]]
    validation = [real[i] for i in order[n_train:n_train + n_val]]
    test = [real[i] for i in order[n_train + n_val:]]
    n_test = len(test)
    for k, source in enumerate(anomaly_sources(pool)):
        group = [r for r in pool if r.source == source]
        sub = np.random.default_rng([seed, 1000003 + k])
        gorder = sub.permutation(len(group))
        half = len(group) // 2
        val_pool = [group[i] for i in gorder[:half]]
        test_pool = [group[i] for i in gorder[half:]]
        validation.extend(val_pool[:n_val])
        test.extend(test_pool[:n_test])
    return DatasetSplit(split_fraction=fraction, seed=seed,
                        train=train, validation=validation, test=test)
