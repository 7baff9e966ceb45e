"""
On-disk formats for image-valued data.

Raw tensors ("DRF1") are the lossless ground-truth format:

    offset  size  field
    0       4     magic b"DRF1"
    4       4     C  (uint32, little endian)
    8       4     H  (uint32, little endian)
    12      4     W  (uint32, little endian)
    16      8*CHW float64 little-endian values, row-major

PNG files are 8-bit previews: values are clipped to [0, 1] and rounded to
the nearest of 256 levels, so a PNG roundtrip is exact only up to 1/510.
"""
import logging
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from errors import StorageError

logger = logging.getLogger(__name__)

RAW_MAGIC = b'DRF1'
RAW_HEADER = struct.Struct('<4sIII')
RAW_SUFFIX = '.drf'
PNG_SUFFIX = '.png'


def _as_chw(array):
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1, 1)
    if array.ndim == 2:
        return array[None]
    if array.ndim != 3:
        raise StorageError('<memory>', f"expected a C x H x W array, got shape {array.shape}")
    return array


def write_raw(path, array):
    """Write a C x H x W (or H x W, or scalar) array bit-exactly"""
    path = Path(path)
    chw = _as_chw(array)
    header = RAW_HEADER.pack(RAW_MAGIC, *chw.shape)
    try:
        with open(path, 'wb') as fh:
            fh.write(header)
            fh.write(chw.astype('<f8', copy=False).tobytes(order='C'))
    except OSError as e:
        raise StorageError(path, f"cannot write raw tensor ({e.strerror or e})")
    return path


def read_raw(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise StorageError(path, f"cannot read raw tensor ({e.strerror or e})")
    if len(blob) < RAW_HEADER.size:
        raise StorageError(path, "truncated header")
    magic, channels, height, width = RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise StorageError(path, f"bad magic {magic!r}")
    expected = channels * height * width * 8
    payload = blob[RAW_HEADER.size:]
    if len(payload) != expected:
        raise StorageError(path, f"payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype='<f8').astype(np.float64).reshape(channels, height, width)


def to_uint8(array):
    return np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, array):
    """Write a 1- or 3-channel image in [0, 1] as an 8-bit PNG"""
    path = Path(path)
    chw = _as_chw(array)
    if chw.shape[0] not in (1, 3):
        raise StorageError(path, f"PNG needs 1 or 3 channels, got {chw.shape[0]}")
    pixels = to_uint8(chw)
    image = Image.fromarray(pixels[0], mode='L') if chw.shape[0] == 1 \
        else Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)), mode='RGB')
    try:
        image.save(path, format='PNG')
    except OSError as e:
        raise StorageError(path, f"cannot write PNG ({e.strerror or e})")
    return path


def read_png(path, channels=3):
    path = Path(path)
    try:
        with Image.open(path) as image:
            image = image.convert('RGB' if channels == 3 else 'L')
            pixels = np.asarray(image, dtype=np.float64) / 255.0
    except OSError as e:
        raise StorageError(path, f"cannot read PNG ({e.strerror or e})")
    return pixels.transpose(2, 0, 1).copy() if channels == 3 else pixels[None]


def read_image(path):
    """Load a colour image from a raw tensor or a PNG, chosen by suffix"""
    path = Path(path)
    if path.suffix.lower() == RAW_SUFFIX:
        return read_raw(path)
    return read_png(path)
