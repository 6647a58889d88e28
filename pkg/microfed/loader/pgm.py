"""Binary PGM (P5) reading and writing for images, label maps and instance maps.

* images: 8 bit, intensity ``round(255 * v)``;
* label maps: 8 bit, 0 for grain boundary and 255 for grain;
* instance maps: 16 bit big endian, maxval 65535.
"""
from typing import Tuple, Union

import numpy as np
from pathlib import Path

MAGIC = b"P5"
WHITESPACE = b" \t\n\r\x0b\x0c"


class PGMFormatError(ValueError):
    """Malformed PGM content, reported with the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int, path: Union[str, Path, None] = None):
        self.reason = message
        self.offset = offset
        self.path = path
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (byte offset {offset})")

    def __reduce__(self):
        return self.__class__, (self.reason, self.offset, self.path)


def encode_pgm(array: np.ndarray, maxval: int) -> bytes:
    """Encode a 2D array of integers in [0, maxval] as P5 bytes."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError(f"PGM holds 2D arrays, got shape {array.shape}.")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval must be in [1, 65535], got {maxval}.")
    if array.size and (array.min() < 0 or array.max() > maxval):
        raise ValueError(f"Pixel values must lie in [0, {maxval}], got [{array.min()}, {array.max()}].")
    height, width = array.shape
    header = b"P5\n%d %d\n%d\n" % (width, height, maxval)
    dtype = ">u1" if maxval < 256 else ">u2"
    return header + array.astype(dtype).tobytes()


def decode_pgm(payload: bytes, path: Union[str, Path, None] = None) -> Tuple[np.ndarray, int]:
    """Decode P5 bytes.

    Returns:
        ndarray, int: the pixel array (uint8 or uint16) and the header's maxval.

    Raises:
        PGMFormatError: on a bad magic number, a malformed header, truncated data or out-of-range pixels.
    """
    if payload[:2] != MAGIC:
        raise PGMFormatError(f"Bad magic number {payload[:2]!r}, expected {MAGIC!r}", 0, path)
    offset = 2
    fields = []
    while len(fields) < 3:
        # Skip whitespace and comments
        while offset < len(payload) and (payload[offset:offset + 1] in WHITESPACE
                                         or payload[offset:offset + 1] == b"#"):
            if payload[offset:offset + 1] == b"#":
                end = payload.find(b"\n", offset)
                offset = len(payload) if end < 0 else end + 1
            else:
                offset += 1
        start = offset
        while offset < len(payload) and payload[offset:offset + 1].isdigit():
            offset += 1
        if start == offset:
            if offset >= len(payload):
                raise PGMFormatError("Truncated header", offset, path)
            raise PGMFormatError(f"Expected a decimal header field, found {payload[offset:offset + 1]!r}", offset, path)
        fields.append(int(payload[start:offset]))
    if offset >= len(payload) or payload[offset:offset + 1] not in WHITESPACE:
        raise PGMFormatError("Missing whitespace after maxval", offset, path)
    offset += 1

    width, height, maxval = fields
    if width == 0 or height == 0:
        raise PGMFormatError(f"Empty image {width}x{height}", offset, path)
    if not 0 < maxval < 65536:
        raise PGMFormatError(f"maxval {maxval} outside [1, 65535]", offset, path)
    dtype = np.dtype(">u1") if maxval < 256 else np.dtype(">u2")
    expected = width * height * dtype.itemsize
    available = len(payload) - offset
    if available < expected:
        raise PGMFormatError(f"Truncated pixel data: expected {expected} bytes, found {available}",
                             offset + available, path)
    pixels = np.frombuffer(payload, dtype=dtype, count=width * height, offset=offset).reshape(height, width)
    if pixels.size and int(pixels.max()) > maxval:
        bad = int(np.argmax(pixels.ravel() > maxval))
        raise PGMFormatError(f"Pixel value {int(pixels.ravel()[bad])} exceeds maxval {maxval}",
                             offset + bad * dtype.itemsize, path)
    native = np.uint8 if dtype.itemsize == 1 else np.uint16
    return pixels.astype(native), maxval


def read_pgm(path: Union[str, Path]) -> Tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        return decode_pgm(f.read(), path)


def write_pgm(path: Union[str, Path], array: np.ndarray, maxval: int):
    with open(path, "wb") as f:
        f.write(encode_pgm(array, maxval))


def save_image(path: Union[str, Path], image: np.ndarray):
    """Save a GrayImage (floats in [0, 1]) as 8 bit PGM."""
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValueError(f"Image intensities must lie in [0, 1], got [{image.min()}, {image.max()}].")
    write_pgm(path, np.round(image * 255.0).astype(np.uint8), 255)


def load_image(path: Union[str, Path]) -> np.ndarray:
    pixels, maxval = read_pgm(path)
    if maxval != 255:
        raise PGMFormatError(f"Images are stored with maxval 255, found {maxval}", 0, path)
    return pixels.astype(np.float64) / 255.0


def save_label(path: Union[str, Path], label: np.ndarray):
    """Save a LabelMap (0 boundary, 1 grain) as 8 bit PGM with values {0, 255}."""
    label = np.asarray(label)
    if not np.isin(label, (0, 1)).all():
        raise ValueError("Label maps hold only 0 (boundary) and 1 (grain).")
    write_pgm(path, label.astype(np.uint8) * 255, 255)


def load_label(path: Union[str, Path]) -> np.ndarray:
    pixels, maxval = read_pgm(path)
    if maxval != 255:
        raise PGMFormatError(f"Label maps are stored with maxval 255, found {maxval}", 0, path)
    if not np.isin(pixels, (0, 255)).all():
        raise PGMFormatError("Label map pixels must be 0 or 255", 0, path)
    return (pixels == 255).astype(np.uint8)


def save_instances(path: Union[str, Path], instances: np.ndarray):
    """Save an InstanceMap as 16 bit big endian PGM (maxval 65535)."""
    instances = np.asarray(instances)
    if instances.size and (instances.min() < 0 or instances.max() > 65535):
        raise ValueError(f"Instance ids must lie in [0, 65535], got [{instances.min()}, {instances.max()}].")
    write_pgm(path, instances.astype(np.uint16), 65535)


def load_instances(path: Union[str, Path]) -> np.ndarray:
    pixels, maxval = read_pgm(path)
    if maxval != 65535:
        raise PGMFormatError(f"Instance maps are stored as 16 bit with maxval 65535, found {maxval}", 0, path)
    return pixels.astype(np.int32)
