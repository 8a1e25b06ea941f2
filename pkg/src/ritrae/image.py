"""8-bit images as ``(height, width, channels)`` uint8 arrays.

Plain PGM (P2) and PPM (P3) are the only file formats; block statistics are
computed with exact integer sums so pairing decisions never depend on
floating-point summation order.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ImageFormatError",
    "BlockGrid",
    "check_image",
    "load_image",
    "save_image",
    "encode_netpbm",
    "decode_netpbm",
    "partition",
    "blocks_of",
    "assemble",
    "rotate_block",
    "psnr",
    "center_crop",
]

_TOKEN = re.compile(rb"#[^\n]*|\S+")


class ImageFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


def check_image(img, name="image"):
    """Return ``img`` as a validated ``(h, w, c)`` uint8 array, c in {1, 3}.

    2-D input is treated as a single channel.
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"{name} must have shape (h, w) or (h, w, 1|3), got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"{name} must hold integer samples, got {arr.dtype}")
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError(f"{name} samples must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def decode_netpbm(data):
    """Parse plain PGM/PPM bytes."""
    tokens = []
    for m in _TOKEN.finditer(data):
        if not m.group().startswith(b"#"):
            tokens.append((m.group(), m.start()))
        if len(tokens) == 4:
            break
    if not tokens:
        raise ImageFormatError("empty file", 0)
    magic, off = tokens[0]
    if magic not in (b"P2", b"P3"):
        raise ImageFormatError(f"unsupported magic {magic!r} (plain P2/P3 only)", off)
    channels = 1 if magic == b"P2" else 3
    if len(tokens) < 4:
        raise ImageFormatError("truncated header", len(data))
    header = []
    for tok, off in tokens[1:]:
        if not tok.isdigit():
            raise ImageFormatError(f"malformed header field {tok!r}", off)
        header.append(int(tok))
    width, height, maxval = header
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}", tokens[3][1])
    if width < 1 or height < 1:
        raise ImageFormatError("zero image dimension", tokens[1][1])

    body_start = tokens[3][1] + len(tokens[3][0])
    need = width * height * channels
    samples = []
    for m in _TOKEN.finditer(data, body_start):
        tok = m.group()
        if tok.startswith(b"#"):
            continue
        if not tok.isdigit():
            raise ImageFormatError(f"malformed sample {tok!r}", m.start())
        v = int(tok)
        if v > 255:
            raise ImageFormatError(f"sample {v} exceeds maxval", m.start())
        if len(samples) == need:
            raise ImageFormatError("trailing data after last sample", m.start())
        samples.append(v)
    if len(samples) < need:
        raise ImageFormatError(f"truncated sample list: {len(samples)} of {need} samples", len(data))
    return np.array(samples, dtype=np.uint8).reshape(height, width, channels)


def encode_netpbm(img):
    """Canonical plain encoding: single spaces, one image row per line."""
    img = check_image(img)
    h, w, c = img.shape
    lines = [("P2" if c == 1 else "P3"), f"{w} {h}", "255"]
    for row in img.reshape(h, w * c):
        lines.append(" ".join(map(str, row.tolist())))
    return ("\n".join(lines) + "\n").encode("ascii")


def load_image(path):
    return decode_netpbm(Path(path).read_bytes())


def save_image(img, path):
    Path(path).write_bytes(encode_netpbm(img))


def center_crop(img, block_size):
    """Largest centered crop whose sides are multiples of ``block_size``."""
    img = check_image(img)
    h, w = img.shape[:2]
    nh, nw = h - h % block_size, w - w % block_size
    if not nh or not nw:
        raise ValueError(f"image {w}x{h} is smaller than one {block_size}x{block_size} block")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[top:top + nh, left:left + nw]


@dataclass(frozen=True)
class BlockGrid:
    """Per-channel block statistics in raster block order.

    ``sums`` and ``sqsums`` are exact integer moments of each block; ``mean``
    and ``sd`` (population) are derived from them.  ``var_key`` is the
    variance scaled by ``area**2``, an exact integer that orders blocks the
    same way ``sd`` does.
    """

    block_size: int
    blocks_x: int
    blocks_y: int
    sums: np.ndarray
    sqsums: np.ndarray

    @property
    def n_blocks(self):
        return self.blocks_x * self.blocks_y

    @property
    def area(self):
        return self.block_size * self.block_size

    @property
    def var_key(self):
        return self.area * self.sqsums - self.sums * self.sums

    @property
    def mean(self):
        return self.sums / self.area

    @property
    def sd(self):
        return np.sqrt(self.var_key.astype(np.float64)) / self.area

    @property
    def rounded_mean(self):
        """Mean rounded half-up, computed exactly in integers."""
        return (2 * self.sums + self.area) // (2 * self.area)


def _check_block_size(shape, block_size):
    h, w = shape[:2]
    if block_size < 2:
        raise ValueError(f"block size must be >= 2, got {block_size}")
    if h % block_size or w % block_size:
        raise ValueError(
            f"block size {block_size} does not divide image size {w}x{h}; "
            "pad or crop the image first (see center_crop)"
        )


def blocks_of(img, block_size):
    """Split into blocks: array of shape ``(channels, n_blocks, B, B)``."""
    img = check_image(img)
    _check_block_size(img.shape, block_size)
    h, w, c = img.shape
    b = block_size
    by, bx = h // b, w // b
    return img.reshape(by, b, bx, b, c).transpose(4, 0, 2, 1, 3).reshape(c, by * bx, b, b)


def assemble(blocks, height, width):
    """Inverse of :func:`blocks_of`."""
    c, n, b, _ = blocks.shape
    by, bx = height // b, width // b
    if by * bx != n:
        raise ValueError(f"{n} blocks cannot tile a {width}x{height} image with block size {b}")
    return blocks.reshape(c, by, bx, b, b).transpose(1, 3, 2, 4, 0).reshape(height, width, c)


def partition(img, block_size):
    img = check_image(img)
    blocks = blocks_of(img, block_size).astype(np.int64)
    h, w = img.shape[:2]
    return BlockGrid(
        block_size=block_size,
        blocks_x=w // block_size,
        blocks_y=h // block_size,
        sums=blocks.sum(axis=(2, 3)),
        sqsums=(blocks * blocks).sum(axis=(2, 3)),
    )


def rotate_block(block, direction):
    """Rotate clockwise by ``direction`` quarter turns (0..3 = 0, 90, 180, 270 degrees)."""
    block = np.asarray(block)
    if block.ndim < 2 or block.shape[-1] != block.shape[-2]:
        raise ValueError("rotate_block needs square blocks")
    return np.rot90(block, k=-(int(direction) % 4), axes=(-2, -1))


def psnr(a, b):
    """Peak signal-to-noise ratio in dB over all samples; ``math.inf`` for identical images."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.int64) - b.astype(np.int64)
    sse = int((diff * diff).sum())
    if sse == 0:
        return math.inf
    mse = sse / diff.size
    return 10.0 * math.log10(255.0 ** 2 / mse)
