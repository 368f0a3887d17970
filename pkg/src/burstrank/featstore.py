"""Feature maps, their binary file format, and the fixed filter-bank extractor.

The extractor stands in for a CNN backbone: an 8-filter classical bank over a
grayscale image, each response average-pooled down to the target grid. Feature
files are bit-exact round-trippable ("BRF1" magic, little-endian header and
float32 payload, channel-major).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, InputError, NumericFault

FEATURE_MAGIC = b"BRF1"
FILTER_BANK_SIZE = 8

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T
_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class FeatureMap:
    """A dense C x H x W float32 array, channel-major."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise InputError(f"feature map must be 3-D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise InputError(f"feature map dims must be >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NumericFault("feature map contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class GrayImage:
    """An 8-bit grayscale image, row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2:
            raise InputError(f"gray image must be 2-D, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def write_feature_map(fmap: FeatureMap, path) -> None:
    c, h, w = fmap.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", c, h, w))
        fh.write(fmap.data.astype("<f4").tobytes())


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    c, h, w = struct.unpack("<III", blob[4:16])
    if min(c, h, w) < 1:
        raise FormatError(f"{path}: invalid dims {(c, h, w)}")
    need = 16 + 4 * c * h * w
    if len(blob) < need:
        raise FormatError(f"{path}: payload truncated, need {need} bytes, have {len(blob)}")
    if len(blob) > need:
        raise FormatError(f"{path}: {len(blob) - need} trailing bytes")
    data = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=16).reshape(c, h, w)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: non-finite values in payload")
    return FeatureMap(data.copy())


def read_pgm(path) -> GrayImage:
    """Read a binary (P5) PGM with maxval 255."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {blob[:2]!r})")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header fields {fields}") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if len(blob) - pos < width * height:
        raise FormatError(f"{path}: pixel payload truncated")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=width * height,
                           offset=pos).reshape(height, width)
    return GrayImage(pixels.copy())


def write_pgm(img: GrayImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(img.pixels.tobytes())


def _pool_to(resp: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Average-pool over equal cells; remainder pixels go to the last cell."""
    in_h, in_w = resp.shape
    ch, cw = in_h // out_h, in_w // out_w
    row_starts = np.arange(out_h) * ch
    col_starts = np.arange(out_w) * cw
    rows = np.add.reduceat(resp, row_starts, axis=0)
    cells = np.add.reduceat(rows, col_starts, axis=1)
    row_sizes = np.full(out_h, ch, dtype=np.float64)
    row_sizes[-1] = in_h - ch * (out_h - 1)
    col_sizes = np.full(out_w, cw, dtype=np.float64)
    col_sizes[-1] = in_w - cw * (out_w - 1)
    return cells / np.outer(row_sizes, col_sizes)


def filter_bank(img: GrayImage) -> np.ndarray:
    """Full-resolution responses of the fixed 8-filter bank, shape (8,H,W).

    Channels: intensity, |Sobel-x|, |Sobel-y|, |Laplacian|, 3x3 local
    variance, 3x3 local max, 3x3 local min, high-pass residual (image minus
    its 3x3 box blur). Borders use replicate padding.
    """
    if img.height < 3 or img.width < 3:
        raise InputError(
            f"image {img.height}x{img.width} too small; filters need a 3x3 support")
    x = img.pixels.astype(np.float64) / 255.0
    box = ndimage.uniform_filter(x, size=3, mode="nearest")
    box_sq = ndimage.uniform_filter(x * x, size=3, mode="nearest")
    responses = np.stack([
        x,
        np.abs(ndimage.correlate(x, _SOBEL_X, mode="nearest")),
        np.abs(ndimage.correlate(x, _SOBEL_Y, mode="nearest")),
        np.abs(ndimage.correlate(x, _LAPLACIAN, mode="nearest")),
        np.maximum(box_sq - box * box, 0.0),
        ndimage.maximum_filter(x, size=3, mode="nearest"),
        ndimage.minimum_filter(x, size=3, mode="nearest"),
        x - box,
    ])
    return responses


def extract_features(img: GrayImage, target: tuple[int, int, int]) -> FeatureMap:
    """Run the filter bank and average-pool each response to the target grid."""
    c, h, w = target
    if c != FILTER_BANK_SIZE:
        raise InputError(f"target channels must be {FILTER_BANK_SIZE}, got {c}")
    if h < 1 or w < 1:
        raise InputError(f"target spatial dims must be >= 1, got {h}x{w}")
    if h > img.height or w > img.width:
        raise InputError(
            f"target {h}x{w} larger than image {img.height}x{img.width}")
    responses = filter_bank(img)
    pooled = np.stack([_pool_to(r, h, w) for r in responses])
    return FeatureMap(pooled.astype(np.float32))


class FeatureDir:
    """Lazy, caching loader mapping feature_ref strings to FeatureMaps.

    Refs are paths relative to the base directory (the manifest's directory).
    """

    def __init__(self, base):
        self.base = Path(base)
        self._cache: dict[str, FeatureMap] = {}

    def __getitem__(self, ref: str) -> FeatureMap:
        fmap = self._cache.get(ref)
        if fmap is None:
            path = self.base / ref
            if not path.is_file():
                raise InputError(f"feature file not found: {path}")
            fmap = read_feature_map(path)
            self._cache[ref] = fmap
        return fmap

    def __contains__(self, ref: str) -> bool:
        return ref in self._cache or (self.base / ref).is_file()
