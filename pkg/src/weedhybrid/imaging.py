"""Image preprocessing and classical augmentation.

All operations work on :class:`ImageU8`, an 8-bit row-major, channel-
interleaved image container (grayscale or RGB), and are deterministic pure
functions.  The canonical preprocessing pipeline is::

    resize -> median denoise -> adaptive histogram equalization -> gamma
           -> standardize to a float32 model tensor

Denoising runs before the contrast operations so impulse noise cannot
distort tile histograms.  Disk I/O is binary PPM (P6) for color and PGM
(P5) for grayscale; no other container is parsed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as tensor_ops
from .errors import ContractError, DimensionError, FormatError

__all__ = [
    "ImageU8",
    "PreprocessConfig",
    "read_image",
    "write_image",
    "resize_bilinear",
    "median_filter",
    "equalization_mappings",
    "adaptive_hist_eq",
    "adjust_brightness",
    "gamma_correct",
    "auto_gamma",
    "to_model_tensor",
    "geometric_augment",
    "preprocess_image",
    "preprocess",
    "GEOMETRIC_OPS",
]

GEOMETRIC_OPS = ("hflip", "vflip", "rot90", "rot180", "rot270")

# ITU-R 601 luma weights used when equalizing color images.
_LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class ImageU8:
    """8-bit image: ``pixels`` holds H*W*C bytes, row-major, interleaved."""

    height: int
    width: int
    channels: int
    pixels: bytes

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DimensionError(
                f"image extents must be positive, got {self.height}x{self.width}")
        if self.channels not in (1, 3):
            raise ContractError(f"channels must be 1 or 3, got {self.channels}")
        want = self.height * self.width * self.channels
        if len(self.pixels) != want:
            raise ContractError(
                f"pixel buffer holds {len(self.pixels)} bytes, expected {want}")

    @classmethod
    def from_array(cls, arr) -> "ImageU8":
        """Build from an (H,W) or (H,W,C) array; values are cast to uint8."""
        a = np.asarray(arr)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3:
            raise DimensionError(f"expected 2-D or 3-D array, got shape {a.shape}")
        a = np.ascontiguousarray(a.astype(np.uint8))
        h, w, c = a.shape
        return cls(h, w, c, a.tobytes())

    def as_array(self):
        """Return the pixels as an (H, W, C) uint8 array."""
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, self.channels)


@dataclass(frozen=True)
class PreprocessConfig:
    """Parameters of the fixed preprocessing pipeline.

    ``beta`` is an optional additive brightness offset applied just before
    gamma correction; it defaults to 0.0 (disabled).  ``normalize`` selects
    per-channel standardization of the final tensor versus a plain [0,1]
    scaling.
    """

    target_size: tuple = (224, 224)
    median_window: int = 3
    clahe_tile: int = 8
    clahe_clip: float = 2.0
    gamma: float = 1.0
    beta: float = 0.0
    normalize: bool = True

    def __post_init__(self):
        th, tw = self.target_size
        if th < 1 or tw < 1:
            raise DimensionError(f"target size must be positive, got {self.target_size}")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ContractError(
                f"median window must be odd and >= 1, got {self.median_window}")
        if self.clahe_tile < 1:
            raise ContractError(f"clahe tile must be >= 1, got {self.clahe_tile}")
        if self.clahe_clip <= 0:
            raise ContractError(f"clahe clip must be positive, got {self.clahe_clip}")
        if self.gamma <= 0:
            raise ContractError(f"gamma must be positive, got {self.gamma}")


# ---------------------------------------------------------------------------
# PPM / PGM I/O


def _next_token(buf: bytes, pos: int) -> tuple:
    """Return (token, new_pos), skipping whitespace and # comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"truncated header at byte {start}")
    return buf[start:pos], pos


def read_image(path) -> ImageU8:
    """Read a binary PGM (P5) or PPM (P6) file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _next_token(buf, 0)
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise FormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _next_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"non-numeric {name} field {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"non-positive image extents {width}x{height}")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"expected whitespace after maxval at byte {pos}")
    pos += 1
    want = height * width * channels
    data = buf[pos:pos + want]
    if len(data) != want:
        raise FormatError(
            f"pixel payload holds {len(data)} bytes, expected {want}")
    return ImageU8(height, width, channels, data)


def write_image(path, img: ImageU8) -> None:
    """Write a binary PGM (1 channel) or PPM (3 channels) file atomically."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(img.pixels)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Geometry


def resize_bilinear(img: ImageU8, target) -> ImageU8:
    """Resize with bilinear interpolation, half-pixel-center convention."""
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise DimensionError(f"target size must be positive, got {target}")
    if (th, tw) == (img.height, img.width):
        return img
    arr = img.as_array().astype(np.float64)
    h, w = img.height, img.width

    def axis_weights(n_out, n_in):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_weights(th, h)
    x0, x1, wx = axis_weights(tw, w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = arr[y0][:, x0] * (1.0 - wx) + arr[y0][:, x1] * wx
    bot = arr[y1][:, x0] * (1.0 - wx) + arr[y1][:, x1] * wx
    out = top * (1.0 - wy) + bot * wy
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return ImageU8(th, tw, img.channels, out.tobytes())


def geometric_augment(img: ImageU8, op: str) -> ImageU8:
    """Apply an exact pixel permutation: flip or quarter-turn rotation."""
    arr = img.as_array()
    if op == "hflip":
        out = arr[:, ::-1]
    elif op == "vflip":
        out = arr[::-1, :]
    elif op == "rot90":
        out = np.rot90(arr, 1)
    elif op == "rot180":
        out = np.rot90(arr, 2)
    elif op == "rot270":
        out = np.rot90(arr, 3)
    else:
        raise ContractError(f"unknown geometric op {op!r}; expected one of "
                            f"{', '.join(GEOMETRIC_OPS)}")
    out = np.ascontiguousarray(out)
    return ImageU8(out.shape[0], out.shape[1], img.channels, out.tobytes())


# ---------------------------------------------------------------------------
# Intensity operations


def median_filter(img: ImageU8, window: int = 3) -> ImageU8:
    """Per-channel windowed median with clamp-to-border edge handling."""
    if window < 1 or window % 2 == 0:
        raise ContractError(f"median window must be odd and >= 1, got {window}")
    if window == 1:
        return img
    arr = img.as_array()
    r = window // 2
    padded = np.pad(arr, ((r, r), (r, r), (0, 0)), mode="edge")
    view = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(0, 1))
    out = np.median(view, axis=(-2, -1)).astype(np.uint8)
    return ImageU8(img.height, img.width, img.channels, out.tobytes())


def _luminance(arr) -> np.ndarray:
    """Quantized ITU-R 601 luma of an (H,W,3) uint8 array, as uint8."""
    r = arr[:, :, 0].astype(np.float64)
    g = arr[:, :, 1].astype(np.float64)
    b = arr[:, :, 2].astype(np.float64)
    y = _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b
    return np.floor(y + 0.5).astype(np.uint8)


def equalization_mappings(img: ImageU8, tile: int = 8, clip: float = 2.0):
    """Per-tile clipped-equalization mappings used by :func:`adaptive_hist_eq`.

    Returns ``(row_bounds, col_bounds, luts)`` where ``luts`` has shape
    (grid_rows, grid_cols, 256) and each mapping is monotone non-decreasing.
    The grid is ``tile`` per axis, clamped to the image extent; tile
    boundaries are ``floor(i * extent / grid)``.  Each tile histogram is
    clipped at ``max(1, clip * area / 256)`` counts per bin, the clipped
    excess is redistributed uniformly, and the mapping is
    ``255 * cdf(v) / area``.
    """
    if tile < 1:
        raise ContractError(f"tile must be >= 1, got {tile}")
    if clip <= 0:
        raise ContractError(f"clip must be positive, got {clip}")
    arr = img.as_array()
    h, w = img.height, img.width
    lum = _luminance(arr) if img.channels == 3 else arr[:, :, 0]
    gy = min(tile, h)
    gx = min(tile, w)
    by = np.floor(np.arange(gy + 1, dtype=np.int64) * h / gy).astype(np.int64)
    bx = np.floor(np.arange(gx + 1, dtype=np.int64) * w / gx).astype(np.int64)
    luts = np.empty((gy, gx, 256), dtype=np.float64)
    for ty in range(gy):
        for tx in range(gx):
            block = lum[by[ty]:by[ty + 1], bx[tx]:bx[tx + 1]]
            hist = np.bincount(block.ravel(), minlength=256).astype(np.float64)
            area = block.size
            climit = max(1.0, clip * area / 256.0)
            excess = float(np.sum(np.maximum(hist - climit, 0.0)))
            share = excess / 256.0
            running = np.cumsum(np.minimum(hist, climit) + share)
            luts[ty, tx] = 255.0 * running / area
    return by, bx, luts


def _blend_axis(extent: int, bounds) -> tuple:
    """Tile index and fractional weight toward the next tile, per coordinate."""
    n = len(bounds) - 1
    centers = (bounds[:-1] + bounds[1:] - 1) / 2.0
    pos = np.arange(extent, dtype=np.float64)
    if n == 1:
        return np.zeros(extent, dtype=np.int64), np.zeros(extent, dtype=np.float64)
    t = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, n - 2)
    u = np.clip((pos - centers[t]) / (centers[t + 1] - centers[t]), 0.0, 1.0)
    return t, u


def adaptive_hist_eq(img: ImageU8, tile: int = 8, clip: float = 2.0) -> ImageU8:
    """Contrast-limited adaptive histogram equalization.

    Grayscale images are equalized directly.  Color images equalize the
    quantized luma channel and rescale all three channels by the ratio of
    equalized to original luma, preserving chroma ratios; zero-luma pixels
    take the equalized value on every channel.  Each pixel blends the
    mappings of its four nearest tile centers bilinearly, and the final
    value is rounded half-up.
    """
    by, bx, luts = equalization_mappings(img, tile, clip)
    arr = img.as_array()
    h, w = img.height, img.width
    gy, gx = luts.shape[0], luts.shape[1]
    lum = _luminance(arr) if img.channels == 3 else arr[:, :, 0]

    ty, uy = _blend_axis(h, by)
    tx, ux = _blend_axis(w, bx)
    ty2 = np.minimum(ty + 1, gy - 1)
    tx2 = np.minimum(tx + 1, gx - 1)

    flat = luts.reshape(gy * gx, 256)
    v = lum.astype(np.int64)
    a = flat[(ty[:, None] * gx + tx[None, :]), v]
    b = flat[(ty[:, None] * gx + tx2[None, :]), v]
    c = flat[(ty2[:, None] * gx + tx[None, :]), v]
    d = flat[(ty2[:, None] * gx + tx2[None, :]), v]
    w00 = (1.0 - uy)[:, None] * (1.0 - ux)[None, :]
    w01 = (1.0 - uy)[:, None] * ux[None, :]
    w10 = uy[:, None] * (1.0 - ux)[None, :]
    w11 = uy[:, None] * ux[None, :]
    m = w00 * a + w01 * b + w10 * c + w11 * d

    if img.channels == 1:
        out = np.clip(np.floor(m + 0.5), 0, 255).astype(np.uint8)[:, :, None]
        return ImageU8(h, w, 1, out.tobytes())

    vf = lum.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(vf > 0, m / np.where(vf > 0, vf, 1.0), 0.0)
    scaled = np.clip(np.floor(arr.astype(np.float64) * ratio[:, :, None] + 0.5),
                     0, 255)
    fallback = np.clip(np.floor(m + 0.5), 0, 255)
    out = np.where((vf == 0)[:, :, None], fallback[:, :, None], scaled)
    return ImageU8(h, w, 3, out.astype(np.uint8).tobytes())


def adjust_brightness(img: ImageU8, beta: float) -> ImageU8:
    """Additive brightness offset, clipped to [0, 255]; beta=0 is identity."""
    if beta == 0.0:
        return img
    arr = img.as_array().astype(np.float64) + beta
    out = np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)
    return ImageU8(img.height, img.width, img.channels, out.tobytes())


def gamma_correct(img: ImageU8, gamma: float) -> ImageU8:
    """Power-law intensity mapping: out = round(255 * (in/255) ** gamma)."""
    if gamma <= 0:
        raise ContractError(f"gamma must be positive, got {gamma}")
    if gamma == 1.0:
        return img
    levels = np.arange(256, dtype=np.float64) / 255.0
    lut = np.clip(np.floor(255.0 * np.power(levels, gamma) + 0.5), 0, 255)
    out = lut.astype(np.uint8)[img.as_array()]
    return ImageU8(img.height, img.width, img.channels, out.tobytes())


def auto_gamma(img: ImageU8) -> float:
    """Per-image adaptive gamma that moves the mean intensity toward mid-gray.

    Solves (mean/255) ** gamma = 0.5 and clamps the result to [0.25, 4.0].
    """
    mean = float(img.as_array().mean()) / 255.0
    mean = min(max(mean, 1e-6), 1.0 - 1e-6)
    return float(min(max(np.log(0.5) / np.log(mean), 0.25), 4.0))


# ---------------------------------------------------------------------------
# Model tensor conversion and the full pipeline


def to_model_tensor(img: ImageU8) -> tensor_ops.Tensor:
    """Scale to [0,1] and standardize each channel: (x - mean) / (std + 1e-6).

    Computed on the integer scale as (x - mu) / (sigma + 255e-6), which is
    the same formula with every term multiplied by 255; integer-valued
    means are exact, so constant channels come out exactly zero.
    """
    chw = np.transpose(img.as_array(), (2, 0, 1)).astype(np.float64)
    mean = chw.mean(axis=(1, 2), keepdims=True)
    std = chw.std(axis=(1, 2), keepdims=True)
    return tensor_ops.Tensor((chw - mean) / (std + 255.0e-6))


def preprocess_image(img: ImageU8, cfg: PreprocessConfig = PreprocessConfig()) -> ImageU8:
    """The image-space stages of the pipeline (everything but scaling)."""
    img = resize_bilinear(img, cfg.target_size)
    img = median_filter(img, cfg.median_window)
    img = adaptive_hist_eq(img, cfg.clahe_tile, cfg.clahe_clip)
    img = adjust_brightness(img, cfg.beta)
    return gamma_correct(img, cfg.gamma)


def preprocess(img: ImageU8, cfg: PreprocessConfig = PreprocessConfig()):
    """Run the full pipeline and return a (C,H,W) float32 model tensor."""
    img = preprocess_image(img, cfg)
    if cfg.normalize:
        return to_model_tensor(img)
    return tensor_ops.Tensor(
        np.transpose(img.as_array(), (2, 0, 1)).astype(np.float64) / 255.0)
