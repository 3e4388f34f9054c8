"""Image buffers, deterministic RNG, synthetic degradation, and PNM I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fileio import atomic_write_bytes
from .errors import (
    ConfigError,
    PnmMagicError,
    PnmMaxvalError,
    PnmError,
    PnmTruncatedError,
    ShapeError,
)

__all__ = [
    "ImageBuffer",
    "Rng",
    "add_awgn",
    "cubic_kernel",
    "resize_weights",
    "bicubic_resize_float",
    "bicubic_resize",
    "patch_anchors",
    "sr_anchor_pairs",
    "extract_patches",
    "read_pnm",
    "write_pnm",
    "encode_pnm",
    "synth_image",
]

_U64 = (1 << 64) - 1


class Rng:
    """splitmix64-seeded xorshift64* stream, identical on every platform.

    Gaussians come from Box-Muller applied to consecutive uniforms: each
    pair of uniforms yields two normals, and an odd request discards the
    trailing sine value (the uniforms are still consumed).
    """

    def __init__(self, seed: int) -> None:
        self.seed = seed & _U64
        z = (self.seed + 0x9E3779B97F4A7C15) & _U64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
        z ^= z >> 31
        self._state = z if z != 0 else 0x9E3779B97F4A7C15

    @classmethod
    def derived(cls, base_seed: int, index: int) -> "Rng":
        """Independent stream for worker/patch ``index``."""
        return cls((base_seed ^ index) & _U64)

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x = (x ^ (x << 25)) & _U64
        x ^= x >> 27
        self._state = x
        return (x * 0x2545F4914F6CDD1D) & _U64

    def uniform(self) -> float:
        """One double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_int(self, n: int) -> int:
        """One integer in [0, n)."""
        if n <= 0:
            raise ConfigError(f"uniform_int needs n > 0, got {n}")
        return int(self.uniform() * n)

    def normals(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        i = 0
        while i < n:
            u1 = self.uniform()
            u2 = self.uniform()
            r = math.sqrt(-2.0 * math.log(1.0 - u1))
            a = 2.0 * math.pi * u2
            out[i] = r * math.cos(a)
            i += 1
            if i < n:
                out[i] = r * math.sin(a)
                i += 1
        return out

    def truncated_normals(self, n: int, std: float, bound: float = 2.0) -> np.ndarray:
        """Normals with |z| <= bound (in units of std), by resampling."""
        out = np.empty(n, dtype=np.float64)
        filled = 0
        while filled < n:
            batch = self.normals(max(n - filled, 2))
            keep = batch[np.abs(batch) <= bound]
            take = min(keep.size, n - filled)
            out[filled:filled + take] = keep[:take]
            filled += take
        return out * std

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.uniform_int(i + 1)
            items[i], items[j] = items[j], items[i]


@dataclass
class ImageBuffer:
    """8-bit image, row-major samples of shape [H, W, C] with C in {1, 3}."""

    samples: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeError(f"image must be [H, W, C] with C in {{1, 3}}, got {arr.shape}")
        if arr.dtype != np.uint8:
            raise ShapeError(f"image samples must be uint8, got {arr.dtype}")
        self.samples = arr

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return self.samples.shape[2]

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.samples.copy())

    def to_float01(self) -> np.ndarray:
        """[C, H, W] float64 in [0, 1]."""
        return self.samples.astype(np.float64).transpose(2, 0, 1) / 255.0

    @classmethod
    def from_float01(cls, planes: np.ndarray) -> "ImageBuffer":
        """Round and clamp a [C, H, W] float array in [0, 1] back to 8 bits."""
        scaled = np.floor(np.asarray(planes, dtype=np.float64) * 255.0 + 0.5)
        clipped = np.clip(scaled, 0.0, 255.0).astype(np.uint8)
        return cls(clipped.transpose(1, 2, 0))


def add_awgn(img: ImageBuffer, sigma: float, rng: Rng) -> ImageBuffer:
    """Add white Gaussian noise of the given standard deviation (0..255 scale).

    Samples are perturbed in row-major order, rounded half-up, and clamped
    back to [0, 255]. sigma = 0 returns an identical copy.
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    noise = rng.normals(img.samples.size) * sigma
    vals = img.samples.reshape(-1).astype(np.float64) + noise
    out = np.clip(np.floor(vals + 0.5), 0.0, 255.0).astype(np.uint8)
    return ImageBuffer(out.reshape(img.samples.shape))


# ---------------------------------------------------------------------------
# Bicubic resampling (Matlab-convention half-pixel centers plus antialias)


def cubic_kernel(x: np.ndarray) -> np.ndarray:
    """Keys cubic interpolation kernel with a = -0.5."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = 1.5 * ax3 - 2.5 * ax2 + 1.0
    far = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def resize_weights(n_in: int, n_out: int, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-output source indices and kernel weights for one axis.

    Output sample i is centred at (i + 0.5) / scale - 0.5 in input
    coordinates. When downscaling the kernel is widened by 1/scale
    (antialias). Out-of-range taps clamp to the edge sample, and each
    weight row is normalized to sum to 1.
    """
    if n_out < 1:
        raise ConfigError(f"target extent must be >= 1, got {n_out}")
    antialias = scale < 1.0
    width = 4.0 / scale if antialias else 4.0
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    left = np.floor(centers - width / 2.0)
    taps = int(math.ceil(width)) + 2
    cols = left[:, None] + np.arange(taps, dtype=np.float64)[None, :]
    dist = centers[:, None] - cols
    if antialias:
        weights = scale * cubic_kernel(scale * dist)
    else:
        weights = cubic_kernel(dist)
    weights = weights / weights.sum(axis=1, keepdims=True)
    idx = np.clip(cols, 0, n_in - 1).astype(np.int64)
    return idx, weights


def bicubic_resize_float(img: np.ndarray, out_h: int, out_w: int,
                         scale_h: float | None = None,
                         scale_w: float | None = None) -> np.ndarray:
    """Separable bicubic resample of a float [H, W] or [H, W, C] array.

    The kernel scale defaults to out/in per axis; pass explicit scales when
    the requested extent was derived from a rational factor.
    """
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    sh = scale_h if scale_h is not None else out_h / h
    sw = scale_w if scale_w is not None else out_w / w
    iy, wy = resize_weights(h, out_h, sh)
    ix, wx = resize_weights(w, out_w, sw)
    rows = arr[iy]                       # (out_h, taps_y, W, C)
    tmp = np.einsum("ot,otwc->owc", wy, rows)
    cols = tmp[:, ix]                    # (out_h, out_w, taps_x, C)
    out = np.einsum("pt,optc->opc", wx, cols)
    return out[:, :, 0] if squeeze else out


def bicubic_resize(img: ImageBuffer, scale: float) -> ImageBuffer:
    """Resample an 8-bit image by a positive scale factor.

    Output extents are ceil(in * scale); values are rounded half-up and
    clamped to [0, 255]. A constant image stays exactly constant because
    every weight row sums to 1.
    """
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    out_h = int(math.ceil(img.height * scale))
    out_w = int(math.ceil(img.width * scale))
    res = bicubic_resize_float(img.samples.astype(np.float64), out_h, out_w,
                               scale_h=scale, scale_w=scale)
    clipped = np.clip(np.floor(res + 0.5), 0.0, 255.0).astype(np.uint8)
    return ImageBuffer(clipped)


# ---------------------------------------------------------------------------
# Patch extraction


def patch_anchors(height: int, width: int, patch: int, stride: int) -> list[tuple[int, int]]:
    """Top-left anchors of all patches on the stride grid, raster order."""
    if patch > min(height, width):
        raise ShapeError(f"patch {patch} exceeds image extent {height}x{width}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    return [
        (y, x)
        for y in range(0, height - patch + 1, stride)
        for x in range(0, width - patch + 1, stride)
    ]


def sr_anchor_pairs(lr_height: int, lr_width: int, patch: int, stride: int,
                    scale: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Aligned (LR anchor, HR anchor) pairs; the HR anchor is scale * LR."""
    return [((y, x), (scale * y, scale * x))
            for (y, x) in patch_anchors(lr_height, lr_width, patch, stride)]


def extract_patches(img: ImageBuffer, patch: int, stride: int, rng: Rng | None = None,
                    scale: int = 1):
    """Patch anchors for an image, optionally shuffled.

    Plain mode returns (y, x) anchors on the stride grid; with scale > 1
    the image is treated as the LR side and each entry is an aligned
    ((lr_y, lr_x), (hr_y, hr_x)) pair. Pass an Rng to shuffle the order.
    """
    if scale > 1:
        anchors = sr_anchor_pairs(img.height, img.width, patch, stride, scale)
    else:
        anchors = patch_anchors(img.height, img.width, patch, stride)
    if rng is not None:
        rng.shuffle(anchors)
    return anchors


# ---------------------------------------------------------------------------
# PNM (binary P5 grayscale / P6 color, maxval 255)


def encode_pnm(img: ImageBuffer) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n" + f"{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.samples.tobytes()


def write_pnm(path, img: ImageBuffer) -> None:
    atomic_write_bytes(path, encode_pnm(img))


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf) and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PnmError("unexpected end of header")
    return buf[start:pos], pos


def read_pnm(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise PnmMagicError(f"unsupported magic {magic!r} (need P5 or P6)")
    pos = 2
    try:
        w_tok, pos = _next_token(buf, pos)
        h_tok, pos = _next_token(buf, pos)
        m_tok, pos = _next_token(buf, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise PnmError(f"malformed header token: {exc}") from exc
    if maxval != 255:
        raise PnmMaxvalError(f"maxval must be 255, got {maxval}")
    pos += 1  # exactly one whitespace byte separates header and payload
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise PnmTruncatedError(f"payload has {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return ImageBuffer(arr.copy())


# ---------------------------------------------------------------------------
# Synthetic piecewise-smooth test scenes


def synth_image(height: int, width: int, channels: int, seed: int) -> ImageBuffer:
    """Deterministic scene: smooth field, hard-edged boxes, oriented gratings.

    The smooth background is a random coarse grid upsampled bicubically;
    boxes add edges and the sinusoid gratings add fine periodic texture, so
    a denoiser has to preserve structure rather than just lowpass. The
    gratings are confined to random bands so flat regions survive too.
    Identical (size, channels, seed) always yields identical bytes.
    """
    rng = Rng(seed)
    planes = np.empty((height, width, channels), dtype=np.float64)
    grid = 5
    for c in range(channels):
        coarse = np.array(
            [[40.0 + 175.0 * rng.uniform() for _ in range(grid)] for _ in range(grid)]
        )
        planes[:, :, c] = bicubic_resize_float(coarse, height, width)
    boxes = 2 + rng.uniform_int(3)
    for _ in range(boxes):
        bh = 3 + rng.uniform_int(max(height // 3, 1))
        bw = 3 + rng.uniform_int(max(width // 3, 1))
        y0 = rng.uniform_int(max(height - bh, 1))
        x0 = rng.uniform_int(max(width - bw, 1))
        shade = np.array([30.0 + 195.0 * rng.uniform() for _ in range(channels)])
        planes[y0:y0 + bh, x0:x0 + bw, :] = shade[None, None, :]
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    for _ in range(1 + rng.uniform_int(2)):
        amp = 15.0 + 30.0 * rng.uniform()
        wavelength = 3.0 + 6.0 * rng.uniform()
        theta = 2.0 * math.pi * rng.uniform()
        phase = 2.0 * math.pi * rng.uniform()
        wave = np.sin(
            2.0 * math.pi * (xs * math.cos(theta) + ys * math.sin(theta))
            / wavelength + phase)
        band_h = max(height // 3, 4) + rng.uniform_int(max(height // 2, 1))
        band_y = rng.uniform_int(max(height - band_h, 1))
        planes[band_y:band_y + band_h, :, :] += (
            amp * wave[band_y:band_y + band_h, :, None])
    out = np.clip(np.floor(planes + 0.5), 0.0, 255.0).astype(np.uint8)
    return ImageBuffer(out)
