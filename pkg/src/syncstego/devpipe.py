"""Synthetic RAW development: sensor noise -> demosaic -> luminance -> downscale -> DCT.

The pipeline is the source of the inter-coefficient correlations that the
embedder later exploits.  Images are plain numpy arrays wrapped in small
dataclasses; DCT planes are stored blockwise as ``(blocks_h, blocks_w, 8, 8)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft, ndimage


class PipelineError(ValueError):
    """Invalid pipeline parameters or image sizes."""


@dataclass(frozen=True)
class NoiseParams:
    mu: float = 2.0**12
    a: float = 0.01
    b: float = 0.0

    def __post_init__(self):
        if self.mu < 0:
            raise PipelineError(f"mu must be >= 0, got {self.mu}")
        if self.variance < 0:
            raise PipelineError(f"noise variance a*mu+b must be >= 0, got {self.variance}")

    @property
    def variance(self) -> float:
        return self.a * self.mu + self.b


@dataclass
class RawImage:
    photosites: np.ndarray
    bit_depth: int = 14
    cfa: str = "RGGB"

    @property
    def height(self) -> int:
        return self.photosites.shape[0]

    @property
    def width(self) -> int:
        return self.photosites.shape[1]


@dataclass
class GrayImage:
    samples: np.ndarray

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]


@dataclass
class DctPlane:
    coefficients: np.ndarray  # (blocks_h, blocks_w, 8, 8)

    @property
    def blocks_shape(self) -> tuple[int, int]:
        return self.coefficients.shape[:2]

    @property
    def height(self) -> int:
        return 8 * self.coefficients.shape[0]

    @property
    def width(self) -> int:
        return 8 * self.coefficients.shape[1]


@dataclass
class QuantizedDctImage:
    coefficients: np.ndarray  # int16, (blocks_h, blocks_w, 8, 8)
    qtable: np.ndarray = field(default_factory=lambda: np.ones((8, 8), dtype=np.uint16))

    def __post_init__(self):
        self.qtable = np.asarray(self.qtable).reshape(8, 8).astype(np.uint16)
        if np.any(self.qtable < 1):
            raise PipelineError("quantization steps must be >= 1")
        self.coefficients = np.asarray(self.coefficients, dtype=np.int16)
        if self.coefficients.ndim != 4 or self.coefficients.shape[2:] != (8, 8):
            raise PipelineError(f"coefficients must be (bh, bw, 8, 8), got {self.coefficients.shape}")

    @property
    def blocks_shape(self) -> tuple[int, int]:
        return self.coefficients.shape[:2]

    @property
    def height(self) -> int:
        return 8 * self.coefficients.shape[0]

    @property
    def width(self) -> int:
        return 8 * self.coefficients.shape[1]

    def nzac(self) -> int:
        """Number of nonzero AC coefficients."""
        nz = self.coefficients != 0
        return int(nz.sum() - nz[:, :, 0, 0].sum())


def synth_raw(width, height, noise: NoiseParams, seed, bit_depth=14) -> RawImage:
    """Constant-luminosity RAW frame with i.i.d. Gaussian photosite noise."""
    if width % 2 or height % 2 or width <= 0 or height <= 0:
        raise PipelineError(f"RAW dimensions must be positive and even, got {width}x{height}")
    rng = np.random.default_rng(seed)
    plane = np.full((height, width), float(noise.mu))
    if noise.variance > 0:
        plane += rng.normal(0.0, np.sqrt(noise.variance), size=plane.shape)
    np.clip(plane, 0.0, None, out=plane)
    return RawImage(plane, bit_depth=bit_depth)


def synth_scene_raw(width, height, noise: NoiseParams, seed, contrast=0.35, bit_depth=14) -> RawImage:
    """RAW frame with smooth random scene content and signal-dependent noise.

    Used to make covers with a realistic share of nonzero AC coefficients; the
    covariance campaign itself uses :func:`synth_raw`.
    """
    if width % 2 or height % 2:
        raise PipelineError(f"RAW dimensions must be even, got {width}x{height}")
    rng = np.random.default_rng(seed)
    full = 2.0**bit_depth - 1
    scene = np.zeros((height, width))
    for scale in (32.0, 8.0, 2.0):
        layer = ndimage.gaussian_filter(rng.standard_normal((height, width)), scale, mode="wrap")
        scene += layer / (layer.std() + 1e-12) * (scale / 32.0) ** 0.5
    scene = noise.mu * (1.0 + contrast * scene / (scene.std() + 1e-12))
    scene = np.clip(scene, 0.0, full)
    var = np.maximum(noise.a * scene + noise.b, 0.0)
    plane = scene + rng.standard_normal(scene.shape) * np.sqrt(var)
    return RawImage(np.clip(plane, 0.0, full), bit_depth=bit_depth)


_K_GREEN = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=float) / 4.0
_K_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=float) / 4.0


def _cfa_masks(shape):
    # RGGB: R at (even, even), B at (odd, odd), G elsewhere
    yy, xx = np.indices(shape)
    r = (yy % 2 == 0) & (xx % 2 == 0)
    b = (yy % 2 == 1) & (xx % 2 == 1)
    return r, ~(r | b), b


def demosaic_bilinear(raw: RawImage) -> np.ndarray:
    """Bilinear CFA interpolation, returns an ``(h, w, 3)`` RGB array.

    Mirror extension keeps Bayer parity at the borders, so constants are
    reproduced exactly everywhere.
    """
    if raw.cfa != "RGGB":
        raise PipelineError(f"only RGGB layout is supported, got {raw.cfa}")
    x = raw.photosites
    r, g, b = _cfa_masks(x.shape)
    out = np.empty(x.shape + (3,))
    for i, (mask, k) in enumerate(((r, _K_RB), (g, _K_GREEN), (b, _K_RB))):
        out[..., i] = ndimage.convolve(np.where(mask, x, 0.0), k, mode="mirror")
    return out


def _resample_matrix(n_in, factor):
    """Triangle-kernel (bilinear, antialiased) downsampling operator ``(n_out, n_in)``."""
    n_out = int(np.floor(n_in / factor))
    support = max(factor, 1.0)
    centers = (np.arange(n_out) + 0.5) * factor - 0.5
    src = np.arange(n_in)
    w = np.clip(1.0 - np.abs(src[None, :] - centers[:, None]) / support, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    return w


def downscale_bilinear(img: np.ndarray, factor: float) -> np.ndarray:
    if factor < 1:
        raise PipelineError(f"downscale factor must be >= 1, got {factor}")
    if factor == 1:
        return img.copy()
    ry = _resample_matrix(img.shape[0], factor)
    rx = _resample_matrix(img.shape[1], factor)
    return ry @ img @ rx.T


def center_crop8(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h8, w8 = h - h % 8, w - w % 8
    if h8 < 8 or w8 < 8:
        raise PipelineError(f"developed image {h}x{w} is smaller than one 8x8 block")
    y0, x0 = (h - h8) // 2, (w - w8) // 2
    return img[y0:y0 + h8, x0:x0 + w8]


def develop(raw: RawImage, downscale_factor=1.0) -> GrayImage:
    """Demosaic, average channels, downscale, crop to a multiple of 8."""
    rgb = demosaic_bilinear(raw)
    lum = rgb.mean(axis=2)
    return GrayImage(center_crop8(downscale_bilinear(lum, downscale_factor)))


def blockify(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 8 or w % 8:
        raise PipelineError(f"dimensions must be multiples of 8, got {h}x{w}")
    return img.reshape(h // 8, 8, w // 8, 8).swapaxes(1, 2)


def unblockify(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.swapaxes(1, 2).reshape(8 * bh, 8 * bw)


def block_dct(gray: GrayImage) -> DctPlane:
    """Orthonormal 8x8 type-II DCT of every block."""
    blocks = blockify(np.asarray(gray.samples, dtype=float))
    return DctPlane(fft.dctn(blocks, type=2, axes=(2, 3), norm="ortho"))


def block_idct(plane: DctPlane) -> GrayImage:
    return GrayImage(unblockify(fft.idctn(plane.coefficients, type=2, axes=(2, 3), norm="ortho")))


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(dct: DctPlane, qtable) -> QuantizedDctImage:
    q = np.asarray(qtable, dtype=float).reshape(8, 8)
    if np.any(q < 1):
        raise PipelineError("quantization steps must be >= 1")
    c = round_half_away(dct.coefficients / q)
    if np.any(c > 32767) or np.any(c < -32768):
        raise PipelineError("quantized coefficient outside the 16-bit signed range")
    return QuantizedDctImage(c.astype(np.int16), q.astype(np.uint16))


def dequantize(img: QuantizedDctImage) -> DctPlane:
    return DctPlane(img.coefficients.astype(float) * img.qtable.astype(float))


# Annex K luminance table of the JPEG standard
_ANNEX_K_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
])


def jpeg_qtable(quality: int) -> np.ndarray:
    """IJG-scaled luminance quantization table for a quality factor in [1, 100]."""
    if not 1 <= quality <= 100:
        raise PipelineError(f"quality must be in [1, 100], got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    q = np.floor((_ANNEX_K_LUMA * scale + 50) / 100)
    return np.clip(q, 1, 255).astype(np.uint16)


def make_cover(size=64, seed=0, quality=None, noise: NoiseParams | None = None, downscale_factor=2.0):
    """Synthetic JPEG-like cover: scene RAW developed to 8-bit range, DCT, quantized.

    ``quality=None`` uses unit quantization steps.
    """
    noise = noise or NoiseParams(mu=2.0**12, a=1.0, b=0.0)
    raw_side = int(np.ceil(size * downscale_factor / 2.0)) * 2
    raw = synth_scene_raw(raw_side, raw_side, noise, seed)
    gray = develop(raw, downscale_factor)
    h, w = gray.samples.shape
    y0, x0 = (h - size) // 2, (w - size) // 2
    pix = gray.samples[y0:y0 + size, x0:x0 + size] * (255.0 / (2.0**raw.bit_depth - 1)) - 128.0
    qtable = np.ones((8, 8)) if quality is None else jpeg_qtable(quality)
    return quantize(block_dct(GrayImage(pix)), qtable)
