"""JPEG-style frequency decomposition of RGB images.

Images are channel-first arrays ``(3, H, W)`` or batches ``(N, 3, H, W)`` with
values in [0, 1]. Each YUV plane is cut into 8x8 blocks, transformed with an
orthonormal 2-D DCT-II, and every zig-zag frequency becomes one channel of an
``(H/8, W/8)`` map. Only the retained frequencies are kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCK = 8
NUM_FREQ = BLOCK * BLOCK

# JFIF full-range YCbCr
RGB_TO_YUV = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
YUV_OFFSET = np.array([0.0, 0.5, 0.5])
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)


def _zigzag_order() -> list[tuple[int, int]]:
    order = []
    for s in range(2 * BLOCK - 1):
        rows = range(max(0, s - BLOCK + 1), min(s, BLOCK - 1) + 1)
        cells = [(r, s - r) for r in rows]
        # odd anti-diagonals run top-right to bottom-left
        order.extend(cells if s % 2 else cells[::-1])
    return order


ZIGZAG: tuple[tuple[int, int], ...] = tuple(_zigzag_order())
ZIGZAG_FLAT = np.array([r * BLOCK + c for r, c in ZIGZAG])
ZIGZAG_INDEX = {rc: i for i, rc in enumerate(ZIGZAG)}


def _dct_matrix() -> np.ndarray:
    u = np.arange(BLOCK)[:, None]
    x = np.arange(BLOCK)[None, :]
    c = np.cos((2 * x + 1) * u * np.pi / (2 * BLOCK)) * np.sqrt(2.0 / BLOCK)
    c[0] /= np.sqrt(2.0)
    return c


DCT = _dct_matrix()


def _check_unit_range(image: np.ndarray) -> None:
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    lo, hi = float(image.min()), float(image.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"image values must lie in [0, 1], got range [{lo:.6g}, {hi:.6g}]")


def _check_dims(h: int, w: int) -> None:
    if h % BLOCK or w % BLOCK or h <= 0 or w <= 0:
        raise ValueError(f"image height and width must be positive multiples of {BLOCK}, got {h}x{w}")


def rgb_to_yuv(image: np.ndarray) -> np.ndarray:
    """RGB in [0,1] to full-resolution Y, U, V planes (same layout as the input)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 3 or image.shape[-3] != 3:
        raise ValueError(f"expected (..., 3, H, W) image, got shape {image.shape}")
    _check_unit_range(image)
    _check_dims(*image.shape[-2:])
    yuv = np.einsum("ij,...jhw->...ihw", RGB_TO_YUV, image)
    return yuv + YUV_OFFSET[:, None, None]


def yuv_to_rgb(yuv: np.ndarray) -> np.ndarray:
    yuv = np.asarray(yuv, dtype=np.float64)
    if yuv.ndim < 3 or yuv.shape[-3] != 3:
        raise ValueError(f"expected (..., 3, H, W) planes, got shape {yuv.shape}")
    return np.einsum("ij,...jhw->...ihw", YUV_TO_RGB, yuv - YUV_OFFSET[:, None, None])


def fdct_block(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of one or more trailing 8x8 blocks."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape[-2:] != (BLOCK, BLOCK):
        raise ValueError(f"expected trailing 8x8 block, got shape {block.shape}")
    if not np.isfinite(block).all():
        raise ValueError("block contains non-finite values")
    return DCT @ block @ DCT.T


def idct_block(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-2:] != (BLOCK, BLOCK):
        raise ValueError(f"expected trailing 8x8 block, got shape {coeffs.shape}")
    if not np.isfinite(coeffs).all():
        raise ValueError("coefficients contain non-finite values")
    return DCT.T @ coeffs @ DCT


def _to_blocks(planes: np.ndarray) -> np.ndarray:
    *lead, h, w = planes.shape
    b = planes.reshape(*lead, h // BLOCK, BLOCK, w // BLOCK, BLOCK)
    return np.swapaxes(b, -3, -2)  # ..., h/8, w/8, 8, 8


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    *lead, bh, bw, _, _ = blocks.shape
    return np.swapaxes(blocks, -3, -2).reshape(*lead, bh * BLOCK, bw * BLOCK)


def default_retained_set(count: int) -> tuple[int, ...]:
    """Keep the ``count`` highest zig-zag frequencies, dropping DC and the low ACs first."""
    if not isinstance(count, (int, np.integer)) or not 1 <= count <= NUM_FREQ:
        raise ValueError(f"retained count must be an integer in [1, {NUM_FREQ}], got {count!r}")
    return tuple(range(NUM_FREQ - int(count), NUM_FREQ))


def amplitude_retained_set(images: np.ndarray, count: int) -> tuple[int, ...]:
    """Data-dependent alternative: drop the ``64 - count`` frequencies with largest mean |coefficient|."""
    default_retained_set(count)
    coeffs = block_coefficients(images)  # ..., 64
    amp = np.abs(coeffs).reshape(-1, NUM_FREQ).mean(axis=0)
    # stable sort keeps lower zig-zag index first among ties
    order = np.argsort(-amp, kind="stable")
    return tuple(sorted(int(i) for i in order[NUM_FREQ - count:]))


def block_coefficients(images: np.ndarray) -> np.ndarray:
    """All 64 coefficients in zig-zag order: ``(..., 3, H/8, W/8, 64)``."""
    yuv = rgb_to_yuv(images)
    coef = fdct_block(_to_blocks(yuv))
    *lead, bh, bw, _, _ = coef.shape
    return coef.reshape(*lead, bh, bw, NUM_FREQ)[..., ZIGZAG_FLAT]


def _validate_retained(retained) -> np.ndarray:
    idx = np.asarray(sorted(set(int(i) for i in retained)), dtype=np.int64)
    if idx.size == 0 or idx[0] < 0 or idx[-1] >= NUM_FREQ:
        raise ValueError(f"retained set must be a nonempty subset of 0..{NUM_FREQ - 1}")
    return idx


@dataclass(frozen=True)
class CoefficientTensor:
    """Retained-frequency channels: ``(N, 3*|retained|, H/8, W/8)``, Y block then U then V."""

    data: np.ndarray
    retained: tuple[int, ...]
    image_hw: tuple[int, int]

    @property
    def channels(self) -> int:
        return self.data.shape[-3]


def decompose(images: np.ndarray, retained) -> CoefficientTensor:
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) images, got shape {images.shape}")
    _check_dims(*images.shape[-2:])
    idx = _validate_retained(retained)
    coef = block_coefficients(images)[..., idx]  # n, 3, bh, bw, r
    n, _, bh, bw, r = coef.shape
    data = np.ascontiguousarray(coef.transpose(0, 1, 4, 2, 3).reshape(n, 3 * r, bh, bw))
    if single:
        data = data[0]
    return CoefficientTensor(data, tuple(int(i) for i in idx), tuple(images.shape[-2:]))


def recompose(coeffs, retained=None, image_hw=None) -> np.ndarray:
    """Invert :func:`decompose`, filling deleted frequencies with zeros. Returns RGB (unclipped)."""
    if isinstance(coeffs, CoefficientTensor):
        retained = coeffs.retained if retained is None else retained
        image_hw = coeffs.image_hw if image_hw is None else image_hw
        coeffs = coeffs.data
    data = np.asarray(coeffs, dtype=np.float64)
    single = data.ndim == 3
    if single:
        data = data[None]
    idx = _validate_retained(retained)
    n, ch, bh, bw = data.shape
    if ch != 3 * idx.size:
        raise ValueError(f"{ch} channels do not match 3 x {idx.size} retained frequencies")
    if image_hw is not None and tuple(image_hw) != (bh * BLOCK, bw * BLOCK):
        raise ValueError(f"coefficient grid {bh}x{bw} does not match image {image_hw}")
    zz = np.zeros((n, 3, bh, bw, NUM_FREQ))
    zz[..., idx] = data.reshape(n, 3, idx.size, bh, bw).transpose(0, 1, 3, 4, 2)
    natural = np.zeros_like(zz)
    natural[..., ZIGZAG_FLAT] = zz
    planes = _from_blocks(idct_block(natural.reshape(n, 3, bh, bw, BLOCK, BLOCK)))
    rgb = yuv_to_rgb(planes)
    return rgb[0] if single else rgb
