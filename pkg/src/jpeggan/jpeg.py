"""Baseline JPEG numerics: color transforms, 8x8 DCT, quantization, layout.

Everything here is plain numpy on float64/float32 arrays; the differentiable
counterparts in other modules reuse these constants so both routes compute
identical arithmetic.

Conventions fixed across the package:

* full-range JFIF YCbCr (no studio swing), chroma centered on 128;
* pixels are level-shifted by -128 before the forward DCT and the decoder
  adds 128 back after the inverse;
* the DCT is the orthonormal 2-D DCT-II, so a constant block of value v
  (after the shift) has DC 8*v and Parseval holds exactly;
* quantization rounds half away from zero;
* chroma subsampling is block-mean pooling, upsampling is nearest-neighbor
  replication.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LUMA_QUANT_BASE",
    "CHROMA_QUANT_BASE",
    "MODES",
    "EncodedImage",
    "rgb_to_ycbcr",
    "ycbcr_to_rgb",
    "ycbcr_to_rgb_matrix",
    "dct_matrix",
    "dct8x8",
    "idct8x8",
    "scale_quant_matrix",
    "quant_matrices",
    "round_half_away",
    "quantize",
    "dequantize",
    "subsample",
    "upsample",
    "mode_factors",
    "pad_multiple",
    "zigzag",
    "inverse_zigzag",
    "ZIGZAG_INDEX",
    "blockify",
    "unblockify",
    "AMPLITUDE_LIMIT",
]

# 50-quality base quantization tables for luma and chroma.
LUMA_QUANT_BASE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)

CHROMA_QUANT_BASE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.int64,
)

MODES = ("4:4:4", "4:2:2", "4:2:0")

# Where generator amplitudes are clamped before quantization.  Keeps every
# coefficient inside the range a baseline entropy coder can represent
# (AC category <= 10, DC difference category <= 11) for any Q >= 1.
AMPLITUDE_LIMIT = 1016.0

# Standard zig-zag scan: ZIGZAG_INDEX[k] is the (row-major) block position of
# the k-th scan element.
ZIGZAG_INDEX = np.array(
    [
        0, 1, 8, 16, 9, 2, 3, 10,
        17, 24, 32, 25, 18, 11, 4, 5,
        12, 19, 26, 33, 40, 48, 41, 34,
        27, 20, 13, 6, 7, 14, 21, 28,
        35, 42, 49, 56, 57, 50, 43, 36,
        29, 22, 15, 23, 30, 37, 44, 51,
        58, 59, 52, 45, 38, 31, 39, 46,
        53, 60, 61, 54, 47, 55, 62, 63,
    ],
    dtype=np.int64,
)

_RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCBCR_OFFSET = np.array([0.0, 128.0, 128.0])


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """Full-range RGB -> YCbCr on an (..., 3) array of values in [0, 255]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ _RGB_TO_YCBCR.T + _YCBCR_OFFSET


def ycbcr_to_rgb_matrix() -> tuple[np.ndarray, np.ndarray]:
    """(M, off) with rgb = ycbcr @ M.T + off, the exact inverse transform."""
    M = np.linalg.inv(_RGB_TO_YCBCR)
    return M, -M @ _YCBCR_OFFSET


def ycbcr_to_rgb(ycbcr: np.ndarray) -> np.ndarray:
    """Exact inverse of rgb_to_ycbcr (no clipping, no rounding)."""
    M, off = ycbcr_to_rgb_matrix()
    return np.asarray(ycbcr, dtype=np.float64) @ M.T + off


def dct_matrix(dtype=np.float64) -> np.ndarray:
    """The orthonormal 8x8 DCT-II matrix T, so dct(b) = T @ b @ T.T."""
    n = np.arange(8)
    k = n.reshape(8, 1)
    T = np.cos((2 * n + 1) * k * np.pi / 16) * 0.5
    T[0, :] = 1.0 / np.sqrt(8.0)
    return T.astype(dtype)


_DCT_T = dct_matrix()


def dct8x8(block: np.ndarray) -> np.ndarray:
    """Forward 2-D DCT on the trailing two axes (each 8x8)."""
    b = np.asarray(block, dtype=np.float64)
    if b.shape[-2:] != (8, 8):
        raise ValueError(f"expected trailing 8x8, got {b.shape}")
    return _DCT_T @ b @ _DCT_T.T


def idct8x8(coef: np.ndarray) -> np.ndarray:
    c = np.asarray(coef, dtype=np.float64)
    if c.shape[-2:] != (8, 8):
        raise ValueError(f"expected trailing 8x8, got {c.shape}")
    return _DCT_T.T @ c @ _DCT_T


def scale_quant_matrix(base: np.ndarray, quality: float) -> np.ndarray:
    """Scale a 50-quality base table to an arbitrary quality in (0, 100]."""
    if not (0 < quality <= 100):
        raise ValueError(f"quality {quality} outside (0, 100]")
    base = np.asarray(base, dtype=np.float64)
    if quality >= 50:
        scaled = np.floor((100.0 - quality) / 50.0 * base + 0.5)
    else:
        scaled = np.floor(50.0 / quality * base + 0.5)
    return np.maximum(1, scaled).astype(np.int64)


def quant_matrices(quality: float) -> tuple[np.ndarray, np.ndarray]:
    """(luma, chroma) quantization matrices at the given quality factor."""
    return (
        scale_quant_matrix(LUMA_QUANT_BASE, quality),
        scale_quant_matrix(CHROMA_QUANT_BASE, quality),
    )


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (numpy rounds to even)."""
    x = np.asarray(x)
    return np.floor(np.abs(x) + 0.5) * np.sign(x)


def quantize(coef: np.ndarray, q: np.ndarray) -> np.ndarray:
    """coef / q, rounded half away from zero, as int64 (trailing 8x8 axes)."""
    return round_half_away(np.asarray(coef, dtype=np.float64) / q).astype(np.int64)


def dequantize(levels: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.asarray(levels, dtype=np.float64) * q


def mode_factors(mode: str) -> tuple[int, int]:
    """(vertical, horizontal) chroma reduction for a subsampling mode."""
    if mode == "4:4:4":
        return 1, 1
    if mode == "4:2:2":
        return 1, 2
    if mode == "4:2:0":
        return 2, 2
    raise ValueError(f"unknown subsampling mode {mode!r}")


def subsample(plane: np.ndarray, mode: str) -> np.ndarray:
    """Block-mean chroma reduction of a 2-D plane."""
    fv, fh = mode_factors(mode)
    if fv == fh == 1:
        return np.asarray(plane, dtype=np.float64).copy()
    p = np.asarray(plane, dtype=np.float64)
    h, w = p.shape
    if h % fv or w % fh:
        raise ValueError(f"{h}x{w} plane not divisible by {fv}x{fh}")
    return p.reshape(h // fv, fv, w // fh, fh).mean(axis=(1, 3))

def upsample(plane: np.ndarray, mode: str) -> np.ndarray:
    """Nearest-neighbor inverse of `subsample` (replicates each sample)."""
    fv, fh = mode_factors(mode)
    p = np.asarray(plane, dtype=np.float64)
    if fv == fh == 1:
        return p.copy()
    return np.repeat(np.repeat(p, fv, axis=0), fh, axis=1)


def pad_multiple(img: np.ndarray, mh: int, mw: int) -> np.ndarray:
    """Edge-replicate an HxWxC (or HxW) array up to multiples of (mh, mw)."""
    h, w = img.shape[:2]
    ph = (-h) % mh
    pw = (-w) % mw
    if ph == 0 and pw == 0:
        return img
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad, mode="edge")


def zigzag(block: np.ndarray) -> np.ndarray:
    """8x8 block -> length-64 vector in standard scan order."""
    b = np.asarray(block)
    if b.shape != (8, 8):
        raise ValueError("zigzag expects one 8x8 block")
    return b.reshape(64)[ZIGZAG_INDEX]


def inverse_zigzag(vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec)
    if v.shape != (64,):
        raise ValueError("inverse_zigzag expects 64 values")
    out = np.empty(64, dtype=v.dtype)
    out[ZIGZAG_INDEX] = v
    return out.reshape(8, 8)


def blockify(plane: np.ndarray) -> np.ndarray:
    """(H, W) -> (H/8, W/8, 8, 8) view-copy of 8x8 tiles."""
    h, w = plane.shape
    if h % 8 or w % 8:
        raise ValueError(f"plane {h}x{w} not divisible by 8")
    return np.ascontiguousarray(
        plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    )


def unblockify(blocks: np.ndarray) -> np.ndarray:
    by, bx = blocks.shape[:2]
    return np.ascontiguousarray(
        blocks.transpose(0, 2, 1, 3).reshape(by * 8, bx * 8)
    )


@dataclass
class EncodedImage:
    """Quantized block-DCT coefficients for one image.

    Planes are stored as (blocks_y, blocks_x, 8, 8) int arrays of quantizer
    levels.  `width`/`height` are the padded luma extents in pixels; chroma
    extents follow from the subsampling mode.
    """

    width: int
    height: int
    quality_factor: int
    mode: str
    y: np.ndarray = field(repr=False)
    cb: np.ndarray = field(repr=False)
    cr: np.ndarray = field(repr=False)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"bad mode {self.mode!r}")
        if not (0 < self.quality_factor <= 100):
            raise ValueError(f"bad quality factor {self.quality_factor}")
        fv, fh = mode_factors(self.mode)
        if self.width % (8 * fh) or self.height % (8 * fv):
            raise ValueError(
                f"extents {self.width}x{self.height} not multiples of the "
                f"{self.mode} macroblock"
            )
        ql, qc = quant_matrices(self.quality_factor)
        shapes = {
            "y": (self.height // 8, self.width // 8, 8, 8),
            "cb": (self.height // (8 * fv), self.width // (8 * fh), 8, 8),
            "cr": (self.height // (8 * fv), self.width // (8 * fh), 8, 8),
        }
        for name, q in (("y", ql), ("cb", qc), ("cr", qc)):
            plane = getattr(self, name)
            if plane.shape != shapes[name]:
                raise ValueError(
                    f"{name} plane shape {plane.shape} != {shapes[name]}"
                )
            if not np.issubdtype(plane.dtype, np.integer):
                raise ValueError(f"{name} plane must be integer levels")
            bound = 1024 + 8 * q
            if np.any(np.abs(plane * q) > bound):
                raise ValueError(f"{name} plane has out-of-range amplitudes")
