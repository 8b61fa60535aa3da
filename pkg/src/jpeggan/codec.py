"""Coefficients <-> pixels, in two interchangeable forms.

`encode_image` / `decode_image` are the plain-numpy reference codec used for
real data, oracles, and the CLI.  `decode_planes` is the same decode pipeline
expressed in differentiable tensor ops so gradients can flow from pixel-space
losses back into coefficient-space generators:

    dequantize -> inverse DCT (+128 level shift) -> chroma upsample
    -> YCbCr to RGB -> clip to [0, 255]

Both routes share every constant (quantization tables, DCT matrix, color
matrix), so they agree to floating-point accuracy; a test pins that.
"""

from __future__ import annotations

import numpy as np

from . import jpeg
from . import tensor as T
from .jpeg import EncodedImage
from .tensor import Tensor

__all__ = [
    "encode_image",
    "decode_image",
    "decode_samples",
    "encode_batch",
    "decode_batch",
    "decode_planes",
]


def encode_image(rgb: np.ndarray, quality_factor: int, mode: str) -> EncodedImage:
    """Reference encoder: HxWx3 pixels in [0, 255] -> quantized coefficients.

    Extents are edge-replicated up to the subsampling mode's macroblock
    multiple before encoding.
    """
    img = np.asarray(rgb, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3, got {img.shape}")
    if img.min() < 0.0 or img.max() > 255.0:
        raise ValueError("pixel values outside [0, 255]")
    fv, fh = jpeg.mode_factors(mode)
    img = jpeg.pad_multiple(img, 8 * fv, 8 * fh)
    h, w = img.shape[:2]

    ycc = jpeg.rgb_to_ycbcr(img)
    ql, qc = jpeg.quant_matrices(quality_factor)
    planes = {
        "y": (ycc[..., 0], ql),
        "cb": (jpeg.subsample(ycc[..., 1], mode), qc),
        "cr": (jpeg.subsample(ycc[..., 2], mode), qc),
    }
    levels = {}
    for name, (plane, q) in planes.items():
        blocks = jpeg.blockify(plane - 128.0)
        levels[name] = jpeg.quantize(jpeg.dct8x8(blocks), q)
    return EncodedImage(
        width=w,
        height=h,
        quality_factor=int(quality_factor),
        mode=mode,
        y=levels["y"],
        cb=levels["cb"],
        cr=levels["cr"],
    )


def decode_samples(enc: EncodedImage) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode to YCbCr sample planes at stored (subsampled) resolution.

    This is the stage standard-conformance tolerances are defined on, so
    interop comparisons against other decoders happen here rather than
    after color conversion.
    """
    enc.validate()
    ql, qc = jpeg.quant_matrices(enc.quality_factor)
    planes = []
    for levels, q in ((enc.y, ql), (enc.cb, qc), (enc.cr, qc)):
        pix = jpeg.idct8x8(jpeg.dequantize(levels, q)) + 128.0
        planes.append(jpeg.unblockify(pix))
    return planes[0], planes[1], planes[2]


def decode_image(enc: EncodedImage) -> np.ndarray:
    """Reference decoder: coefficients -> HxWx3 float pixels in [0, 255]."""
    y, cb, cr = decode_samples(enc)
    cb = jpeg.upsample(cb, enc.mode)
    cr = jpeg.upsample(cr, enc.mode)
    ycc = np.stack([y, cb, cr], axis=-1)
    return np.clip(jpeg.ycbcr_to_rgb(ycc), 0.0, 255.0)


def encode_batch(images: np.ndarray, quality_factor: int, mode: str) -> list[EncodedImage]:
    """Encode an (N, 3, H, W) batch; returns one container per image."""
    return [
        encode_image(np.transpose(img, (1, 2, 0)), quality_factor, mode)
        for img in np.asarray(images)
    ]


def decode_batch(encs: list[EncodedImage]) -> np.ndarray:
    """Decode containers of equal extents into an (N, 3, H, W) array."""
    outs = [np.transpose(decode_image(e), (2, 0, 1)) for e in encs]
    return np.stack(outs, axis=0)


def _block_left_right(x: Tensor, left: np.ndarray, right: np.ndarray) -> Tensor:
    """Apply `left @ B @ right` to every 8x8 tile of an (N, 1, H, W) plane."""
    n, c, h, w = x.shape
    bh, bw = h // 8, w // 8
    m = n * c * bh * bw
    tiles = T.reshape(x, (n, c, bh, 8, bw, 8))
    tiles = T.permute(tiles, (0, 1, 2, 4, 3, 5))      # n c bh bw 8 8
    blocks = T.reshape(tiles, (m * 8, 8))
    blocks = T.matmul(blocks, Tensor(np.ascontiguousarray(right).astype(x.data.dtype)))
    # left-multiply via the transpose trick: L @ B == (B^T @ L^T)^T
    blocks = T.reshape(blocks, (m, 8, 8))
    blocks = T.permute(blocks, (0, 2, 1))
    blocks = T.reshape(blocks, (m * 8, 8))
    blocks = T.matmul(blocks, Tensor(np.ascontiguousarray(left.T).astype(x.data.dtype)))
    blocks = T.reshape(blocks, (m, 8, 8))
    blocks = T.permute(blocks, (0, 2, 1))
    tiles = T.reshape(blocks, (n, c, bh, bw, 8, 8))
    tiles = T.permute(tiles, (0, 1, 2, 4, 3, 5))
    return T.reshape(tiles, (n, c, h, w))


def _dequant_idct(levels: Tensor, q: np.ndarray) -> Tensor:
    n, c, h, w = levels.shape
    q_tiled = np.tile(np.asarray(q, dtype=levels.data.dtype), (h // 8, w // 8))
    deq = T.mul(levels, T.expand(Tensor(q_tiled.reshape(1, 1, h, w)), (n, c, h, w)))
    t = jpeg.dct_matrix()
    return T.add_scalar(_block_left_right(deq, t.T, t), 128.0)


def decode_planes(y: Tensor, cb: Tensor, cr: Tensor, quality_factor: int, mode: str) -> Tensor:
    """Differentiable decode of quantizer-level planes to (N, 3, H, W) RGB.

    Gradients reach the level planes (and through a straight-through
    quantizer, the amplitudes behind them); the clip passes gradient only
    where pixels land strictly inside the displayable range.
    """
    if y.ndim != 4 or cb.ndim != 4 or cr.ndim != 4:
        raise T.ShapeError("decode_planes expects NCHW level planes")
    fv, fh = jpeg.mode_factors(mode)
    n, _, h, w = y.shape
    if cb.shape != (n, 1, h // fv, w // fh) or cr.shape != cb.shape:
        raise T.ShapeError(
            f"chroma shapes {cb.shape}/{cr.shape} inconsistent with luma {y.shape} under {mode}"
        )
    ql, qc = jpeg.quant_matrices(quality_factor)
    yp = _dequant_idct(y, ql)
    cbp = _dequant_idct(cb, qc)
    crp = _dequant_idct(cr, qc)
    if fv != 1 or fh != 1:
        cbp = T.upsample_repeat2d(cbp, fv, fh)
        crp = T.upsample_repeat2d(crp, fv, fh)
    ycc = T.concat([yp, cbp, crp], axis=1)            # n 3 h w

    m, off = jpeg.ycbcr_to_rgb_matrix()
    dtype = y.data.dtype
    pix = T.permute(ycc, (0, 2, 3, 1))
    pix = T.reshape(pix, (n * h * w, 3))
    pix = T.matmul(pix, Tensor(np.ascontiguousarray(m.T).astype(dtype)))
    pix = T.add(pix, T.expand(Tensor(off.reshape(1, 3).astype(dtype)), (n * h * w, 3)))
    pix = T.reshape(pix, (n, h, w, 3))
    pix = T.permute(pix, (0, 3, 1, 2))
    return T.clamp(pix, 0.0, 255.0)
