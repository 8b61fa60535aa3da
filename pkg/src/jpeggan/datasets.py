"""Image sources: PPM files, CIFAR-style binaries, and a synthetic corpus.

Everything is exchanged as float arrays in [0, 255]; batches are (n, 3, h, w).
"""

from __future__ import annotations

import os

import numpy as np

from .rng import RngStreams

__all__ = [
    "read_ppm",
    "write_ppm",
    "load_cifar_batch",
    "synthetic_image",
    "synthetic_dataset",
    "load_dataset",
    "write_sample_grid",
]


def _read_header_tokens(fh, count):
    """Pull whitespace-separated header tokens, honouring '#' comments."""
    tokens = []
    while len(tokens) < count:
        ch = fh.read(1)
        if not ch:
            raise ValueError("truncated header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            continue
        tok = ch
        while True:
            ch = fh.read(1)
            if not ch or ch.isspace():
                break
            if ch == b"#":  # comment glued to a token ends it
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                break
            tok += ch
        tokens.append(tok)
    return tokens


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6) to an (h, w, 3) float32 array scaled to [0, 255]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
        width, height, maxval = (int(t) for t in _read_header_tokens(fh, 3))
        if width < 1 or height < 1:
            raise ValueError(f"{path}: bad extent {width}x{height}")
        if not 0 < maxval < 65536:
            raise ValueError(f"{path}: bad maxval {maxval}")
        wide = maxval > 255
        need = width * height * 3 * (2 if wide else 1)
        raw = fh.read(need)
        if len(raw) != need:
            raise ValueError(f"{path}: expected {need} sample bytes, got {len(raw)}")
    dtype = ">u2" if wide else np.uint8
    img = np.frombuffer(raw, dtype=dtype).reshape(height, width, 3)
    return img.astype(np.float32) * (255.0 / maxval)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got {image.shape}")
    if image.min() < 0 or image.max() > 255:
        raise ValueError("pixel values outside [0, 255]")
    data = np.round(image).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_cifar_batch(path, count: int | None = None) -> np.ndarray:
    """Channel-planar 32x32 records: one label byte then 3072 pixel bytes."""
    record = 1 + 3 * 32 * 32
    size = os.path.getsize(path)
    if size == 0 or size % record:
        raise ValueError(f"{path}: size {size} is not a multiple of {record}-byte records")
    total = size // record
    n = total if count is None else min(count, total)
    with open(path, "rb") as fh:
        raw = np.frombuffer(fh.read(n * record), dtype=np.uint8)
    recs = raw.reshape(n, record)[:, 1:]
    return recs.reshape(n, 3, 32, 32).astype(np.float32)


def _soft_disc(size, cy, cx, radius, sharpness):
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return 1.0 / (1.0 + np.exp(np.clip((dist - radius) * sharpness, -30, 30)))


def synthetic_image(gen: np.random.Generator, size: int = 32) -> np.ndarray:
    """One procedural (3, size, size) image: sky-like gradient, blobs, an edge.

    Smooth regions, occluding shapes, and a hard boundary give the codec
    both easy and hard content, roughly like a tiny photograph.
    """
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    img = np.empty((3, size, size))
    top, bottom = gen.uniform(40, 215, size=(2, 3))
    for c in range(3):
        img[c] = top[c] + (bottom[c] - top[c]) * yy
    ang = gen.uniform(0, 2 * np.pi)
    ripple = gen.uniform(0, 25) * np.sin(
        2 * np.pi * gen.uniform(0.5, 2.0) * (np.cos(ang) * xx + np.sin(ang) * yy)
    )
    img += ripple
    for _ in range(int(gen.integers(2, 5))):
        mask = _soft_disc(
            size,
            gen.uniform(0, size),
            gen.uniform(0, size),
            gen.uniform(size / 10, size / 3),
            gen.uniform(0.8, 4.0),
        )
        color = gen.uniform(20, 235, size=3)
        img = img * (1 - mask) + color[:, None, None] * mask
    if gen.uniform() < 0.5:  # hard horizon edge
        row = int(gen.integers(size // 4, 3 * size // 4))
        shade = gen.uniform(0.4, 0.9)
        img[:, row:, :] *= shade
    img += gen.normal(0, 1.5, size=img.shape)
    return np.clip(img, 0, 255).astype(np.float32)


def synthetic_dataset(seed: int, count: int, size: int = 32) -> np.ndarray:
    """Deterministic corpus; image i depends only on (seed, i), not on count."""
    if count < 1:
        raise ValueError("count must be positive")
    if size % 16:
        raise ValueError("size must be a multiple of 16")
    streams = RngStreams(seed)
    return np.stack(
        [synthetic_image(streams.spawn("synthetic-image", i), size) for i in range(count)]
    )


def load_dataset(source, count: int | None = None, size: int = 32, seed: int = 0) -> np.ndarray:
    """Batch loader: 'synthetic', a directory of .ppm files, or a CIFAR .bin."""
    if source == "synthetic":
        return synthetic_dataset(seed, count if count is not None else 256, size)
    if os.path.isdir(source):
        names = sorted(n for n in os.listdir(source) if n.endswith(".ppm"))
        if count is not None:
            names = names[:count]
        if not names:
            raise ValueError(f"{source}: no .ppm files")
        imgs = [read_ppm(os.path.join(source, n)).transpose(2, 0, 1) for n in names]
        shapes = {i.shape for i in imgs}
        if len(shapes) != 1:
            raise ValueError(f"{source}: mixed image shapes {sorted(shapes)}")
        return np.stack(imgs)
    if str(source).endswith(".bin"):
        return load_cifar_batch(source, count)
    raise ValueError(f"unrecognized dataset source: {source!r}")


def write_sample_grid(path, images: np.ndarray, cols: int = 8, gap: int = 2) -> None:
    """Tile (n, 3, h, w) images into one PPM, gap-pixel black rules between."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (n, 3, h, w) images, got {images.shape}")
    n, _, h, w = images.shape
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    canvas = np.zeros((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap, 3))
    for i in range(n):
        r, c = divmod(i, cols)
        top, left = r * (h + gap), c * (w + gap)
        canvas[top : top + h, left : left + w] = images[i].transpose(1, 2, 0)
    write_ppm(path, np.clip(canvas, 0, 255))
