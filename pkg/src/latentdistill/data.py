"""Procedural glyph dataset, its binary container and PPM grid export.

GLADDATA layout (little-endian)::

    magic    8 bytes  b"GLADDATA"
    version  u32
    classes  u32, N u32, C u32, H u32, W u32
    n_train  u32      images [0, n_train) are train, the rest val
    mean     C x f64  per-channel train mean
    std      C x f64  per-channel train std
    names    classes x (u32 length + UTF-8 bytes)
    labels   N x u16
    pixels   N*C*H*W x f32, NCHW order, values in [-1, 1]

PPM export: binary P6, 8-bit. A pixel value v in [-1, 1] maps to byte
floor((v + 1) / 2 * 255 + 0.5) (round half up), so -1 -> 0, 0 -> 128,
1 -> 255. Images are tiled row-major with 2 px white separators, including a
2 px border, so a grid of ``c`` columns and ``r`` rows of HxW images is
``c*(W+2)+2`` wide and ``r*(H+2)+2`` tall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .binfmt import FormatError, Reader, Writer, read_bytes, write_bytes

MAGIC = b"GLADDATA"
GLYPHS = ("circle", "cross", "bars", "triangle", "ring", "checker", "wedge", "dotgrid", "diagonal", "blob")
SIZES = (16, 32, 64)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int
    n_train: int
    class_names: list = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("Dataset: images must be (N, C, H, W) with one label each")
        if not 0 <= self.n_train <= len(self.labels):
            raise ValueError("Dataset: n_train out of range")
        if not self.class_names:
            self.class_names = [f"class{c}" for c in range(int(self.labels.max()) + 1 if len(self.labels) else 0)]
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError("Dataset: labels outside [0, classes)")
        if self.mean is None or self.std is None:
            tr = self.images[:self.n_train].astype(np.float64)
            self.mean = tr.mean(axis=(0, 2, 3)) if len(tr) else np.zeros(self.channels)
            self.std = tr.std(axis=(0, 2, 3)) if len(tr) else np.ones(self.channels)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)

    @property
    def classes(self) -> int:
        return len(self.class_names)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def size(self) -> int:
        return self.images.shape[2]

    def train(self):
        return self.images[:self.n_train], self.labels[:self.n_train]

    def val(self):
        return self.images[self.n_train:], self.labels[self.n_train:]

    def class_train_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels[:self.n_train] == c)

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.n_train == other.n_train
            and self.class_names == other.class_names
            and self.images.dtype == other.images.dtype
            and self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.std, other.std)
        )


def _glyph_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    box = (np.abs(u) < 0.75) & (np.abs(v) < 0.75)
    if kind == 0:
        return r < 0.6
    if kind == 1:
        return box & ((np.abs(u) < 0.2) | (np.abs(v) < 0.2))
    if kind == 2:
        return box & (np.floor((v + 0.75) / 0.3) % 2 == 0)
    if kind == 3:
        return (v < 0.6) & (v > -0.7) & (np.abs(u) < (v + 0.7) * 0.55)
    if kind == 4:
        return (r > 0.42) & (r < 0.72)
    if kind == 5:
        return box & ((np.floor(u / 0.375) + np.floor(v / 0.375)) % 2 == 0)
    if kind == 6:
        a = np.arctan2(v, u)
        return (r < 0.75) & (a > -np.pi / 4) & (a < np.pi / 2)
    if kind == 7:
        cu = np.abs(u - np.clip(np.round(u / 0.5), -1, 1) * 0.5)
        cv = np.abs(v - np.clip(np.round(v / 0.5), -1, 1) * 0.5)
        return np.hypot(cu, cv) < 0.15
    if kind == 8:
        return box & (np.abs(u - v) < 0.25)
    if kind == 9:
        return r < 0.45 + 0.18 * np.sin(3 * np.arctan2(v, u))
    raise ValueError(f"no glyph {kind}")


def _render(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    ss = 2  # supersampling for anti-aliased edges
    n = size * ss
    coords = (2.0 * np.arange(n) + 1.0) / n - 1.0
    x, y = np.meshgrid(coords, coords)
    angle = math.radians(rng.uniform(-20, 20))
    scale = rng.uniform(0.8, 1.2)
    tx, ty = rng.uniform(-0.15, 0.15, size=2)
    c, s = math.cos(angle), math.sin(angle)
    # inverse affine: pixel -> glyph coordinates
    u = (c * (x - tx) + s * (y - ty)) / scale
    v = (-s * (x - tx) + c * (y - ty)) / scale
    mask = _glyph_mask(kind, u, v).astype(np.float64)
    mask = mask.reshape(size, ss, size, ss).mean(axis=(1, 3))
    bg = rng.uniform(-1.0, -0.2, size=3)
    fg = rng.uniform(0.2, 1.0, size=3)
    if rng.random() < 0.3:
        bg, fg = fg, bg
    img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
    img += rng.normal(0.0, 0.1, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def gen_glyph_dataset(classes: int = 10, per_class: int = 500, size: int = 32, seed: int = 0) -> Dataset:
    """Balanced glyph dataset with an exact 80/20 train/val split per class."""
    if size not in SIZES:
        raise ValueError(f"unsupported size {size}; expected one of {SIZES}")
    if not 2 <= classes <= len(GLYPHS):
        raise ValueError(f"classes must be in [2, {len(GLYPHS)}]")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    n_tr = int(round(per_class * 0.8))
    train, val = [], []
    for c in range(classes):
        imgs = [_render(c, size, rng) for _ in range(per_class)]
        train += [(img, c) for img in imgs[:n_tr]]
        val += [(img, c) for img in imgs[n_tr:]]
    order_tr = rng.permutation(len(train))
    order_va = rng.permutation(len(val))
    items = [train[i] for i in order_tr] + [val[i] for i in order_va]
    images = np.stack([im for im, _ in items]).astype(np.float32) if items else np.zeros((0, 3, size, size), np.float32)
    labels = np.array([lab for _, lab in items], dtype=np.intp)
    return Dataset(images, labels, len(train), list(GLYPHS[:classes]))


def to_bytes(d: Dataset) -> bytes:
    n, c, h, w = d.images.shape
    if d.classes > 65535:
        raise ValueError("GLADDATA stores labels as u16")
    wr = Writer(MAGIC)
    for v in (d.classes, n, c, h, w, d.n_train):
        wr.u32(v)
    wr.array(d.mean, "<f8")
    wr.array(d.std, "<f8")
    for name in d.class_names:
        wr.text(name)
    wr.array(d.labels, "<u2")
    wr.array(d.images, "<f4")
    return wr.getvalue()


def from_bytes(data: bytes) -> Dataset:
    r = Reader(data, MAGIC)
    classes, n, c, h, w, n_train = (r.u32() for _ in range(6))
    if n_train > n:
        raise FormatError("GLADDATA: split boundary beyond N")
    mean = r.array(c, "<f8").astype(np.float64)
    std = r.array(c, "<f8").astype(np.float64)
    names = [r.text() for _ in range(classes)]
    labels = r.array(n, "<u2").astype(np.intp)
    images = r.array(n * c * h * w, "<f4", (n, c, h, w)).astype(np.float32)
    r.finish()
    if n and labels.max() >= classes:
        raise FormatError("GLADDATA: label outside the class range")
    return Dataset(images, labels, n_train, names, mean, std)


def save_dataset(d: Dataset, path):
    write_bytes(path, to_bytes(d))


def load_dataset(path) -> Dataset:
    return from_bytes(read_bytes(path))


def expected_size(classes: int, n: int, c: int, h: int, w: int, names: list) -> int:
    return 8 + 4 + 6 * 4 + 2 * 8 * c + sum(4 + len(s.encode()) for s in names) + 2 * n + 4 * n * c * h * w


def to_bytes_u8(images: np.ndarray) -> np.ndarray:
    """The documented quantization: floor((v + 1) / 2 * 255 + 0.5), clipped."""
    q = np.floor((np.asarray(images, dtype=np.float64) + 1.0) / 2.0 * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def image_grid(images: np.ndarray, columns: int) -> np.ndarray:
    """(rows*(H+2)+2, columns*(W+2)+2, 3) uint8 grid with white separators."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError("image_grid expects (K, C, H, W)")
    k, c, h, w = images.shape
    if columns < 1:
        raise ValueError("columns must be >= 1")
    rows = max(1, math.ceil(k / columns))
    grid = np.full((rows * (h + 2) + 2, columns * (w + 2) + 2, 3), 255, dtype=np.uint8)
    q = to_bytes_u8(images)
    if c == 1:
        q = np.repeat(q, 3, axis=1)
    elif c != 3:
        raise ValueError("image_grid supports 1 or 3 channels")
    for i in range(k):
        r0, c0 = 2 + (i // columns) * (h + 2), 2 + (i % columns) * (w + 2)
        grid[r0:r0 + h, c0:c0 + w] = q[i].transpose(1, 2, 0)
    return grid


def export_image_grid(images: np.ndarray, path, columns: int = 10):
    grid = image_grid(images, columns)
    header = f"P6\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    write_bytes(path, header + grid.tobytes())


def read_ppm(path) -> np.ndarray:
    data = read_bytes(path)
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise FormatError("PPM payload size mismatch")
    return pix.reshape(h, w, 3)
