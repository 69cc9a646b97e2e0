"""Differentiable siamese augmentation.

One :class:`AugParams` is drawn per (seed, iteration) and applied identically
to the real and the synthetic batch. Every transform is differentiable with
respect to pixel values; masks, shifts and sampling grids are constants.

Sampling ranges (images of side ``size``):

==========  ==============================================
flip        horizontal, p = 0.5
scale       sx, sy ~ U[0.8, 1.2]
rotate      angle ~ U[-15, 15] degrees
crop        integer shift dx, dy ~ U{-r..r}, r = ceil(size/8)
brightness  additive b ~ U[-0.5, 0.5]
saturation  s ~ U[0, 2]
contrast    c ~ U[0.5, 1.5]
cutout      square of side ceil(size/2), center ~ U{0..size-1}
==========  ==============================================
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, replace

import numpy as np

from . import functional as F
from . import tensor as T
from .tensor import Tensor

OPS = ("color", "crop", "cutout", "flip", "scale", "rotate")
STRATEGIES = ("all", "single_random")

SCALE_RANGE = (0.8, 1.2)
ROTATE_DEG = 15.0
BRIGHTNESS = 0.5
SATURATION_RANGE = (0.0, 2.0)
CONTRAST_RANGE = (0.5, 1.5)


@dataclass(frozen=True)
class AugParams:
    flip: bool = False
    scale: tuple = (1.0, 1.0)
    rotate: float = 0.0
    crop: tuple = (0, 0)
    brightness: float = 0.0
    saturation: float = 1.0
    contrast: float = 1.0
    cutout: tuple = (0, 0, 0)  # (cx, cy, side)

    @classmethod
    def identity(cls) -> "AugParams":
        return cls()

    def is_identity(self) -> bool:
        return self == AugParams()


def crop_radius(size: int) -> int:
    return math.ceil(size / 8)


def cutout_side(size: int) -> int:
    return math.ceil(size / 2)


def sample_aug_params(seed: int, iteration: int, size: int = 32, strategy: str = "all",
                      ops=OPS) -> AugParams:
    """Deterministic draw for (seed, iteration).

    With ``strategy="single_random"`` one op from ``ops`` is chosen and every
    other transform is left at its neutral value.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown augmentation strategy {strategy!r}")
    unknown = set(ops) - set(OPS)
    if unknown:
        raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(iteration) & 0xFFFFFFFF, 0xA06])
    r = crop_radius(size)
    drawn = dict(
        flip=bool(rng.random() < 0.5),
        scale=(float(rng.uniform(*SCALE_RANGE)), float(rng.uniform(*SCALE_RANGE))),
        rotate=float(rng.uniform(-ROTATE_DEG, ROTATE_DEG)),
        crop=(int(rng.integers(-r, r + 1)), int(rng.integers(-r, r + 1))),
        brightness=float(rng.uniform(-BRIGHTNESS, BRIGHTNESS)),
        saturation=float(rng.uniform(*SATURATION_RANGE)),
        contrast=float(rng.uniform(*CONTRAST_RANGE)),
        cutout=(int(rng.integers(0, size)), int(rng.integers(0, size)), cutout_side(size)),
    )
    active = list(ops)
    if strategy == "single_random" and active:
        active = [active[int(rng.integers(len(active)))]]
    neutral = AugParams()
    keep = {
        "flip": "flip" in active,
        "scale": "scale" in active,
        "rotate": "rotate" in active,
        "crop": "crop" in active,
        "brightness": "color" in active,
        "saturation": "color" in active,
        "contrast": "color" in active,
        "cutout": "cutout" in active,
    }
    values = {k: (v if keep[k] else getattr(neutral, k)) for k, v in drawn.items()}
    return AugParams(**values)


_hooks: list = []


@contextlib.contextmanager
def capture_params():
    """Record every AugParams passed to :func:`apply_aug` inside the block."""
    seen: list = []
    _hooks.append(seen.append)
    try:
        yield seen
    finally:
        _hooks.remove(seen.append)


def _affine_theta(p: AugParams) -> np.ndarray:
    a = math.radians(p.rotate)
    sx, sy = p.scale
    return np.array([[sx * math.cos(a), -sx * math.sin(a), 0.0],
                     [sy * math.sin(a), sy * math.cos(a), 0.0]])


def cutout_mask(size: int, p: AugParams, dtype=np.float64) -> np.ndarray:
    cx, cy, side = p.cutout
    mask = np.ones((size, size), dtype=dtype)
    if side > 0:
        y0, x0 = max(cy - side // 2, 0), max(cx - side // 2, 0)
        y1, x1 = min(cy - side // 2 + side, size), min(cx - side // 2 + side, size)
        mask[y0:y1, x0:x1] = 0.0
    return mask


def apply_aug(images, params) -> Tensor:
    """Apply flip -> scale/rotate -> crop shift -> color -> cutout.

    ``params`` is one AugParams for the whole batch, or a sequence used
    per image (image ``i`` takes ``params[i % len(params)]``).
    """
    x = T.as_tensor(images)
    if isinstance(params, (list, tuple)) and params and isinstance(params[0], AugParams):
        parts = [apply_aug(T.getitem(x, slice(i, i + 1)), params[i % len(params)])
                 for i in range(x.shape[0])]
        return T.concat(parts, axis=0)
    for hook in list(_hooks):
        hook(params)
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise T.ShapeError(f"apply_aug: expected square NCHW images, got {x.shape}")
    n, c, h, w = x.shape
    p = params
    if p.flip:
        x = T.getitem(x, (slice(None), slice(None), slice(None), slice(None, None, -1)))
    if p.scale != (1.0, 1.0) or p.rotate != 0.0:
        grid = F.affine_grid(_affine_theta(p)[None], (1, c, h, w))
        x = F.grid_sample_bilinear(x, grid)
    dx, dy = p.crop
    if dx or dy:
        r = max(abs(dx), abs(dy))
        padded = T.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
        x = T.getitem(padded, (slice(None), slice(None), slice(r + dy, r + dy + h), slice(r + dx, r + dx + w)))
    if p.brightness != 0.0:
        x = T.add(x, p.brightness)
    if p.saturation != 1.0:
        m = T.mean(x, axis=1, keepdims=True)
        x = T.add(T.mul(T.sub(x, m), p.saturation), m)
    if p.contrast != 1.0:
        m = T.mean(x, axis=(1, 2, 3), keepdims=True)
        x = T.add(T.mul(T.sub(x, m), p.contrast), m)
    if p.cutout[2] > 0:
        x = T.mul(x, Tensor(cutout_mask(h, p, x.dtype)))
    return x


def without(params: AugParams, *names) -> AugParams:
    """Copy of ``params`` with the named fields reset to neutral."""
    neutral = AugParams()
    return replace(params, **{k: getattr(neutral, k) for k in names})


@dataclass(frozen=True)
class AugSettings:
    """Augmentation config: enabled flag, op list, strategy, per-image mode."""

    enabled: bool = True
    ops: tuple = OPS
    strategy: str = "all"
    per_image: bool = False

    def draw(self, seed: int, iteration: int, size: int, batch: int = 1):
        if not self.enabled:
            return None
        if self.per_image:
            return [sample_aug_params(seed, iteration * 100003 + i, size, self.strategy, self.ops)
                    for i in range(batch)]
        return sample_aug_params(seed, iteration, size, self.strategy, self.ops)


def maybe_apply(images, params) -> Tensor:
    return T.as_tensor(images) if params is None else apply_aug(images, params)
