"""Composite ops built from the primitives in :mod:`latentdistill.tensor`.

Shape rules (all image tensors are NCHW):

* ``conv2d(x, w, b, padding)``: x (N, C, H, W), w (O, C, kh, kw), b (O,) or
  None; stride 1; output (N, O, H + 2p - kh + 1, W + 2p - kw + 1).
* ``avgpool2d(x, k)``: window k, stride k; H and W divisible by k.
* ``instance_norm(x)``: per-sample, per-channel normalization over H, W with
  no affine parameters.
* ``grid_sample_bilinear(x, grid)``: grid (N, Ho, Wo, 2) of normalized
  (x, y) coordinates in [-1, 1], align_corners=False, zero padding.
* ``softmax_cross_entropy(logits, labels)``: logits (N, K), integer labels.

Because every composite is assembled from differentiable primitives, all of
them support higher-order gradients.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor

__all__ = [
    "conv2d",
    "conv2d_nhwc",
    "avgpool2d",
    "upsample2x",
    "instance_norm",
    "group_norm",
    "affine_grid",
    "grid_sample_bilinear",
    "softmax_cross_entropy",
    "dot",
    "norm_sq",
    "OPS",
    "apply_op",
]


def conv2d_nhwc(x, w, b=None, padding: int = 0) -> Tensor:
    """Channels-last convolution: x (N, H, W, C), w (O, C, kh, kw) -> (N, Ho, Wo, O)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape}, {w.shape}")
    n = x.shape[0]
    out_ch, in_ch, kh, kw = w.shape
    if padding:
        x = T.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    if kh == 1 and kw == 1:
        cols = T.reshape(x, (n * ho * wo, in_ch))
    else:
        cols = T.im2col(x, kh, kw)
    kernel = T.reshape(T.transpose(w, (2, 3, 1, 0)), (kh * kw * in_ch, out_ch))
    out = T.reshape(T.matmul(cols, kernel), (n, ho, wo, out_ch))
    if b is not None:
        out = T.add(out, as_tensor(b))
    return out


def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape}, {w.shape}")
    out = conv2d_nhwc(T.transpose(x, (0, 2, 3, 1)), w, b, padding)
    return T.transpose(out, (0, 3, 1, 2))


def avgpool2d(x, k: int = 2) -> Tensor:
    return T.avg_pool(x, k, axes=(2, 3))


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling (NCHW)."""
    return T.upsample_nearest(x, 2, axes=(2, 3))


def group_norm(x, groups: int, eps: float = 1e-5, channels_last: bool = False) -> Tensor:
    x = as_tensor(x)
    if channels_last:
        n, h, w, c = x.shape
        if c % groups:
            raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
        y = T.normalize(T.reshape(x, (n, h, w, groups, c // groups)), (1, 2, 4), eps)
        return T.reshape(y, (n, h, w, c))
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    y = T.normalize(T.reshape(x, (n, groups, c // groups, h, w)), (2, 3, 4), eps)
    return T.reshape(y, (n, c, h, w))


def instance_norm(x, eps: float = 1e-5, channels_last: bool = False) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes (no affine)."""
    return T.normalize(x, (1, 2) if channels_last else (2, 3), eps)


def affine_grid(theta: np.ndarray, size: tuple) -> np.ndarray:
    """Sampling grid for a batch of 2x3 affine matrices (align_corners=False).

    ``theta`` is (N, 2, 3); returns (N, H, W, 2) in normalized coordinates.
    """
    theta = np.asarray(theta, dtype=np.float64)
    n, _, h, w = size
    xs = (2.0 * np.arange(w) + 1.0) / w - 1.0
    ys = (2.0 * np.arange(h) + 1.0) / h - 1.0
    gx, gy = np.meshgrid(xs, ys)
    base = np.stack([gx, gy, np.ones_like(gx)], axis=-1)  # (H, W, 3)
    return np.einsum("hwk,njk->nhwj", base, theta)


def _bilinear_matrix(grid: np.ndarray, h: int, w: int) -> sp.csr_matrix:
    # grid: (Ho, Wo, 2); rows index output pixels, columns input pixels
    ho, wo = grid.shape[:2]
    ix = ((grid[..., 0] + 1.0) * w - 1.0) / 2.0
    iy = ((grid[..., 1] + 1.0) * h - 1.0) / 2.0
    x0, y0 = np.floor(ix), np.floor(iy)
    fx, fy = ix - x0, iy - y0
    rows, cols, vals = [], [], []
    out_idx = np.arange(ho * wo).reshape(ho, wo)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wx * wy != 0)
            rows.append(out_idx[ok])
            cols.append((yi[ok] * w + xi[ok]).astype(np.intp))
            vals.append((wx * wy)[ok])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(ho * wo, h * w),
    )
    return mat.tocsr()


def grid_sample_bilinear(x, grid) -> Tensor:
    """Bilinear resampling of ``x`` at normalized ``grid`` locations.

    Differentiable with respect to ``x`` only; the grid is a constant.
    A grid of shape (Ho, Wo, 2) or with identical entries per sample is
    applied as one shared sparse map.
    """
    x = as_tensor(x)
    grid = np.asarray(grid.data if isinstance(grid, Tensor) else grid, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"grid_sample_bilinear: expected NCHW input, got {x.shape}")
    if grid.ndim == 3:
        grid = grid[None]
    if grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] not in (1, x.shape[0]):
        raise ShapeError(f"grid_sample_bilinear: bad grid shape {grid.shape} for input {x.shape}")
    n, _, h, w = x.shape
    out_hw = grid.shape[1:3]
    if grid.shape[0] == 1 or all(np.array_equal(grid[0], g) for g in grid[1:]):
        return T.spatial_linear(x, _bilinear_matrix(grid[0], h, w), out_hw)
    mats = [_bilinear_matrix(g, h, w) for g in grid]
    return T.batched_spatial_linear(x, mats, out_hw)


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    out = np.zeros((labels.shape[0], k), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = T.sub(logits, shift)
    lse = T.log(T.tsum(T.exp(z), axis=1))
    picked = T.tsum(T.mul(z, Tensor(_one_hot(labels, k, logits.dtype))), axis=1)
    return T.mean(T.sub(lse, picked))


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape}, {b.shape}")
    return T.tsum(T.mul(a, b))


def norm_sq(a) -> Tensor:
    a = as_tensor(a)
    return T.tsum(T.mul(a, a))


OPS = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": T.div,
    "neg": T.neg,
    "matmul": T.matmul,
    "conv2d": conv2d,
    "relu": T.relu,
    "tanh": T.tanh,
    "exp": T.exp,
    "log": T.log,
    "sum": T.tsum,
    "mean": T.mean,
    "reshape": T.reshape,
    "pad": T.pad,
    "avgpool2d": avgpool2d,
    "instance_norm": instance_norm,
    "grid_sample_bilinear": grid_sample_bilinear,
    "concat": T.concat,
    "index_select": T.index_select,
    "softmax_cross_entropy": softmax_cross_entropy,
    "dot": dot,
    "norm_sq": norm_sq,
}


def apply_op(op: str, *inputs, **attrs) -> Tensor:
    """Dispatch a catalog op by name, e.g. ``apply_op("conv2d", x, w, padding=1)``."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known ops: {sorted(OPS)}") from None
    return fn(*inputs, **attrs)
