"""A small class-conditional style-modulated generator.

The generator splits into a mapping MLP ``(z, class) -> w`` and a synthesis
stack of ``blocks`` style blocks. Block ``k`` upsamples its input 2x, applies
a 3x3 convolution, a per-channel scale/shift computed from its own style code
``w_k`` and a leaky relu. A final 1x1 convolution and tanh produce the image.

A latent at cut ``n`` is the activation entering block ``n`` together with
the style codes of blocks ``n .. blocks-1``. Cut 0 starts from the learned
constant; cut ``blocks`` leaves only the RGB projection.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .binfmt import FormatError, Reader, Writer, read_bytes, write_bytes
from .nets import ParamVector
from .tensor import Tensor


@dataclass(frozen=True)
class GenSpec:
    z_dim: int = 64
    w_dim: int = 64
    blocks: int = 4
    base_size: int = 2
    base_channels: int = 128
    out_size: int = 32
    classes: int = 10
    seed: int = 0
    channels: int = 3
    min_channels: int = 16

    def __post_init__(self):
        if self.blocks < 2:
            raise ValueError("blocks must be >= 2")
        if self.base_size * 2 ** self.blocks != self.out_size:
            raise ValueError(
                f"base_size * 2**blocks = {self.base_size * 2 ** self.blocks} != out_size {self.out_size}"
            )
        if self.classes < 1 or self.z_dim < 1 or self.w_dim < 1:
            raise ValueError("classes, z_dim and w_dim must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GenSpec":
        return cls(**json.loads(text))

    def block_channels(self) -> list:
        """Channel count entering each cut 0..blocks."""
        chans = [self.base_channels]
        for k in range(self.blocks):
            chans.append(max(self.base_channels // 2 ** (k + 1), self.min_channels))
        return chans

    def feature_shape(self, cut: int) -> tuple:
        """(C, H, W) of the activation entering block ``cut``."""
        if not 0 <= cut <= self.blocks:
            raise ValueError(f"cut {cut} outside [0, {self.blocks}]")
        side = self.base_size * 2 ** cut
        return (self.block_channels()[cut], side, side)


@dataclass
class GenLatent:
    cut: int
    feature: np.ndarray  # (C, H, W)
    styles: np.ndarray  # (blocks - cut, w_dim)

    def num_scalars(self) -> int:
        return int(self.feature.size + self.styles.size)


def param_layout(spec: GenSpec) -> tuple:
    chans = spec.block_channels()
    shapes = [
        ("map.embed", (spec.classes, spec.z_dim)),
        ("map.fc0.weight", (spec.w_dim, 2 * spec.z_dim)),
        ("map.fc0.bias", (spec.w_dim,)),
        ("map.fc1.weight", (spec.w_dim, spec.w_dim)),
        ("map.fc1.bias", (spec.w_dim,)),
        ("const", (spec.base_size, spec.base_size, chans[0])),
    ]
    for k in range(spec.blocks):
        shapes += [
            (f"block{k}.conv.weight", (chans[k + 1], chans[k], 3, 3)),
            (f"block{k}.conv.bias", (chans[k + 1],)),
            (f"block{k}.affine.weight", (2 * chans[k + 1], spec.w_dim)),
            (f"block{k}.affine.bias", (2 * chans[k + 1],)),
        ]
    shapes += [
        ("rgb.weight", (spec.channels, chans[-1], 1, 1)),
        ("rgb.bias", (spec.channels,)),
    ]
    layout, offset = [], 0
    for name, shape in shapes:
        layout.append((name, tuple(shape), offset))
        offset += int(np.prod(shape))
    return tuple(layout)


def init_generator(spec: GenSpec) -> ParamVector:
    """Random initialization seeded by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    layout = param_layout(spec)
    values = np.zeros(layout[-1][2] + int(np.prod(layout[-1][1])))
    lrelu_gain = 2.0 / (1.0 + 0.2 ** 2)
    for name, shape, offset in layout:
        size = int(np.prod(shape))
        if name in ("map.embed", "const"):
            std = 1.0
        elif name.endswith("affine.weight"):
            std = 0.5 / np.sqrt(shape[1])
        elif name == "rgb.weight":
            std = 1.0 / np.sqrt(shape[1])
        elif name.endswith(".weight"):
            std = np.sqrt(lrelu_gain / np.prod(shape[1:]))
        else:
            continue
        values[offset:offset + size] = rng.normal(0.0, std, size)
    return ParamVector(values, layout)


def _split(layout: tuple, params) -> dict:
    flat = Tensor(params.values) if isinstance(params, ParamVector) else T.as_tensor(params)
    return {
        name: T.reshape(T.getitem(flat, slice(o, o + int(np.prod(s)))), s)
        for name, s, o in layout
    }


def _check_classes(spec: GenSpec, classes: np.ndarray):
    if classes.size and (classes.min() < 0 or classes.max() >= spec.classes):
        raise ValueError(f"class index out of range [0, {spec.classes})")


def _map(spec: GenSpec, p: dict, classes: np.ndarray, zs) -> Tensor:
    emb = T.index_select(p["map.embed"], classes)
    h = T.concat([T.as_tensor(zs), emb], axis=1)
    h = T.leaky_relu(T.add(T.matmul(h, T.transpose(p["map.fc0.weight"])), p["map.fc0.bias"]))
    return T.add(T.matmul(h, T.transpose(p["map.fc1.weight"])), p["map.fc1.bias"])


def _run_blocks(spec: GenSpec, p: dict, h: Tensor, styles, start: int, stop: int | None = None) -> Tensor:
    """Blocks ``start .. stop-1`` on channels-last ``h``; styles (K, stop-start, w_dim)."""
    styles = T.as_tensor(styles)
    stop = spec.blocks if stop is None else stop
    for j, k in enumerate(range(start, stop)):
        h = T.upsample_nearest(h, 2, axes=(1, 2))
        h = F.conv2d_nhwc(h, p[f"block{k}.conv.weight"], p[f"block{k}.conv.bias"], padding=1)
        c = h.shape[3]
        w_k = T.getitem(styles, (slice(None), j))
        mod = T.add(T.matmul(w_k, T.transpose(p[f"block{k}.affine.weight"])), p[f"block{k}.affine.bias"])
        scale = T.reshape(T.add(T.getitem(mod, (slice(None), slice(0, c))), 1.0), (-1, 1, 1, c))
        shift = T.reshape(T.getitem(mod, (slice(None), slice(c, 2 * c))), (-1, 1, 1, c))
        h = T.leaky_relu(T.add(T.mul(h, scale), shift))
    return h


def _to_rgb(p: dict, h: Tensor) -> Tensor:
    img = T.tanh(F.conv2d_nhwc(h, p["rgb.weight"], p["rgb.bias"]))
    return T.transpose(img, (0, 3, 1, 2))


def map_latents(spec: GenSpec, params, classes, zs) -> Tensor:
    """Batched mapping network: (K,) classes, (K, z_dim) noise -> (K, w_dim)."""
    classes = np.atleast_1d(np.asarray(classes, dtype=np.intp))
    _check_classes(spec, classes)
    return _map(spec, _split(param_layout(spec), params), classes, zs)


def map_latent(spec: GenSpec, params, cls: int, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(1, spec.z_dim)
    with T.no_grad():
        return map_latents(spec, params, [cls], z).data[0]


def partial_forward_batch(spec: GenSpec, params, classes, zs, cut: int):
    """Features entering block ``cut`` and per-block copies of w.

    Returns ``(features (K, C, H, W), styles (K, blocks - cut, w_dim))`` arrays.
    """
    if not 0 <= cut <= spec.blocks:
        raise ValueError(f"cut {cut} outside [0, {spec.blocks}]")
    classes = np.atleast_1d(np.asarray(classes, dtype=np.intp))
    _check_classes(spec, classes)
    p = _split(param_layout(spec), params)
    with T.no_grad():
        w = _map(spec, p, classes, np.asarray(zs, dtype=np.float64)).data
        k = len(classes)
        styles_all = np.repeat(w[:, None, :], spec.blocks, axis=1)
        h = T.broadcast_to(T.reshape(p["const"], (1,) + p["const"].shape), (k,) + p["const"].shape)
        h = _run_blocks(spec, p, h, styles_all[:, :cut], 0, cut)
        feature = np.ascontiguousarray(h.data.transpose(0, 3, 1, 2))
    return feature, np.ascontiguousarray(styles_all[:, cut:])


def partial_forward(spec: GenSpec, params, cls: int, z, cut: int) -> GenLatent:
    feature, styles = partial_forward_batch(spec, params, [cls], np.reshape(z, (1, -1)), cut)
    return GenLatent(cut, feature[0], styles[0])


def synthesize(spec: GenSpec, params, cut: int, features, styles) -> Tensor:
    """Images (K, C, H, W) from batched latents; differentiable w.r.t. features and styles."""
    features = T.as_tensor(features)
    styles = T.as_tensor(styles)
    expect = spec.feature_shape(cut)
    if features.ndim != 4 or features.shape[1:] != expect:
        raise T.ShapeError(f"synthesize: feature shape {features.shape} != (K,) + {expect} at cut {cut}")
    if styles.shape != (features.shape[0], spec.blocks - cut, spec.w_dim):
        raise T.ShapeError(
            f"synthesize: styles shape {styles.shape} != {(features.shape[0], spec.blocks - cut, spec.w_dim)}"
        )
    p = _split(param_layout(spec), params)
    h = T.transpose(features, (0, 2, 3, 1))
    h = _run_blocks(spec, p, h, styles, cut)
    return _to_rgb(p, h)


def synth_from(spec: GenSpec, params, latent: GenLatent) -> np.ndarray:
    with T.no_grad():
        img = synthesize(spec, params, latent.cut, latent.feature[None], latent.styles[None])
    return img.data[0]


def generate(spec: GenSpec, params, classes, zs) -> np.ndarray:
    """Full forward pass G(z) for a batch."""
    feature, styles = partial_forward_batch(spec, params, classes, zs, 0)
    with T.no_grad():
        return synthesize(spec, params, 0, feature, styles).data


def feature_moments(spec: GenSpec, params, cls: int, cut: int, m: int, rng, chunk: int = 512):
    """Coordinate-wise mean and variance of feed-forward features over ``m`` samples."""
    total = np.zeros(spec.feature_shape(cut))
    total_sq = np.zeros_like(total)
    done = 0
    while done < m:
        k = min(chunk, m - done)
        zs = rng.standard_normal((k, spec.z_dim))
        feats, _ = partial_forward_batch(spec, params, np.full(k, cls), zs, cut)
        total += feats.sum(axis=0)
        total_sq += (feats * feats).sum(axis=0)
        done += k
    mu = total / m
    var = np.maximum(total_sq / m - mu * mu, 0.0)
    return mu, var


def init_latents(spec: GenSpec, params, mode: str, cls: int, count: int, cut: int,
                 rng=None, m: int = 1024, moments=None) -> list:
    """Initial latents for one class.

    ``feedforward`` runs a partial forward pass from fresh z ~ N(0, I).
    ``gaussian`` samples the feature coordinate-wise from a normal matched to
    the feed-forward mean/variance over ``m`` samples; styles still come from
    fresh mapping passes.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng)
    zs = rng.standard_normal((count, spec.z_dim))
    feats, styles = partial_forward_batch(spec, params, np.full(count, cls), zs, cut)
    if mode == "gaussian":
        mu, var = moments if moments is not None else feature_moments(spec, params, cls, cut, m, rng)
        feats = mu + np.sqrt(var) * rng.standard_normal((count,) + mu.shape)
    elif mode != "feedforward":
        raise ValueError(f"unknown init mode {mode!r}")
    return [GenLatent(cut, feats[i], styles[i]) for i in range(count)]


class Generator:
    """A frozen generator: spec plus parameters.

    ``dtype`` selects the compute precision of :meth:`synthesize`; the stored
    parameters (and hence :meth:`digest`) stay 64-bit.
    """

    def __init__(self, spec: GenSpec, params: ParamVector | None = None, dtype=np.float64):
        self.spec = spec
        self.params = params if params is not None else init_generator(spec)
        if self.params.layout != param_layout(spec):
            raise ValueError("generator parameters do not match the spec layout")
        self.dtype = np.dtype(dtype)
        self._compute = ParamVector(self.params.values.astype(self.dtype), self.params.layout)

    def with_dtype(self, dtype) -> "Generator":
        return Generator(self.spec, self.params, dtype)

    def synthesize(self, cut: int, features, styles) -> Tensor:
        return synthesize(self.spec, self._compute, cut, features, styles)

    def partial_forward(self, classes, zs, cut: int):
        return partial_forward_batch(self.spec, self.params, classes, zs, cut)

    def digest(self) -> bytes:
        """SHA-256 over the spec and parameter bytes (32 bytes)."""
        h = hashlib.sha256(self.spec.to_json().encode())
        h.update(np.ascontiguousarray(self.params.values, dtype="<f8").tobytes())
        return h.digest()


# GLADGENW container: magic, u32 version, GenSpec JSON (u32 length + UTF-8),
# u64 parameter count, then the parameters as little-endian f64.
GENW_MAGIC = b"GLADGENW"


def generator_to_bytes(gen: Generator) -> bytes:
    w = Writer(GENW_MAGIC)
    w.text(gen.spec.to_json())
    w.u64(gen.params.values.size)
    w.array(gen.params.values, "<f8")
    return w.getvalue()


def generator_from_bytes(data: bytes) -> Generator:
    r = Reader(data, GENW_MAGIC)
    try:
        spec = GenSpec.from_json(r.text())
    except (ValueError, TypeError) as e:
        raise FormatError(f"GLADGENW: invalid GenSpec: {e}") from None
    n = r.u64()
    layout = param_layout(spec)
    if n != sum(int(np.prod(s)) for _, s, _ in layout):
        raise FormatError("GLADGENW: parameter count does not match the GenSpec")
    values = r.array(n, "<f8").astype(np.float64)
    r.finish()
    return Generator(spec, ParamVector(values, layout))


def save_generator(gen: Generator, path):
    write_bytes(path, generator_to_bytes(gen))


def load_generator(path) -> Generator:
    return generator_from_bytes(read_bytes(path))
