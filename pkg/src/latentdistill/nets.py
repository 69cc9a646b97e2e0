"""Classifier backbones and flat parameter vectors.

Networks are pure functions of ``(spec, params, batch)``. Parameters live in
one flat vector so distillation objectives can compare whole-network
gradients or parameter states directly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from . import tensor as T
from .tensor import Tensor

FAMILIES = ("convnet", "mlp", "altconvnet")
NORMS = ("instance", "none", "group")


@dataclass(frozen=True)
class NetSpec:
    """Architecture description.

    ``convnet``/``altconvnet``: ``depth`` blocks of conv3x3 -> norm -> relu ->
    avgpool2, then a linear classifier. ``mlp``: ``depth`` hidden relu layers
    of size ``width`` (depth 0 is a linear model on raw pixels).
    """

    family: str = "convnet"
    depth: int = 3
    width: int = 64
    norm: str = "instance"
    image_size: int = 32
    channels: int = 3
    classes: int = 10
    bias: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.depth < 0 or self.width < 1:
            raise ValueError("depth must be >= 0 and width >= 1")
        if self.family != "mlp":
            if self.depth < 1:
                raise ValueError("convnet depth must be >= 1")
            if self.image_size % (2 ** self.depth):
                raise ValueError(
                    f"image_size {self.image_size} not divisible by 2**depth ({2 ** self.depth})"
                )
        if self.norm == "group" and self.width % _groups(self.width):
            raise ValueError("group norm needs width divisible by the group count")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetSpec":
        return cls(**json.loads(text))


def convnet_spec(**kw) -> NetSpec:
    return NetSpec(family="convnet", **kw)


def altconvnet_spec(**kw) -> NetSpec:
    kw.setdefault("width", 64)
    kw.setdefault("norm", "none")
    return NetSpec(family="altconvnet", **kw)


def mlp_spec(**kw) -> NetSpec:
    kw.setdefault("depth", 2)
    kw.setdefault("width", 256)
    kw.setdefault("norm", "none")
    return NetSpec(family="mlp", **kw)


def _groups(width: int) -> int:
    return 4 if width % 4 == 0 else 1


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple = field(default_factory=tuple)  # ((name, shape, offset), ...)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        total = sum(int(np.prod(s)) for _, s, _ in self.layout)
        if self.values.ndim != 1 or self.values.size != total:
            raise ValueError(f"ParamVector: {self.values.size} values for a layout of {total}")

    def __len__(self):
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def unflatten(self) -> dict:
        return {name: self.values[o:o + int(np.prod(s))].reshape(s) for name, s, o in self.layout}

    def __eq__(self, other):
        return (
            isinstance(other, ParamVector)
            and self.layout == other.layout
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )


def param_layout(spec: NetSpec) -> tuple:
    shapes = []
    if spec.family == "mlp":
        fan_in = spec.channels * spec.image_size ** 2
        for k in range(spec.depth):
            shapes.append((f"fc{k}.weight", (spec.width, fan_in)))
            if spec.bias:
                shapes.append((f"fc{k}.bias", (spec.width,)))
            fan_in = spec.width
        shapes.append(("head.weight", (spec.classes, fan_in)))
        if spec.bias:
            shapes.append(("head.bias", (spec.classes,)))
    else:
        in_ch = spec.channels
        for k in range(spec.depth):
            shapes.append((f"conv{k}.weight", (spec.width, in_ch, 3, 3)))
            if spec.bias:
                shapes.append((f"conv{k}.bias", (spec.width,)))
            in_ch = spec.width
        shapes.append(("head.weight", (spec.classes, feature_dim(spec))))
        if spec.bias:
            shapes.append(("head.bias", (spec.classes,)))
    layout, offset = [], 0
    for name, shape in shapes:
        layout.append((name, tuple(shape), offset))
        offset += int(np.prod(shape))
    return tuple(layout)


def num_params(spec: NetSpec) -> int:
    return sum(int(np.prod(s)) for _, s, _ in param_layout(spec))


def feature_dim(spec: NetSpec) -> int:
    """Length of the embedding fed to the classifier head."""
    if spec.family == "mlp":
        return spec.width if spec.depth else spec.channels * spec.image_size ** 2
    side = spec.image_size // 2 ** spec.depth
    return spec.width * side * side


def init_params(spec: NetSpec, seed: int, dtype=np.float64) -> ParamVector:
    """He-normal weights (fan-in), zero biases; deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    layout = param_layout(spec)
    values = np.zeros(sum(int(np.prod(s)) for _, s, _ in layout), dtype=np.float64)
    for name, shape, offset in layout:
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if name.startswith("head") else 2.0
            size = int(np.prod(shape))
            values[offset:offset + size] = rng.normal(0.0, np.sqrt(gain / fan_in), size)
    return ParamVector(values.astype(dtype), layout)


def _as_param_tensor(spec: NetSpec, params) -> Tensor:
    if isinstance(params, ParamVector):
        return Tensor(params.values)
    params = T.as_tensor(params)
    n = num_params(spec)
    if params.shape != (n,):
        raise T.ShapeError(f"params: expected shape ({n},), got {params.shape}")
    return params


def unflatten(spec: NetSpec, params) -> dict:
    """Slice a flat parameter Tensor into named, shaped tensors (differentiably)."""
    flat = _as_param_tensor(spec, params)
    return {
        name: T.reshape(T.getitem(flat, slice(o, o + int(np.prod(s)))), s)
        for name, s, o in param_layout(spec)
    }


def _check_batch(spec: NetSpec, batch: Tensor):
    expect = (spec.channels, spec.image_size, spec.image_size)
    if batch.ndim != 4 or batch.shape[1:] != expect:
        raise T.ShapeError(f"batch shape {batch.shape} does not match network input {expect}")


def _norm(spec: NetSpec, x: Tensor) -> Tensor:
    if spec.norm == "instance":
        return F.instance_norm(x, channels_last=True)
    if spec.norm == "group":
        return F.group_norm(x, _groups(spec.width), channels_last=True)
    return x


def _features(spec: NetSpec, p: dict, batch) -> Tensor:
    x = T.as_tensor(batch)
    _check_batch(spec, x)
    if spec.family == "mlp":
        h = T.reshape(x, (x.shape[0], -1))
        for k in range(spec.depth):
            h = T.matmul(h, T.transpose(p[f"fc{k}.weight"]))
            if spec.bias:
                h = T.add(h, p[f"fc{k}.bias"])
            h = T.relu(h)
        return h
    # channels-last internally; the flattened feature order is (h, w, c)
    h = T.transpose(x, (0, 2, 3, 1))
    for k in range(spec.depth):
        h = F.conv2d_nhwc(h, p[f"conv{k}.weight"], p.get(f"conv{k}.bias"), padding=1)
        h = T.relu(_norm(spec, h))
        h = T.avg_pool(h, 2, axes=(1, 2))
    return T.reshape(h, (h.shape[0], -1))


def feature_extract(spec: NetSpec, params, batch) -> Tensor:
    """The flattened activation entering the classifier head."""
    return _features(spec, unflatten(spec, params), batch)


def forward_logits(spec: NetSpec, params, batch) -> Tensor:
    p = unflatten(spec, params)
    h = _features(spec, p, batch)
    out = T.matmul(h, T.transpose(p["head.weight"]))
    if spec.bias:
        out = T.add(out, p["head.bias"])
    return out


def cross_entropy_loss(logits, labels) -> Tensor:
    return F.softmax_cross_entropy(logits, labels)


def predict(spec: NetSpec, params, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Argmax class predictions, evaluated untracked in chunks."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(forward_logits(spec, params, images[i:i + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


def accuracy(spec: NetSpec, params, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(spec, params, images) == np.asarray(labels)))
