"""Expert (teacher) trajectories: training, buffer type and GLADTRAJ container.

GLADTRAJ layout (little-endian)::

    magic       8 bytes b"GLADTRAJ"
    version     u32
    netspec     u32 length + UTF-8 JSON
    epochs      u32
    interval    u32
    n_traj      u32
    n_snap      u32
    n_params    u64
    payload     n_traj * n_snap * n_params x f64, trajectory-major

The parameter layout is recomputed from the NetSpec on load.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from . import tensor as T
from .binfmt import FormatError, Reader, Writer, read_bytes, write_bytes
from .nets import NetSpec, ParamVector

MAGIC = b"GLADTRAJ"


@dataclass(frozen=True)
class ExpertHyper:
    epochs: int = 15
    lr: float = 0.01
    batch: int = 256


@dataclass
class TrajBuffer:
    spec: NetSpec
    epochs: int
    interval: int = 1
    trajectories: list = field(default_factory=list)  # [trajectory][snapshot] -> ParamVector

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("TrajBuffer: interval must be >= 1")
        layout = nets.param_layout(self.spec)
        for traj in self.trajectories:
            if len(traj) != self.n_snapshots:
                raise ValueError(f"TrajBuffer: expected {self.n_snapshots} snapshots, got {len(traj)}")
            for snap in traj:
                if snap.layout != layout:
                    raise ValueError("TrajBuffer: snapshot layout does not match the spec")

    @property
    def n_snapshots(self) -> int:
        return self.epochs // self.interval + 1

    def __len__(self):
        return len(self.trajectories)

    def __eq__(self, other):
        return (
            isinstance(other, TrajBuffer)
            and self.spec == other.spec
            and self.epochs == other.epochs
            and self.interval == other.interval
            and len(self.trajectories) == len(other.trajectories)
            and all(a == b for ta, tb in zip(self.trajectories, other.trajectories) for a, b in zip(ta, tb))
        )


def train_expert(data, spec: NetSpec, hyper: ExpertHyper = ExpertHyper(), seed: int = 0,
                 dtype=np.float64) -> list:
    """Plain minibatch SGD on the train split; returns epochs + 1 snapshots.

    ``data`` is a Dataset or an ``(images, labels)`` pair. Snapshot ``k`` holds
    the parameters after exactly ``k`` epochs and is stored as float64 even
    when ``dtype`` runs the arithmetic in float32.
    """
    images, labels = data.train() if hasattr(data, "train") else data
    images = np.asarray(images, dtype=dtype)
    labels = np.asarray(labels, dtype=np.intp)
    if len(images) == 0:
        raise ValueError("train_expert: empty training data")
    rng = np.random.default_rng([seed, 0x3E])
    theta = nets.init_params(spec, seed).values.astype(dtype)
    layout = nets.param_layout(spec)
    snaps = [ParamVector(theta.astype(np.float64), layout)]
    lr = np.asarray(hyper.lr, dtype=dtype)
    for _ in range(hyper.epochs):
        order = rng.permutation(len(images))
        for i in range(0, len(order), hyper.batch):
            idx = order[i:i + hyper.batch]
            leaf = T.Tensor(theta, requires_grad=True)
            loss = nets.cross_entropy_loss(nets.forward_logits(spec, leaf, images[idx]), labels[idx])
            (g,) = T.grad(loss, [leaf])
            theta = theta - lr * g.data
        snaps.append(ParamVector(theta.astype(np.float64), layout))
    return snaps


def train_buffer(data, spec: NetSpec, n_experts: int, hyper: ExpertHyper = ExpertHyper(),
                 seed: int = 0, dtype=np.float64) -> TrajBuffer:
    trajs = [train_expert(data, spec, hyper, seed * 1000 + k, dtype) for k in range(n_experts)]
    return TrajBuffer(spec, hyper.epochs, 1, trajs)


def mean_loss(spec: NetSpec, params: ParamVector, images, labels, batch: int = 500) -> float:
    total = 0.0
    with T.no_grad():
        for i in range(0, len(images), batch):
            logits = nets.forward_logits(spec, params, np.asarray(images[i:i + batch], dtype=np.float64))
            total += nets.cross_entropy_loss(logits, labels[i:i + batch]).item() * len(logits.data)
    return total / len(images)


def to_bytes(b: TrajBuffer) -> bytes:
    w = Writer(MAGIC)
    w.text(b.spec.to_json())
    w.u32(b.epochs)
    w.u32(b.interval)
    w.u32(len(b.trajectories))
    w.u32(b.n_snapshots)
    w.u64(nets.num_params(b.spec))
    for traj in b.trajectories:
        for snap in traj:
            w.array(snap.values, "<f8")
    return w.getvalue()


def header_size(b: TrajBuffer) -> int:
    return 8 + 4 + 4 + len(b.spec.to_json().encode()) + 4 * 4 + 8


def from_bytes(data: bytes) -> TrajBuffer:
    r = Reader(data, MAGIC)
    try:
        spec = NetSpec.from_json(r.text())
    except (ValueError, TypeError) as e:
        raise FormatError(f"GLADTRAJ: invalid NetSpec: {e}") from None
    epochs, interval, n_traj, n_snap = r.u32(), r.u32(), r.u32(), r.u32()
    n_params = r.u64()
    if interval < 1 or n_snap != epochs // interval + 1:
        raise FormatError("GLADTRAJ: snapshot count inconsistent with epochs/interval")
    if n_params != nets.num_params(spec):
        raise FormatError("GLADTRAJ: parameter count does not match the NetSpec")
    layout = nets.param_layout(spec)
    payload = r.array(n_traj * n_snap * n_params, "<f8", (n_traj, n_snap, n_params)).astype(np.float64)
    r.finish()
    trajs = [[ParamVector(payload[i, j].copy(), layout) for j in range(n_snap)] for i in range(n_traj)]
    return TrajBuffer(spec, epochs, interval, trajs)


def save_buffer(b: TrajBuffer, path):
    write_bytes(path, to_bytes(b))


def load_buffer(path) -> TrajBuffer:
    return from_bytes(read_bytes(path))
