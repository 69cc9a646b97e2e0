"""Downstream evaluation: train fresh networks on a distilled set and report
validation accuracy per architecture and averaged across architectures."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import augment
from . import nets
from . import tensor as T
from .nets import NetSpec, ParamVector

DEFAULT_BASE_LR = {"convnet": 0.01, "altconvnet": 0.01, "mlp": 0.01}


@dataclass(frozen=True)
class EvalProtocol:
    warmup_epochs: int = 500
    decay_epochs: int = 500
    base_lr: tuple = tuple(sorted(DEFAULT_BASE_LR.items()))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    repeats: int = 5
    batch: int = 256
    augment: bool = True
    ema_warmup: bool = True

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("EvalProtocol: repeats must be >= 1")
        if self.warmup_epochs < 0 or self.decay_epochs < 0 or self.warmup_epochs + self.decay_epochs < 1:
            raise ValueError("EvalProtocol: warmup + decay must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("EvalProtocol: ema_decay must lie in [0, 1)")

    @property
    def epochs(self) -> int:
        return self.warmup_epochs + self.decay_epochs

    def lr_for(self, family: str) -> float:
        return dict(self.base_lr).get(family, DEFAULT_BASE_LR.get(family, 0.01))

    def with_lr(self, **lrs) -> "EvalProtocol":
        table = dict(self.base_lr)
        table.update(lrs)
        return EvalProtocol(**{**self.__dict__, "base_lr": tuple(sorted(table.items()))})


def desk_protocol(**kw) -> EvalProtocol:
    return EvalProtocol(**{"warmup_epochs": 50, "decay_epochs": 50, "repeats": 5, **kw})


def full_protocol(**kw) -> EvalProtocol:
    return EvalProtocol(**{"warmup_epochs": 500, "decay_epochs": 500, "repeats": 5, **kw})


def lr_schedule(epoch: int, protocol: EvalProtocol, base: float = 1.0) -> float:
    """Linear warm-up to ``base`` then half-cosine decay."""
    w, d = protocol.warmup_epochs, protocol.decay_epochs
    if not 0 <= epoch < w + d:
        raise ValueError(f"epoch {epoch} outside [0, {w + d})")
    if epoch < w:
        return base * ((epoch + 1) / w)
    return base * (0.5 * (1.0 + math.cos(math.pi * (epoch - w) / d)))


def ema_update(ema: ParamVector, current: ParamVector, decay: float) -> ParamVector:
    if ema.layout != current.layout:
        raise ValueError("ema_update: layout mismatch")
    if not 0.0 <= decay < 1.0:
        raise ValueError("ema_update: decay must lie in [0, 1)")
    return ParamVector(decay * ema.values + (1.0 - decay) * current.values, ema.layout)


def effective_ema_decay(decay: float, step: int, warmup: bool) -> float:
    """With warm-up the decay ramps as (1 + k) / (10 + k) until it reaches ``decay``."""
    return min(decay, (1.0 + step) / (10.0 + step)) if warmup else decay


def train_student(images, labels, arch: NetSpec, protocol: EvalProtocol, seed: int,
                  val=None, return_details: bool = False):
    """Train ``arch`` from scratch on (images, labels); accuracy of the EMA weights on ``val``."""
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    params = nets.init_params(arch, seed)
    theta = params.values.copy()
    velocity = np.zeros_like(theta)
    ema = theta.copy()
    rng = np.random.default_rng([seed, 0x57])
    base = protocol.lr_for(arch.family)
    step = 0
    aug = augment.AugSettings() if protocol.augment else None
    for epoch in range(protocol.epochs):
        lr = lr_schedule(epoch, protocol, base)
        order = rng.permutation(len(x))
        for i in range(0, len(order), protocol.batch):
            idx = order[i:i + protocol.batch]
            leaf = T.Tensor(theta, requires_grad=True)
            batch = x[idx]
            if aug is not None:
                batch = augment.apply_aug(batch, aug.draw(seed, step, x.shape[-1]))
            loss = nets.cross_entropy_loss(nets.forward_logits(arch, leaf, batch), y[idx])
            (g,) = T.grad(loss, [leaf])
            velocity = protocol.momentum * velocity + g.data + protocol.weight_decay * theta
            theta = theta - lr * velocity
            d = effective_ema_decay(protocol.ema_decay, step, protocol.ema_warmup)
            ema = d * ema + (1.0 - d) * theta
            step += 1
    ema_params = ParamVector(ema, params.layout)
    if val is None:
        return ema_params
    acc = nets.accuracy(arch, ema_params, np.asarray(val[0], dtype=np.float64), val[1])
    if return_details:
        raw = nets.accuracy(arch, ParamVector(theta, params.layout), np.asarray(val[0], dtype=np.float64), val[1])
        return {"accuracy": acc, "raw_accuracy": raw, "params": ema_params}
    return acc


def arch_name(spec: NetSpec) -> str:
    if spec.family == "mlp":
        return f"mlp-d{spec.depth}w{spec.width}"
    return f"{spec.family}-d{spec.depth}w{spec.width}-{spec.norm}"


@dataclass
class EvalReport:
    accuracies: dict = field(default_factory=dict)  # arch name -> list of per-repeat accuracies

    def __post_init__(self):
        for name, accs in self.accuracies.items():
            if any(not 0.0 <= a <= 1.0 for a in accs):
                raise ValueError(f"EvalReport: accuracy outside [0, 1] for {name}")

    def mean(self, arch: str) -> float:
        return float(np.mean(self.accuracies[arch]))

    def std(self, arch: str) -> float:
        return float(np.std(self.accuracies[arch]))

    @property
    def archs(self) -> list:
        return sorted(self.accuracies)

    def cross_arch_mean(self) -> float:
        return float(np.mean([self.mean(a) for a in self.archs]))

    def to_tsv(self, row: str = "run") -> str:
        lines = ["row\tarch\tmean\tstd\trepeats\taccuracies"]
        for a in self.archs:
            accs = ",".join(f"{v:.6f}" for v in self.accuracies[a])
            lines.append(f"{row}\t{a}\t{self.mean(a):.6f}\t{self.std(a):.6f}\t{len(self.accuracies[a])}\t{accs}")
        lines.append(f"{row}\tcross_arch_mean\t{self.cross_arch_mean():.6f}\t\t\t")
        return "\n".join(lines) + "\n"


def markdown_table(rows: dict) -> str:
    """Rows ``{label: EvalReport}`` as a markdown table with per-arch mean +- std and an average column."""
    archs = sorted({a for rep in rows.values() for a in rep.archs})
    out = ["| run | " + " | ".join(archs) + " | average |",
           "|---|" + "---|" * (len(archs) + 1)]
    for label, rep in rows.items():
        cells = [f"{100 * rep.mean(a):.1f} ± {100 * rep.std(a):.1f}" if a in rep.accuracies else "-" for a in archs]
        out.append(f"| {label} | " + " | ".join(cells) + f" | {100 * rep.cross_arch_mean():.1f} |")
    return "\n".join(out) + "\n"


def cell_seed(base_seed: int, arch_index: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base_seed, arch_index, repeat]).generate_state(1)[0])


def _cell(args):
    images, labels, arch, protocol, seed, val = args
    return train_student(images, labels, arch, protocol, seed, val)


def worker_count() -> int:
    env = os.environ.get("GLAD_THREADS")
    if env:
        return max(1, int(env))
    return 1


def cross_arch_eval(images, labels, archs, protocol: EvalProtocol, val, seed: int = 0,
                    workers: int | None = None) -> EvalReport:
    """``protocol.repeats`` students per architecture; each cell seeded by (seed, arch, repeat)."""
    jobs, keys = [], []
    for ai, arch in enumerate(archs):
        for r in range(protocol.repeats):
            jobs.append((images, labels, arch, protocol, cell_seed(seed, ai, r), val))
            keys.append(arch_name(arch))
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    accs: dict = {}
    for k, v in zip(keys, results):
        accs.setdefault(k, []).append(v)
    return EvalReport(accs)
