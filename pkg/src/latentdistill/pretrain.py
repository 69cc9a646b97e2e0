"""Optional decoder pretraining of the generator on real images.

Each training image gets its own learnable noise code. Codes and generator
weights are fitted jointly to reconstruct the images (mean squared error),
with no discriminator. The result stands in for a trained generator when a
realistic prior is wanted; the default prior is the untrained generator.
"""

from __future__ import annotations

import numpy as np

from . import generator as G
from . import tensor as T
from .generator import Generator, GenSpec
from .nets import ParamVector
from .tensor import Tensor


def full_forward(spec: GenSpec, params, classes, zs) -> Tensor:
    """G(z) as one differentiable graph w.r.t. both the weights and the codes."""
    classes = np.atleast_1d(np.asarray(classes, dtype=np.intp))
    p = G._split(G.param_layout(spec), params)
    w = G._map(spec, p, classes, zs)
    k = len(classes)
    styles = T.stack([w] * spec.blocks, axis=1)
    const = T.reshape(p["const"], (1,) + p["const"].shape)
    h = T.broadcast_to(const, (k,) + p["const"].shape)
    h = G._run_blocks(spec, p, h, styles, 0)
    return G._to_rgb(p, h)


def pretrain_generator(gen: Generator, data, steps: int = 300, lr: float = 0.01, batch: int = 64,
                       seed: int = 0, momentum: float = 0.9, log=None) -> Generator:
    images, labels = data.train() if hasattr(data, "train") else data
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    rng = np.random.default_rng([seed, 0x9E])
    codes = rng.standard_normal((len(images), gen.spec.z_dim))
    theta = gen.params.values.copy()
    v_theta = np.zeros_like(theta)
    v_codes = np.zeros_like(codes)
    for step in range(steps):
        idx = rng.choice(len(images), min(batch, len(images)), replace=False)
        P = Tensor(theta, requires_grad=True)
        Z = Tensor(codes[idx], requires_grad=True)
        out = full_forward(gen.spec, P, labels[idx], Z)
        diff = T.sub(out, Tensor(images[idx]))
        loss = T.mean(T.mul(diff, diff))
        g_theta, g_z = T.grad(loss, [P, Z])
        v_theta = momentum * v_theta + g_theta.data
        theta = theta - lr * v_theta
        v_codes[idx] = momentum * v_codes[idx] + g_z.data
        codes[idx] = codes[idx] - lr * len(images) / len(idx) * v_codes[idx]
        if log is not None:
            log(step, loss.item())
    return Generator(gen.spec, ParamVector(theta, gen.params.layout))
