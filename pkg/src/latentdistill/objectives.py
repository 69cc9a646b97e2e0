"""Distillation objectives: gradient matching, distribution matching and
trajectory matching, plus the constant-memory trajectory backward pass.

All losses are differentiable with respect to the synthetic images. The
trajectory losses also differentiate with respect to the learnable inner step
size ``alpha``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import augment
from . import functional as F
from . import nets
from . import tensor as T
from .nets import NetSpec, ParamVector
from .tensor import Tensor


@dataclass(frozen=True)
class MttConfig:
    """Inner synthetic steps ``N``, expert epochs ahead ``M``, max start epoch ``T_plus``.

    ``syn_batch`` images per inner step; ``None`` uses the whole synthetic set.
    """

    N: int = 10
    M: int = 2
    T_plus: int = 2
    syn_batch: int | None = None

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ValueError("MttConfig: N and M must be >= 1")
        if self.T_plus < 0:
            raise ValueError("MttConfig: T_plus must be >= 0")
        if self.syn_batch is not None and self.syn_batch < 1:
            raise ValueError("MttConfig: syn_batch must be >= 1")


@dataclass
class ExpertSegment:
    theta_start: ParamVector
    theta_target: ParamVector
    t: int
    M: int
    trajectory: int = 0

    def __post_init__(self):
        if self.theta_start.layout != self.theta_target.layout:
            raise ValueError("ExpertSegment: start and target layouts differ")


class DegenerateError(ValueError):
    pass


def _with_grad(fn):
    # these losses take inner gradients, so they must record graphs even when
    # called under no_grad
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with T.enable_grad():
            return fn(*args, **kwargs)
    return wrapper


def _tracked_params(params) -> Tensor:
    values = params.values if isinstance(params, ParamVector) else np.asarray(params)
    return Tensor(values, requires_grad=True)


def _class_loss(spec: NetSpec, theta: Tensor, images, labels) -> Tensor:
    return F.softmax_cross_entropy(nets.forward_logits(spec, theta, images), labels)


# ---------------------------------------------------------------------------
# gradient matching


def _layer_slices(spec: NetSpec):
    for name, shape, offset in nets.param_layout(spec):
        if len(shape) > 1:
            yield offset, shape


def _rowwise_distance(spec: NetSpec, g_syn: Tensor, g_real: np.ndarray) -> Tensor:
    total = None
    for offset, shape in _layer_slices(spec):
        size = int(np.prod(shape))
        rows = (shape[0], size // shape[0])
        gs = T.reshape(T.getitem(g_syn, slice(offset, offset + size)), rows)
        gr = Tensor(g_real[offset:offset + size].reshape(rows))
        num = T.tsum(T.mul(gs, gr), axis=1)
        # the small offset keeps sqrt differentiable on all-zero rows (dead units)
        den = T.add(T.mul(T.sqrt(T.add(T.tsum(T.mul(gs, gs), axis=1), 1e-12)),
                          T.sqrt(T.tsum(T.mul(gr, gr), axis=1))), 1e-6)
        term = T.tsum(T.sub(1.0, T.div(num, den)))
        total = term if total is None else T.add(total, term)
    return total


def dc_loss(syn_batch, real_batch, spec: NetSpec, params, layerwise: bool = False) -> Tensor:
    """One minus the cosine between classification-loss gradients.

    ``syn_batch`` and ``real_batch`` are ``(images, labels)`` pairs. The real
    gradient is a constant; the synthetic one is kept as a differentiable
    expression so the result can be differentiated w.r.t. the synthetic
    images. ``layerwise`` sums per-output-row distances over weight tensors
    instead of using one cosine over the whole flat gradient.
    """
    syn_images, syn_labels = syn_batch
    real_images, real_labels = real_batch
    with T.enable_grad():
        theta = _tracked_params(params)
        (g_real,) = T.grad(_class_loss(spec, theta, real_images, real_labels), [theta])
        g_real = g_real.data
        theta = _tracked_params(params)
        (g_syn,) = T.grad(_class_loss(spec, theta, syn_images, syn_labels), [theta], retain_higher=True)
    if not np.any(g_real) or not np.any(g_syn.data):
        raise DegenerateError("degenerate gradient")
    if layerwise:
        return _rowwise_distance(spec, g_syn, g_real)
    gr = Tensor(g_real)
    cos = T.div(F.dot(g_syn, gr), T.mul(T.sqrt(F.norm_sq(g_syn)), float(np.sqrt(np.dot(g_real, g_real)))))
    return T.sub(1.0, cos)


# ---------------------------------------------------------------------------
# distribution matching


def dm_loss(syn_set_batches, real_set_batches, psi_spec: NetSpec, psi_params) -> Tensor:
    """Sum over classes of squared distances between mean embeddings."""
    if len(syn_set_batches) != len(real_set_batches):
        raise ValueError("dm_loss: syn and real must list the same classes")
    total = None
    for c, (syn, real) in enumerate(zip(syn_set_batches, real_set_batches)):
        syn, real = T.as_tensor(syn), T.as_tensor(real)
        if syn.shape[0] == 0 or real.shape[0] == 0:
            raise ValueError(f"dm_loss: empty batch for class {c}")
        with T.no_grad():
            real_mean = T.mean(nets.feature_extract(psi_spec, psi_params, real), axis=0)
        syn_mean = T.mean(nets.feature_extract(psi_spec, psi_params, syn), axis=0)
        term = F.norm_sq(T.sub(Tensor(real_mean.data), syn_mean))
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# trajectory matching


def inner_batches(n_images: int, cfg: MttConfig, student_seed: int) -> list:
    """Index sets for the ``N`` inner steps: consecutive slices of shuffles."""
    b = n_images if cfg.syn_batch is None else min(cfg.syn_batch, n_images)
    rng = np.random.default_rng(student_seed)
    order = np.zeros(0, dtype=np.intp)
    while order.size < cfg.N * b:
        order = np.concatenate([order, rng.permutation(n_images)])
    return [order[i * b:(i + 1) * b] for i in range(cfg.N)]


def _denominator(segment: ExpertSegment) -> float:
    # same reduction as the numerator, so alpha = 0 gives exactly 1
    with T.no_grad():
        den = F.norm_sq(Tensor(segment.theta_start.values - segment.theta_target.values)).item()
    if den == 0.0:
        raise DegenerateError("degenerate segment")
    return den


def _step_loss(spec, theta, images, labels, idx, aug_params) -> Tensor:
    batch = T.index_select(images, idx)
    if aug_params is not None:
        batch = augment.apply_aug(batch, aug_params)
    return _class_loss(spec, theta, batch, labels[idx])


def _step_augs(aug, n_steps: int, size: int, student_seed: int, batch: int) -> list:
    if aug is None:
        return [None] * n_steps
    return [aug.draw(student_seed, i, size, batch) for i in range(n_steps)]


@_with_grad
def mtt_loss_unrolled(images, labels, alpha, segment: ExpertSegment, cfg: MttConfig,
                      spec: NetSpec, student_seed: int = 0, aug=None):
    """Trajectory-matching loss with the whole inner trajectory kept as one graph.

    Returns ``(loss Tensor, {"images": dL/dimages, "alpha": dL/dalpha})``.
    ``images`` and ``alpha`` may be existing tracked tensors (their gradients
    are then reported with respect to those leaves).
    """
    den = _denominator(segment)
    x = images if isinstance(images, Tensor) and images.tracked else Tensor(T.as_tensor(images).data, requires_grad=True)
    a = alpha if isinstance(alpha, Tensor) and alpha.tracked else Tensor(np.asarray(T.as_tensor(alpha).data, dtype=x.dtype), requires_grad=True)
    labels = np.asarray(labels, dtype=np.intp)
    batches = inner_batches(x.shape[0], cfg, student_seed)
    augs = _step_augs(aug, cfg.N, x.shape[-1], student_seed, len(batches[0]))
    theta = Tensor(segment.theta_start.values.astype(x.dtype), requires_grad=True)
    for idx, p in zip(batches, augs):
        (g,) = T.grad(_step_loss(spec, theta, x, labels, idx, p), [theta], retain_higher=True)
        theta = T.sub(theta, T.mul(a, g))
    diff = T.sub(theta, Tensor(segment.theta_target.values.astype(x.dtype)))
    loss = T.div(F.norm_sq(diff), den)
    gx, ga = T.grad(loss, [x, a])
    return loss, {"images": gx.data, "alpha": ga.data}


@_with_grad
def mtt_grad_constmem(images, labels, alpha, segment: ExpertSegment, cfg: MttConfig,
                      spec: NetSpec, student_seed: int = 0, aug=None):
    """Same value and gradients as :func:`mtt_loss_unrolled`, one step graph at a time.

    Phase 1 runs the inner steps keeping only parameter snapshots. Phase 2
    walks the steps backwards, rebuilding each step's graph and pulling the
    parameter adjoint through it with a vector-Jacobian product.
    Returns ``(loss float, {"images": ..., "alpha": ...})``.
    """
    den = _denominator(segment)
    x_val = np.asarray(T.as_tensor(images).data)
    dtype = x_val.dtype
    a_val = np.asarray(alpha, dtype=dtype)
    labels = np.asarray(labels, dtype=np.intp)
    batches = inner_batches(x_val.shape[0], cfg, student_seed)
    augs = _step_augs(aug, cfg.N, x_val.shape[-1], student_seed, len(batches[0]))
    target = segment.theta_target.values.astype(dtype)

    snaps = [segment.theta_start.values.astype(dtype)]
    x_const = Tensor(x_val)
    for idx, p in zip(batches, augs):
        theta = Tensor(snaps[-1], requires_grad=True)
        (g,) = T.grad(_step_loss(spec, theta, x_const, labels, idx, p), [theta])
        snaps.append(snaps[-1] - a_val * g.data)
    diff = snaps[-1] - target
    loss = float(np.dot(diff, diff)) / den

    lam = 2.0 * diff / den
    gx = np.zeros_like(x_val)
    ga = np.zeros_like(a_val)
    for i in reversed(range(cfg.N)):
        theta = Tensor(snaps[i], requires_grad=True)
        x = Tensor(x_val, requires_grad=True)
        a = Tensor(a_val, requires_grad=True)
        (g,) = T.grad(_step_loss(spec, theta, x, labels, batches[i], augs[i]), [theta], retain_higher=True)
        nxt = T.sub(theta, T.mul(a, g))
        d_theta, d_x, d_a = T.vjp(nxt, lam, [theta, x, a])
        lam = d_theta.data
        gx += d_x.data
        ga += d_a.data
        del theta, x, a, g, nxt, d_theta, d_x, d_a
    return loss, {"images": gx, "alpha": ga}


def sample_expert_segment(buffer, cfg: MttConfig, rng) -> ExpertSegment:
    """Uniform trajectory, uniform start epoch in ``[0, T_plus]``, target ``M`` epochs later."""
    trajs = buffer.trajectories if hasattr(buffer, "trajectories") else buffer
    need = cfg.T_plus + cfg.M + 1
    if not trajs:
        raise ValueError("expert buffer is empty")
    if min(len(t) for t in trajs) < need:
        raise ValueError(f"expert trajectories need at least {need} snapshots for T_plus={cfg.T_plus}, M={cfg.M}")
    k = int(rng.integers(len(trajs)))
    t = int(rng.integers(cfg.T_plus + 1))
    return ExpertSegment(trajs[k][t], trajs[k][t + cfg.M], t, cfg.M, k)
