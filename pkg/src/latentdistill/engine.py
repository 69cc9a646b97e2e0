"""Latent-space distillation loop.

Each iteration renders the synthetic set from its latents, evaluates the
chosen objective against real data (with one shared augmentation draw), pulls
the image gradient back onto the latents and takes an SGD step.

Generator-backed spaces use a recompute scheme: the images are rendered
without a graph, the loss gradient with respect to the images is computed and
that graph released, then the generator is replayed with a graph and the
image gradient is pushed through it with a vector-Jacobian product. Only one
of the two graphs is alive at any time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import augment
from . import nets
from . import objectives as O
from . import tensor as T
from .generator import Generator, init_latents
from .nets import NetSpec
from .synset import NO_GENERATOR, SynSet, parse_space
from .tensor import Tensor

METHODS = ("dc", "dm", "mtt")

# default latent learning rates per (method, pixel or latent space)
DEFAULT_LR = {
    ("dc", "pixel"): 0.1, ("dc", "latent"): 0.01,
    ("dm", "pixel"): 1.0, ("dm", "latent"): 0.1,
    ("mtt", "pixel"): 100.0, ("mtt", "latent"): 10.0,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    method: str = "dm"
    space: str = "f2"
    ipc: int = 1
    iterations: int = 5000
    latent_lr: float | None = None
    alpha_lr: float = 1e-5
    alpha_init: float = 0.01
    optimize_alpha: bool = True
    momentum: float = 0.5
    mtt: O.MttConfig = O.MttConfig()
    aug: augment.AugSettings = augment.AugSettings()
    seed: int = 0
    net: NetSpec = NetSpec()
    init: str = "auto"  # pixel: real | noise; latents: feedforward | gaussian
    init_m: int = 1024
    real_batch: int = 128
    dc_outer: int = 1
    dc_inner: int = 1
    dc_net_lr: float = 0.01
    dc_layerwise: bool = False
    gen_batch: int | None = None
    clamp: bool = False
    strict: bool = False
    mtt_constmem: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        parse_space(self.space)
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.ipc < 1:
            raise ConfigError("ipc must be >= 1")
        if self.latent_lr is not None and not self.latent_lr >= 0:
            raise ConfigError("latent_lr must be >= 0")
        if not self.alpha_init > 0:
            raise ConfigError("alpha_init must be > 0")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.gen_batch is not None and self.gen_batch < 1:
            raise ConfigError("gen_batch must be >= 1")

    @property
    def lr(self) -> float:
        if self.latent_lr is not None:
            return self.latent_lr
        return DEFAULT_LR[(self.method, "pixel" if self.space == "pixel" else "latent")]

    def init_mode(self) -> str:
        if self.init != "auto":
            return self.init
        return "real" if self.space == "pixel" else "feedforward"


# ---------------------------------------------------------------------------
# gradients of an image loss with respect to latents


@dataclass
class ImageLoss:
    """A loss over rendered images and the step size alpha.

    ``fn(images, alpha) -> scalar Tensor`` is the graph form. ``grad_fn``
    optionally supplies ``(loss, d_images, d_alpha)`` directly (used by the
    constant-memory trajectory loss, which never forms one scalar graph).
    """

    fn: Callable | None = None
    grad_fn: Callable | None = None

    def value_and_grad(self, images: np.ndarray, alpha: float):
        if self.grad_fn is not None:
            return self.grad_fn(images, alpha)
        with T.enable_grad():
            x = Tensor(images, requires_grad=True)
            a = Tensor(np.asarray(alpha, dtype=images.dtype), requires_grad=True)
            loss = self.fn(x, a)
            gx, ga = T.grad(loss, [x, a])
        return loss.item(), gx.data, ga.data


def _as_image_loss(loss_fn) -> ImageLoss:
    return loss_fn if isinstance(loss_fn, ImageLoss) else ImageLoss(fn=loss_fn)


def _latent_arrays(synset: SynSet, dtype):
    return synset.features.astype(dtype), synset.styles.astype(dtype)


def render_images(generator: Generator | None, synset: SynSet, dtype=np.float64, batch=None) -> np.ndarray:
    if synset.space == "pixel":
        return synset.features.astype(dtype)
    feats, styles = _latent_arrays(synset, dtype)
    step = batch or len(synset)
    out = []
    with T.no_grad():
        for i in range(0, len(synset), step):
            out.append(generator.synthesize(synset.cut, feats[i:i + step], styles[i:i + step]).data)
    return np.concatenate(out)


def checkpointed_syn_grad(generator: Generator, synset: SynSet, loss_fn, batch: int | None = None,
                          dtype=np.float64):
    """Loss value and gradients ``{"features", "styles", "alpha"}`` via render / loss / replay."""
    loss_fn = _as_image_loss(loss_fn)
    images = render_images(generator, synset, dtype, batch)
    loss, d_images, d_alpha = loss_fn.value_and_grad(images, synset.alpha)
    if synset.space == "pixel":
        return loss, {"features": np.asarray(d_images), "styles": np.zeros_like(synset.styles), "alpha": d_alpha}
    feats, styles = _latent_arrays(synset, dtype)
    g_feats, g_styles = np.zeros_like(feats), np.zeros_like(styles)
    step = batch or len(synset)
    if np.any(d_images):
        with T.enable_grad():
            for i in range(0, len(synset), step):
                f = Tensor(feats[i:i + step], requires_grad=True)
                s = Tensor(styles[i:i + step], requires_grad=True)
                img = generator.synthesize(synset.cut, f, s)
                gf, gs = T.vjp(img, d_images[i:i + step].astype(dtype), [f, s])
                g_feats[i:i + step] = gf.data
                g_styles[i:i + step] = gs.data
                del f, s, img, gf, gs
    return loss, {"features": g_feats, "styles": g_styles, "alpha": d_alpha}


def direct_syn_grad(generator: Generator, synset: SynSet, loss_fn, dtype=np.float64):
    """Reference path: one graph from latents through the generator and the loss."""
    loss_fn = _as_image_loss(loss_fn)
    if loss_fn.fn is None:
        raise ValueError("direct_syn_grad needs the graph form of the loss")
    feats, styles = _latent_arrays(synset, dtype)
    with T.enable_grad():
        f = Tensor(feats, requires_grad=True)
        s = Tensor(styles, requires_grad=True)
        a = Tensor(np.asarray(synset.alpha, dtype=dtype), requires_grad=True)
        images = f if synset.space == "pixel" else generator.synthesize(synset.cut, f, s)
        loss = loss_fn.fn(images, a)
        gf, gs, ga = T.grad(loss, [f, s, a])
    return loss.item(), {"features": gf.data, "styles": gs.data, "alpha": ga.data}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class LatentOptimizer:
    """SGD with momentum; style codes use a tenth of the feature learning rate."""

    lr: float
    momentum: float = 0.5
    alpha_lr: float = 0.0
    optimize_alpha: bool = False
    alpha_floor: float = 1e-8
    clamp: bool = False
    state: dict = field(default_factory=dict)

    def leaves(self, synset: SynSet) -> list:
        names = []
        if synset.space != "wplus":
            names.append("features")
        if synset.space != "pixel":
            names.append("styles")
        if self.optimize_alpha:
            names.append("alpha")
        return names

    def _move(self, name: str, value, grad, lr):
        v = self.state.get(name)
        v = np.asarray(grad, dtype=np.float64) if v is None else self.momentum * v + grad
        self.state[name] = v
        return value - lr * v

    def step(self, synset: SynSet, grads: dict) -> SynSet:
        for name in self.leaves(synset):
            if name not in grads or grads[name] is None:
                raise KeyError(f"missing gradient for leaf {name!r}")
        feats, styles, alpha = synset.features, synset.styles, synset.alpha
        if "features" in self.leaves(synset):
            feats = self._move("features", feats, grads["features"], self.lr)
            if self.clamp and synset.space == "pixel":
                feats = np.clip(feats, -1.0, 1.0)
        if "styles" in self.leaves(synset):
            styles = self._move("styles", styles, grads["styles"], self.lr / 10.0)
        if self.optimize_alpha:
            alpha = max(float(self._move("alpha", alpha, float(np.asarray(grads["alpha"])), self.alpha_lr)),
                        self.alpha_floor)
        return synset.copy(features=np.asarray(feats, dtype=np.float64),
                           styles=np.asarray(styles, dtype=np.float64), alpha=alpha)


def latent_sgd_step(synset: SynSet, grads: dict, config: DistillConfig, state: dict | None = None) -> SynSet:
    opt = LatentOptimizer(config.lr, config.momentum, config.alpha_lr,
                          config.optimize_alpha and config.method == "mtt", clamp=config.clamp,
                          state={} if state is None else state)
    return opt.step(synset, grads)


# ---------------------------------------------------------------------------
# initialization


def init_synset(config: DistillConfig, data, generator: Generator | None = None) -> SynSet:
    classes = data.classes
    cut = parse_space(config.space)
    rng = np.random.default_rng([config.seed, 0x1A])
    mode = config.init_mode()
    if cut is None:
        c, h, w = data.images.shape[1:]
        if mode == "real":
            idx = np.concatenate([rng.choice(data.class_train_indices(k), config.ipc, replace=False)
                                  for k in range(classes)])
            feats = data.images[idx].astype(np.float64)
        elif mode == "noise":
            feats = np.clip(rng.standard_normal((classes * config.ipc, c, h, w)) * 0.5, -1, 1)
        else:
            raise ConfigError(f"init {mode!r} is not valid in pixel space")
        return SynSet("pixel", config.ipc, classes, feats, np.zeros((len(feats), 0, 0)), config.alpha_init)
    if generator is None:
        raise ConfigError(f"space {config.space!r} requires a generator")
    if mode not in ("feedforward", "gaussian"):
        raise ConfigError(f"init {mode!r} is not valid in latent space")
    if generator.spec.classes != classes:
        raise ConfigError("generator class count differs from the dataset")
    feats, styles = [], []
    for k in range(classes):
        lat = init_latents(generator.spec, generator.params, mode, k, config.ipc, cut, rng, config.init_m)
        feats += [l.feature for l in lat]
        styles += [l.styles for l in lat]
    return SynSet(config.space, config.ipc, classes, np.stack(feats), np.stack(styles),
                  config.alpha_init, generator.digest())


# ---------------------------------------------------------------------------
# per-method image losses


def _rng(config: DistillConfig, it: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, it, tag])


def _real_class_batch(data, c: int, n: int, rng) -> np.ndarray:
    idx = data.class_train_indices(c)
    pick = rng.choice(idx, min(n, len(idx)), replace=False)
    return data.images[pick]


def _dc_image_loss(config, data, synset, it, theta, dtype) -> ImageLoss:
    rng = _rng(config, it, 0xDC)
    p = config.aug.draw(config.seed, it, data.size) if config.aug.enabled else None
    reals = [_real_class_batch(data, c, config.real_batch, rng).astype(dtype) for c in range(data.classes)]
    labels = synset.labels

    def fn(images, alpha):
        total = None
        for c in range(data.classes):
            idx = np.flatnonzero(labels == c)
            syn = augment.maybe_apply(T.index_select(images, idx), p)
            real = augment.maybe_apply(reals[c], p).data
            term = O.dc_loss((syn, labels[idx]), (real, np.full(len(real), c)), config.net, theta,
                             layerwise=config.dc_layerwise)
            total = term if total is None else T.add(total, term)
        return total

    return ImageLoss(fn=fn)


def _dm_image_loss(config, data, synset, it, dtype) -> ImageLoss:
    rng = _rng(config, it, 0xD3)
    psi = nets.init_params(config.net, int(rng.integers(2 ** 31)), dtype=dtype)
    p = config.aug.draw(config.seed, it, data.size) if config.aug.enabled else None
    reals = [augment.maybe_apply(_real_class_batch(data, c, config.real_batch, rng).astype(dtype), p).data
             for c in range(data.classes)]
    labels = synset.labels

    def fn(images, alpha):
        syns = [augment.maybe_apply(T.index_select(images, np.flatnonzero(labels == c)), p)
                for c in range(data.classes)]
        return O.dm_loss(syns, reals, config.net, psi)

    return ImageLoss(fn=fn)


def _mtt_image_loss(config, synset, it, buffer) -> ImageLoss:
    rng = _rng(config, it, 0x77)
    segment = O.sample_expert_segment(buffer, config.mtt, rng)
    student_seed = int(rng.integers(2 ** 31))
    aug = config.aug if config.aug.enabled else None
    labels = synset.labels

    def fn(images, alpha):
        return O.mtt_loss_unrolled(images, labels, alpha, segment, config.mtt, config.net, student_seed, aug)[0]

    def grad_fn(images, alpha):
        loss, g = O.mtt_grad_constmem(images, labels, alpha, segment, config.mtt, config.net, student_seed, aug)
        return loss, g["images"], g["alpha"]

    return ImageLoss(fn=fn, grad_fn=grad_fn if config.mtt_constmem else None)


def image_loss(config: DistillConfig, data, synset: SynSet, it: int, buffer=None, theta=None) -> ImageLoss:
    """The objective of iteration ``it`` as an :class:`ImageLoss` over rendered images.

    ``theta`` is the network for gradient matching (drawn from the iteration
    seed when omitted); ``buffer`` supplies expert segments for trajectory matching.
    """
    dtype = np.dtype(config.dtype).type
    if config.method == "dc":
        if theta is None:
            theta = nets.init_params(config.net, int(_rng(config, it, 0x7E).integers(2 ** 31)), dtype=dtype).values
        return _dc_image_loss(config, data, synset, it, theta, dtype)
    if config.method == "dm":
        return _dm_image_loss(config, data, synset, it, dtype)
    return _mtt_image_loss(config, synset, it, buffer)


def _train_net_on_syn(config, theta: np.ndarray, images: np.ndarray, labels, steps: int, it: int) -> np.ndarray:
    for s in range(steps):
        leaf = Tensor(theta, requires_grad=True)
        batch = images
        if config.aug.enabled:
            batch = augment.apply_aug(images, config.aug.draw(config.seed, it * 7919 + s, images.shape[-1]))
        (g,) = T.grad(nets.cross_entropy_loss(nets.forward_logits(config.net, leaf, batch), labels), [leaf])
        theta = theta - config.dc_net_lr * g.data
    return theta


# ---------------------------------------------------------------------------
# main loop


def _check_inputs(config: DistillConfig, data, generator, buffer):
    if config.method == "mtt" and buffer is None:
        raise ConfigError("method 'mtt' requires an expert buffer")
    if config.method == "mtt" and buffer.spec != config.net:
        raise ConfigError("expert buffer was trained with a different network spec")
    if config.space != "pixel" and generator is None:
        raise ConfigError(f"space {config.space!r} requires a generator")
    expect = (data.channels, data.size, data.size)
    if (config.net.channels, config.net.image_size, config.net.image_size) != expect or config.net.classes != data.classes:
        raise ConfigError("network spec does not match the dataset")


def distill(config: DistillConfig, data, generator: Generator | None = None, buffer=None,
            init: SynSet | None = None, callback=None):
    """Run the distillation loop. Returns ``(SynSet, per-iteration losses)``."""
    _check_inputs(config, data, generator, buffer)
    dtype = np.dtype(config.dtype).type
    if generator is not None and generator.dtype != np.dtype(dtype):
        generator = generator.with_dtype(dtype)
    synset = init if init is not None else init_synset(config, data, generator)
    state: dict = {}
    losses = []
    for it in range(config.iterations):
        if config.method == "dc":
            theta = nets.init_params(config.net, int(_rng(config, it, 0x7E).integers(2 ** 31)), dtype=dtype).values
            outer_losses = []
            for o in range(config.dc_outer):
                loss_fn = _dc_image_loss(config, data, synset, it * config.dc_outer + o, theta, dtype)
                loss, grads = _syn_grad(generator, synset, loss_fn, config, dtype)
                synset = _step(synset, grads, config, state, it, loss)
                outer_losses.append(loss)
                if o < config.dc_outer - 1:
                    imgs = render_images(generator, synset, dtype, config.gen_batch)
                    theta = _train_net_on_syn(config, theta, imgs, synset.labels, config.dc_inner, it)
            loss = float(np.mean(outer_losses))
        else:
            loss_fn = image_loss(config, data, synset, it, buffer)
            loss, grads = _syn_grad(generator, synset, loss_fn, config, dtype)
            synset = _step(synset, grads, config, state, it, loss)
        losses.append(float(loss))
        if callback is not None:
            callback(it, float(loss), synset)
    return synset, losses


def _syn_grad(generator, synset, loss_fn, config, dtype):
    with T.strict_mode(config.strict):
        return checkpointed_syn_grad(generator, synset, loss_fn, config.gen_batch, dtype)


def _step(synset, grads, config, state, it, loss):
    if config.strict and not np.isfinite(loss):
        raise T.NonFiniteError(f"non-finite loss at iteration {it}")
    return latent_sgd_step(synset, grads, config, state)


def with_overrides(config: DistillConfig, **kw) -> DistillConfig:
    return replace(config, **kw)
