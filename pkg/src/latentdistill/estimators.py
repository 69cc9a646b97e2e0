"""scikit-learn style wrappers around the distillation engine and the student trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import engine as EN
from . import evaluation as E
from . import experts
from . import nets
from .augment import AugSettings
from .data import Dataset
from .generator import Generator, GenSpec
from .objectives import MttConfig


def _as_images(X, image_shape):
    """Accept (n, C, H, W) arrays, or flat (n, C*H*W) rows together with ``image_shape``."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:
        return X
    if image_shape is None:
        raise ValueError("flat input needs image_shape=(C, H, W)")
    return X.reshape((len(X),) + tuple(image_shape))


class DatasetDistiller(BaseEstimator):
    """Distill (X, y) into ``ipc`` synthetic images per class.

    After ``fit``: ``synset_`` (the latent set), ``images_`` and ``labels_``
    (its rendering), ``generator_`` and ``loss_log_``. ``transform`` is not
    provided; the distilled set is the product.
    """

    def __init__(self, method="dm", space="f2", ipc=1, iterations=200, latent_lr=None, real_batch=128,
                 mtt_N=10, mtt_M=2, mtt_T_plus=2, expert_epochs=4, n_experts=1, augment=True,
                 generator=None, depth=3, width=64, image_shape=None, dtype="float64", random_state=0):
        self.method = method
        self.space = space
        self.ipc = ipc
        self.iterations = iterations
        self.latent_lr = latent_lr
        self.real_batch = real_batch
        self.mtt_N = mtt_N
        self.mtt_M = mtt_M
        self.mtt_T_plus = mtt_T_plus
        self.expert_epochs = expert_epochs
        self.n_experts = n_experts
        self.augment = augment
        self.generator = generator
        self.depth = depth
        self.width = width
        self.image_shape = image_shape
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        images = _as_images(X, self.image_shape)
        self.classes_, codes = np.unique(y, return_inverse=True)
        data = Dataset(images, codes, len(codes), [str(c) for c in self.classes_])
        c, h, _ = images.shape[1:]
        spec = nets.convnet_spec(depth=self.depth, width=self.width, image_size=h, channels=c,
                                 classes=len(self.classes_))
        cfg = EN.DistillConfig(
            method=self.method, space=self.space, ipc=self.ipc, iterations=self.iterations,
            latent_lr=self.latent_lr, real_batch=self.real_batch,
            mtt=MttConfig(self.mtt_N, self.mtt_M, self.mtt_T_plus), aug=AugSettings(enabled=self.augment),
            seed=self.random_state, net=spec, dtype=self.dtype)
        gen = None
        if self.space != "pixel":
            gen = self.generator
            if gen is None:
                blocks = int(np.log2(h // 2))
                gen = Generator(GenSpec(blocks=blocks, out_size=h, classes=len(self.classes_), channels=c,
                                        seed=self.random_state))
        buffer = None
        if self.method == "mtt":
            hyper = experts.ExpertHyper(epochs=self.expert_epochs)
            buffer = experts.train_buffer(data, spec, self.n_experts, hyper, self.random_state, np.dtype(self.dtype).type)
        self.synset_, self.loss_log_ = EN.distill(cfg, data, gen, buffer)
        self.generator_ = gen
        self.images_ = self.synset_.render(gen)
        self.labels_ = self.classes_[self.synset_.labels]
        return self


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """A student network trained with the evaluation recipe (warm-up, cosine decay, EMA)."""

    def __init__(self, family="convnet", depth=3, width=64, warmup_epochs=50, decay_epochs=50, lr=0.01,
                 augment=True, image_shape=None, random_state=0):
        self.family = family
        self.depth = depth
        self.width = width
        self.warmup_epochs = warmup_epochs
        self.decay_epochs = decay_epochs
        self.lr = lr
        self.augment = augment
        self.image_shape = image_shape
        self.random_state = random_state

    def _spec(self, shape, classes):
        c, h, _ = shape
        if self.family == "mlp":
            return nets.mlp_spec(depth=self.depth, width=self.width, image_size=h, channels=c, classes=classes)
        make = nets.altconvnet_spec if self.family == "altconvnet" else nets.convnet_spec
        return make(depth=self.depth, width=self.width, image_size=h, channels=c, classes=classes)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        images = _as_images(X, self.image_shape)
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.spec_ = self._spec(images.shape[1:], len(self.classes_))
        protocol = E.EvalProtocol(self.warmup_epochs, self.decay_epochs, augment=self.augment, repeats=1,
                                  base_lr=((self.spec_.family, self.lr),))
        self.params_ = E.train_student(images, codes, self.spec_, protocol, self.random_state)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        images = _as_images(X, self.image_shape).astype(np.float64)
        logits = nets.forward_logits(self.spec_, self.params_, images).data
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
