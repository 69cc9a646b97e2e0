"""Quick oracle suite behind ``latentdistill selftest``.

Small instances of the exactness checks: finite-difference gradients, the
two trajectory backward paths, checkpointed vs direct latent gradients, loss
identities, cut consistency, schedule values and container roundtrips.
"""

from __future__ import annotations

import numpy as np

from . import augment
from . import data as D
from . import engine as EN
from . import evaluation as E
from . import experts as X
from . import functional as F
from . import generator as G
from . import nets
from . import objectives as O
from . import synset as S
from . import tensor as T
from .gradcheck import check_gradient, rel_error


def _tiny_net():
    return nets.convnet_spec(depth=1, width=4, image_size=8, classes=3)


def _images(rng, n, size=8):
    return np.tanh(rng.standard_normal((n, 3, size, size)))


def check_op_gradients():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    w2 = rng.standard_normal(x.shape)
    errs = [
        check_gradient(lambda t: T.tsum(T.tanh(F.conv2d(t, w, padding=1))), x),
        check_gradient(lambda t: T.tsum(T.mul(F.instance_norm(t), w2)), x),
        check_gradient(lambda t: F.softmax_cross_entropy(T.reshape(t, (2, -1))[:, :5], np.array([1, 3])), x),
    ]
    grid = F.affine_grid(np.array([[[0.9, 0.2, 0.1], [-0.1, 1.1, 0.05]]]), (1, 3, 6, 6))[0]
    errs.append(check_gradient(lambda t: T.tsum(T.mul(F.grid_sample_bilinear(t, grid), x)), x))
    return max(errs) < 1e-4, f"max rel err {max(errs):.2e}"


def check_dc_second_order():
    rng = np.random.default_rng(1)
    spec = nets.mlp_spec(depth=1, width=4, image_size=2, channels=3, classes=3)
    params = nets.init_params(spec, 0)
    real = (_images(rng, 6, 2), np.array([0, 1, 2, 0, 1, 2]))
    labels = np.array([0, 1, 2])
    x0 = _images(rng, 3, 2)
    err = check_gradient(lambda t: O.dc_loss((t, labels), real, spec, params), x0)
    return err < 1e-4, f"rel err {err:.2e}"


def check_mtt_paths():
    rng = np.random.default_rng(2)
    spec = _tiny_net()
    imgs = _images(rng, 3, 8)
    labels = np.arange(3)
    start = nets.init_params(spec, 0)
    target = nets.ParamVector(start.values + 0.05 * rng.standard_normal(start.values.size), start.layout)
    seg = O.ExpertSegment(start, target, 0, 2)
    worst = 0.0
    for n in (1, 3):
        cfg = O.MttConfig(N=n, M=2, T_plus=0)
        with T.enable_grad():
            x = T.Tensor(imgs, requires_grad=True)
            a = T.Tensor(np.float64(0.05), requires_grad=True)
            loss, _ = O.mtt_loss_unrolled(x, labels, a, seg, cfg, spec)
            gx, ga = T.grad(loss, [x, a])
        loss_c, g = O.mtt_grad_constmem(imgs, labels, 0.05, seg, cfg, spec)
        worst = max(worst, abs(loss.item() - loss_c) / abs(loss_c), rel_error(gx.data, g["images"]),
                    rel_error(ga.data, g["alpha"]))
    return worst < 1e-8, f"max rel diff {worst:.2e}"


def _small_gen():
    return G.Generator(G.GenSpec(z_dim=8, w_dim=8, blocks=2, base_size=2, base_channels=8, out_size=8, classes=3))


def check_checkpointed_gradient():
    rng = np.random.default_rng(3)
    gen = _small_gen()
    feats, styles = gen.partial_forward(np.arange(3), rng.standard_normal((3, 8)), 1)
    ss = S.SynSet("f1", 1, 3, feats, styles, 0.01, gen.digest())
    spec = _tiny_net()
    psi = nets.init_params(spec, 4)
    reals = [_images(rng, 4) for _ in range(3)]

    def loss(images, alpha):
        return O.dm_loss([T.index_select(images, [c]) for c in range(3)], reals, spec, psi)

    l1, g1 = EN.checkpointed_syn_grad(gen, ss, loss)
    l2, g2 = EN.direct_syn_grad(gen, ss, loss)
    err = max(rel_error(g1["features"], g2["features"]), rel_error(g1["styles"], g2["styles"]),
              abs(l1 - l2) / abs(l2))
    return err < 1e-10, f"max rel diff {err:.2e}"


def check_loss_identities():
    rng = np.random.default_rng(5)
    spec = _tiny_net()
    params = nets.init_params(spec, 0)
    x, y = _images(rng, 3), np.arange(3)
    dc = O.dc_loss((x, y), (x, y), spec, params).item()
    dm = O.dm_loss([x[:1], x[1:2], x[2:]], [x[:1], x[1:2], x[2:]], spec, params).item()
    seg = O.ExpertSegment(params, nets.ParamVector(params.values + 0.1, params.layout), 0, 1)
    mtt0 = O.mtt_loss_unrolled(x, y, 0.0, seg, O.MttConfig(N=2, M=1, T_plus=0), spec)[0].item()
    ok = abs(dc) < 1e-12 and abs(dm) < 1e-12 and abs(mtt0 - 1.0) < 1e-12
    return ok, f"dc {dc:.1e}, dm {dm:.1e}, mtt(alpha=0) {mtt0:.15f}"


def check_cut_consistency():
    gen = _small_gen()
    z = np.random.default_rng(6).standard_normal(8)
    full = G.generate(gen.spec, gen.params, [1], z[None])[0]
    same = all(np.array_equal(G.synth_from(gen.spec, gen.params, G.partial_forward(gen.spec, gen.params, 1, z, n)),
                              full) for n in range(gen.spec.blocks + 1))
    return same, "bit-identical for every cut" if same else "mismatch"


def check_schedule():
    p = E.EvalProtocol(warmup_epochs=4, decay_epochs=6)
    ok = E.lr_schedule(3, p, 0.1) == 0.1 and E.lr_schedule(7, p, 0.1) == 0.05
    return ok, f"junction {E.lr_schedule(3, p, 0.1)}, midpoint {E.lr_schedule(7, p, 0.1)}"


def check_roundtrips():
    rng = np.random.default_rng(7)
    ds = D.gen_glyph_dataset(3, 5, 16, 0)
    gen = _small_gen()
    spec = _tiny_net()
    buf = X.TrajBuffer(spec, 1, 1, [[nets.init_params(spec, 0), nets.init_params(spec, 1)]])
    ss = S.SynSet("f1", 1, 3, rng.standard_normal((3, *gen.spec.feature_shape(1))),
                  rng.standard_normal((3, 1, 8)), 0.02, gen.digest())
    pairs = [
        (D.to_bytes(ds), lambda b: D.to_bytes(D.from_bytes(b))),
        (X.to_bytes(buf), lambda b: X.to_bytes(X.from_bytes(b))),
        (G.generator_to_bytes(gen), lambda b: G.generator_to_bytes(G.generator_from_bytes(b))),
        (S.to_bytes(ss), lambda b: S.to_bytes(S.from_bytes(b))),
    ]
    ok = all(again(blob) == blob for blob, again in pairs)
    return ok, "byte-exact" if ok else "mismatch"


def check_siamese_augmentation():
    rng = np.random.default_rng(8)
    x = _images(rng, 2)
    ident = augment.apply_aug(x, augment.AugParams.identity()).data
    p = augment.sample_aug_params(3, 11, 8)
    same = np.array_equal(augment.apply_aug(x, p).data, augment.apply_aug(x, augment.sample_aug_params(3, 11, 8)).data)
    return bool(np.array_equal(ident, x) and same), "identity exact, draws repeatable"


CHECKS = [
    ("op gradients vs finite differences", check_op_gradients),
    ("gradient-matching second order", check_dc_second_order),
    ("trajectory: constant-memory == unrolled", check_mtt_paths),
    ("checkpointed == direct latent gradient", check_checkpointed_gradient),
    ("loss identities", check_loss_identities),
    ("cut consistency", check_cut_consistency),
    ("schedule exactness", check_schedule),
    ("container roundtrips", check_roundtrips),
    ("siamese augmentation", check_siamese_augmentation),
]


def run_selftest(emit=print) -> bool:
    ok_all = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # noqa: BLE001 - a crashing check is a failed check
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= bool(ok)
        emit(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok_all
