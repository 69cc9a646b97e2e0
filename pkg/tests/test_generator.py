import numpy as np
import pytest

from latentdistill import generator as G
from latentdistill import synset as S
from latentdistill import tensor as T


@pytest.fixture(scope="module")
def gen():
    return G.Generator(G.GenSpec(z_dim=8, w_dim=8, blocks=3, base_size=2, base_channels=16, out_size=16,
                                 classes=3, min_channels=4))


def test_mapping_deterministic_and_class_dependent(gen, rng):
    z = rng.standard_normal(8)
    a = G.map_latent(gen.spec, gen.params, 1, z)
    assert np.array_equal(a, G.map_latent(gen.spec, gen.params, 1, z))
    assert not np.allclose(a, G.map_latent(gen.spec, gen.params, 2, z))


def test_cut_zero_feature_is_the_constant(gen, rng):
    f, s = gen.partial_forward([0, 2], rng.standard_normal((2, 8)), 0)
    assert np.array_equal(f[0], f[1])
    assert s.shape == (2, 3, 8)


def test_last_cut_has_no_styles(gen, rng):
    f, s = gen.partial_forward([1], rng.standard_normal((1, 8)), 3)
    assert f.shape == (1,) + gen.spec.feature_shape(3) and s.shape == (1, 0, 8)


def test_images_bounded(gen, rng):
    img = G.generate(gen.spec, gen.params, [0, 1, 2], 10 * rng.standard_normal((3, 8)))
    assert img.shape == (3, 3, 16, 16) and np.all(np.abs(img) <= 1)


@pytest.mark.parametrize("cut", [0, 1, 2, 3])
def test_feedforward_latent_reproduces_full_pass(gen, rng, cut):
    z = rng.standard_normal(8)
    full = G.generate(gen.spec, gen.params, [2], z[None])[0]
    assert np.array_equal(G.synth_from(gen.spec, gen.params, G.partial_forward(gen.spec, gen.params, 2, z, cut)), full)


def test_init_latents_modes(gen):
    ff = G.init_latents(gen.spec, gen.params, "feedforward", 0, 3, 1, rng=0)
    assert len(ff) == 3 and len({lat.feature.tobytes() for lat in ff}) == 3
    ga = G.init_latents(gen.spec, gen.params, "gaussian", 0, 2, 1, rng=0, m=64)
    assert ga[0].feature.shape == gen.spec.feature_shape(1)
    with pytest.raises(ValueError):
        G.init_latents(gen.spec, gen.params, "uniform", 0, 1, 1)


def test_vjp_matches_backward_of_inner_product(gen, rng):
    f, s = gen.partial_forward([0, 1], rng.standard_normal((2, 8)), 1)
    c = rng.standard_normal((2, 3, 16, 16))
    with T.enable_grad():
        ft, st = T.Tensor(f, requires_grad=True), T.Tensor(s, requires_grad=True)
        gf, gs = T.vjp(gen.synthesize(1, ft, st), c, [ft, st])
    with T.enable_grad():
        ft, st = T.Tensor(f, requires_grad=True), T.Tensor(s, requires_grad=True)
        hf, hs = T.grad(T.tsum(T.mul(gen.synthesize(1, ft, st), c)), [ft, st])
    assert np.allclose(gf.data, hf.data, rtol=1e-10, atol=1e-12)
    assert np.allclose(gs.data, hs.data, rtol=1e-10, atol=1e-12)


def test_synthesize_shape_errors(gen):
    with pytest.raises(T.ShapeError):
        gen.synthesize(1, np.zeros((1, 3, 4, 4)), np.zeros((1, 2, 8)))
    with pytest.raises(ValueError):
        gen.spec.feature_shape(4)


def test_digest_tracks_parameters(gen):
    d = gen.digest()
    assert len(d) == 32 and d == G.Generator(gen.spec, gen.params).digest()
    other = G.Generator(gen.spec, G.ParamVector(gen.params.values + 1e-9, gen.params.layout))
    assert other.digest() != d


def test_pixel_synset_renders_itself(rng):
    px = rng.uniform(-1, 1, (6, 3, 8, 8))
    ss = S.SynSet("pixel", 2, 3, px, np.zeros((6, 0, 0)))
    assert np.array_equal(ss.render(), px)


def test_latent_synset_rejects_other_generator(gen, rng):
    f, s = gen.partial_forward([0, 1, 2], rng.standard_normal((3, 8)), 2)
    ss = S.SynSet("f2", 1, 3, f, s, gen_hash=gen.digest())
    assert ss.render(gen).shape == (3, 3, 16, 16)
    with pytest.raises(ValueError):
        ss.render(G.Generator(G.GenSpec(z_dim=8, w_dim=8, blocks=3, base_channels=16, out_size=16, classes=3,
                                        min_channels=4, seed=1)))


def test_space_tags():
    assert S.parse_space("pixel") is None and S.parse_space("wplus") == 0 and S.parse_space("f3") == 3
    assert S.all_spaces(2) == ["pixel", "wplus", "f0", "f1", "f2"]
    with pytest.raises(ValueError):
        S.parse_space("f5", blocks=4)
    with pytest.raises(ValueError):
        S.parse_space("z")
