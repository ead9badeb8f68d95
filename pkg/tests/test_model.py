import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import GRADCHECK_MODEL, gradcheck, gradcheck_model, random_batch
from posquery import nn
from posquery.diffusion import linear_schedule
from posquery.errors import InvalidDimension, NonFiniteActivation, ShapeMismatch, UntrainedModel
from posquery.model import Batch, Denoiser, ModelConfig, PatchCodec
from posquery.position import Multiple, mode_to_regions, relative_grid, sincos_embed
from posquery.trainer import sharded_loss_and_grad

SCHED = linear_schedule(20, 1e-4, 0.02)


# -- codec -------------------------------------------------------------------------

def test_codec_zero_image():
    np.testing.assert_array_equal(PatchCodec(4, 2, 1).encode(np.zeros((4, 4, 1))), np.zeros((4, 4)))


def test_codec_row_order():
    seq = PatchCodec(4, 2, 1).encode(np.arange(16.0).reshape(4, 4, 1))
    np.testing.assert_array_equal(seq[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(seq[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(seq[2], [8, 9, 12, 13])


def test_codec_channel_major():
    img = np.zeros((2, 2, 2))
    img[..., 1] = 1.0
    np.testing.assert_array_equal(PatchCodec(2, 2, 2).encode(img)[0], [0, 0, 0, 0, 1, 1, 1, 1])


@given(st.sampled_from([(4, 2, 1), (8, 4, 3), (6, 3, 2), (16, 4, 3)]), st.integers(0, 3), st.integers(0, 2**31))
@settings(max_examples=30)
def test_codec_bijection(dims, lead, seed):
    codec = PatchCodec(*dims)
    shape = (2,) * lead + (codec.image_side, codec.image_side, codec.channels)
    x = np.random.default_rng(seed).standard_normal(shape)
    seq = codec.encode(x)
    assert seq.shape == (2,) * lead + (codec.length, codec.patch_dim)
    assert np.array_equal(codec.decode(seq), x)


def test_codec_errors():
    with pytest.raises(InvalidDimension):
        PatchCodec(5, 2, 1)
    with pytest.raises(ShapeMismatch):
        PatchCodec(4, 2, 1).encode(np.zeros((4, 4, 3)))


# -- config and layout ------------------------------------------------------------

def test_config_validation():
    with pytest.raises(InvalidDimension):
        ModelConfig(dim=30, heads=2)
    with pytest.raises(InvalidDimension):
        ModelConfig(dim=32, heads=3)


def test_param_count_is_a_function_of_the_config():
    a, b = Denoiser(GRADCHECK_MODEL), Denoiser(GRADCHECK_MODEL)
    assert a.num_params == b.num_params
    deeper = ModelConfig(**{**GRADCHECK_MODEL.to_dict(), "enc_depth": 2})
    assert Denoiser(deeper).num_params > a.num_params
    name, where = a.layout.name_of(0)
    assert name == "in_w" and tuple(where) == (0, 0)


# -- forward --------------------------------------------------------------------------

def test_shape_contract_l4_c8_d16():
    cfg = ModelConfig(image_size=4, patch_size=2, channels=2, dim=16, heads=4, enc_depth=1, dec_depth=1)
    m = Denoiser(cfg).init_params(np.random.default_rng(0), zero_head=False)
    r = np.random.default_rng(1)
    out = m.denoise(r.standard_normal((4, 8)), r.standard_normal((4, 8)), r.standard_normal((4, 2)), 5)
    assert out.shape == (4, 8)
    assert np.all(np.isfinite(out))


def test_zero_head_predicts_zero(tiny_cfg, rng):
    m = Denoiser(tiny_cfg).init_params(np.random.default_rng(0))
    b = random_batch(tiny_cfg, 2, 20, rng)
    out = m.denoise(b.z0, b.z_a, b.coords, b.t)
    np.testing.assert_array_equal(out, 0.0)


def test_single_token_cross_attention_returns_value_row(rng):
    q, k, v = rng.standard_normal((1, 8)), rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
    out, cache = nn.attention_forward(q, k, v, 1 / np.sqrt(8))
    np.testing.assert_array_equal(cache[3], [[1.0]])
    np.testing.assert_allclose(out, v)


def test_attention_rows_and_shift_invariance(rng):
    q, k, v = rng.standard_normal((6, 8)), rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
    out, cache = nn.attention_forward(q, k, v, 1 / np.sqrt(8))
    np.testing.assert_allclose(cache[3].sum(-1), 1.0, atol=1e-6)
    logits = q @ k.T / np.sqrt(8)
    shifted = nn.softmax(logits + rng.standard_normal((6, 1)) * 10) @ v
    np.testing.assert_allclose(shifted, out, atol=1e-12)


def test_cross_attention_permutation_equivariance(rng):
    q, k, v = rng.standard_normal((6, 8)), rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
    perm = rng.permutation(6)
    a, _ = nn.attention_forward(q, k, v, 0.3)
    b, _ = nn.attention_forward(q[perm], k, v, 0.3)
    np.testing.assert_allclose(b, a[perm], atol=1e-14)


def test_output_depends_on_the_embedding(tiny_model, rng):
    k = tiny_model.codec.k
    z = rng.standard_normal((tiny_model.codec.length, tiny_model.codec.patch_dim))
    outs = []
    for n in (2.25, 5.0):
        g = relative_grid(*mode_to_regions(Multiple(n, 96)), k, k)
        outs.append(tiny_model.denoise_embedded(z, z, sincos_embed(g, tiny_model.cfg.dim), 7))
    assert np.linalg.norm(outs[0] - outs[1]) > 0


def test_forward_is_bit_identical(tiny_model, rng):
    b = random_batch(tiny_model.cfg, 3, 20, rng)
    a = tiny_model.denoise(b.z0, b.z_a, b.coords, b.t)
    assert np.array_equal(a, tiny_model.denoise(b.z0, b.z_a, b.coords, b.t))


def test_call_counter(tiny_model, rng):
    b = random_batch(tiny_model.cfg, 1, 20, rng)
    before = tiny_model.calls
    tiny_model.denoise(b.z0, b.z_a, b.coords, b.t)
    tiny_model.loss_and_grad(b, SCHED)
    assert tiny_model.calls == before + 2


def test_untrained_model_refuses(tiny_cfg, rng):
    b = random_batch(tiny_cfg, 1, 20, rng)
    with pytest.raises(UntrainedModel):
        Denoiser(tiny_cfg).denoise(b.z0, b.z_a, b.coords, b.t)


def test_non_finite_output_is_reported(tiny_model, rng):
    b = random_batch(tiny_model.cfg, 1, 20, rng)
    z = b.z0.copy()
    z[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteActivation):
        tiny_model.denoise(z, b.z_a, b.coords, b.t)


def test_input_shape_errors(tiny_model, rng):
    b = random_batch(tiny_model.cfg, 2, 20, rng)
    with pytest.raises(ShapeMismatch):
        tiny_model.denoise(b.z0, b.z_a[:1], b.coords, b.t)
    with pytest.raises(ShapeMismatch):
        tiny_model.denoise_embedded(b.z0, b.z_a, np.zeros((2, 16, 8)), b.t)


# -- loss and gradient ---------------------------------------------------------------

def test_zero_output_zero_noise_gives_zero_loss(tiny_cfg, rng):
    m = Denoiser(tiny_cfg).init_params(np.random.default_rng(0))
    b = random_batch(tiny_cfg, 2, 20, rng)._replace(eps=np.zeros((2, 16, 48)))
    loss, grad = m.loss_and_grad(b, SCHED)
    assert loss == 0.0
    np.testing.assert_array_equal(m.views(grad)["out_b"], 0.0)


def test_duplicated_batch_leaves_loss_and_grad_unchanged(rng):
    m = gradcheck_model()
    b = random_batch(m.cfg, 3, 20, rng)
    doubled = Batch(*(np.concatenate([a, a]) for a in b))
    l1, g1 = m.loss_and_grad(b, SCHED)
    l2, g2 = m.loss_and_grad(doubled, SCHED)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("shards", [2, 4])
def test_shard_average_equals_monolithic(shards, rng):
    m = gradcheck_model()
    b = random_batch(m.cfg, 4, 20, rng)
    l1, g1 = m.loss_and_grad(b, SCHED)
    l2, g2 = sharded_loss_and_grad(m, b, SCHED, shards)
    assert abs(l1 - l2) < 1e-6
    assert np.max(np.abs(g1 - g2)) < 1e-6


def test_shards_must_divide_batch(rng):
    m = gradcheck_model()
    with pytest.raises(ShapeMismatch):
        sharded_loss_and_grad(m, random_batch(m.cfg, 3, 20, rng), SCHED, 2)


@pytest.mark.parametrize("overrides", [
    {},
    {"pe_variant": "learnable"},
    {"prediction": "x0"},
    {"cross_residual": False, "anchor_pe": False},
])
def test_gradient_matches_finite_differences(overrides):
    cfg = ModelConfig(**{**GRADCHECK_MODEL.to_dict(), **overrides})
    m = gradcheck_model(cfg, seed=3)
    r = np.random.default_rng(11)
    rel, _ = gradcheck(m, random_batch(cfg, 2, 20, r), SCHED, 60, r)
    assert rel < 1e-3


def test_layer_backward_passes_against_finite_differences(rng):
    def check(f, x, analytic):
        num = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += 1e-6
            xm[i] -= 1e-6
            num[i] = (f(xp) - f(xm)) / 2e-6
        np.testing.assert_allclose(analytic, num, rtol=1e-5, atol=1e-8)

    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((5, 5))
    g, b = rng.standard_normal(5), rng.standard_normal(5)
    up_ln = w[:3]
    _, c = nn.layernorm_forward(x, g, b)
    check(lambda v: np.sum(nn.layernorm_forward(v, g, b)[0] * up_ln), x, nn.layernorm_backward(up_ln, c)[0])

    img = rng.standard_normal((1, 4, 4, 2))
    k = rng.standard_normal((3, 3, 2, 2))
    out, cc = nn.conv2d_forward(img, k, np.zeros(2))
    up = rng.standard_normal(out.shape)
    dx, dk, _ = nn.conv2d_backward(up, cc)
    check(lambda v: np.sum(nn.conv2d_forward(v, k, np.zeros(2))[0] * up), img, dx)
    check(lambda v: np.sum(nn.conv2d_forward(img, v, np.zeros(2))[0] * up), k, dk)

    gx = rng.standard_normal((4, 6))
    gy, gc = nn.gelu_forward(gx)
    gup = rng.standard_normal(gy.shape)
    check(lambda v: np.sum(nn.gelu_forward(v)[0] * gup), gx, nn.gelu_backward(gup, gc))
