import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from warpnorm import normalize as N
from warpnorm import tensor as T
from warpnorm.errors import ContractError, DimensionError

V = N.NormVariant
seeds = st.integers(0, 2**31 - 1)


def setup(seed, shape=(2, 3, 6, 6)):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal(shape) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
    mod = N.ModulationMaps(1 + 0.5 * rng.standard_normal(shape), rng.standard_normal(shape))
    flow = rng.uniform(-2, 2, (shape[0], 2) + shape[2:])
    occ = rng.uniform(0, 1, (shape[0], 1) + shape[2:])
    return rng, h, mod, flow, occ


def const_maps(lam, beta, shape):
    B, C = shape[:2]
    return N.ModulationMaps(np.broadcast_to(lam[:, :, None, None], shape).copy(),
                            np.broadcast_to(beta[:, :, None, None], shape).copy())


# --- instance statistics ----------------------------------------------------


def test_stats_constant_image():
    s = N.instance_stats(np.full((1, 1, 3, 3), 5.0))
    assert s.mu.item() == 5.0 and s.sigma.item() == 0.0
    assert s.divisor.item() == pytest.approx(math.sqrt(N.EPS))


def test_stats_two_by_two():
    s = N.instance_stats(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2))
    assert s.mu.item() == 4.0
    assert s.sigma.item() == pytest.approx(math.sqrt(5.0), abs=1e-12)
    # the textbook E[h^2] - mu^2 form agrees
    assert s.sigma.item() == pytest.approx(math.sqrt((1 + 9 + 25 + 49) / 4 - 16), abs=1e-12)


def test_stats_batch_independence():
    a = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
    b = np.random.default_rng(1).standard_normal((1, 2, 4, 4))
    both = N.instance_stats(np.concatenate([a, b]))
    for i, x in enumerate((a, b)):
        alone = N.instance_stats(x)
        assert np.array_equal(both.mu[i], alone.mu[0])
        assert np.array_equal(both.sigma[i], alone.sigma[0])


# --- AdaIN / SAIN -----------------------------------------------------------


def test_adain_unit_modulation_normalises():
    h = np.random.default_rng(2).standard_normal((2, 3, 8, 8)) * 4 + 1
    out = N.adain(h, np.ones((2, 3)), np.zeros((2, 3)))
    assert np.all(np.abs(out.mean(axis=(2, 3))) < 1e-6)
    assert np.allclose(out.std(axis=(2, 3)), 1.0, atol=1e-5)


def test_adain_zero_scale_gives_bias():
    h = np.random.default_rng(3).standard_normal((1, 2, 4, 4))
    beta = np.array([[0.5, -2.0]])
    out = N.adain(h, np.zeros((1, 2)), beta)
    assert np.array_equal(out, np.broadcast_to(beta[:, :, None, None], out.shape))


def test_adain_scalar_oracle():
    h = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
    out = N.adain(h, np.array([[2.0]]), np.array([[1.0]]), eps=0.0)
    assert out[0, 0, 0, 0] == pytest.approx(2 * (1 - 4) / math.sqrt(5) + 1, abs=1e-12)
    assert out[0, 0, 0, 0] == pytest.approx(-1.68328, abs=1e-5)


def test_adain_shape_error():
    with pytest.raises(DimensionError):
        N.adain(np.zeros((1, 2, 3, 3)), np.ones((1, 3)), np.zeros((1, 2)))


def test_sain_constant_maps_equal_adain():
    rng, h, _, _, _ = setup(4)
    lam, beta = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    assert np.allclose(N.sain(h, const_maps(lam, beta, h.shape)), N.adain(h, lam, beta),
                       rtol=0, atol=1e-14)


def test_sain_unit_maps_is_normalisation():
    _, h, _, _, _ = setup(5)
    mod = N.ModulationMaps(np.ones_like(h), np.zeros_like(h))
    assert np.array_equal(N.sain(h, mod), N.normalized(h))


def test_sain_scalar_loop():
    rng = np.random.default_rng(6)
    h = rng.standard_normal((1, 2, 4, 4))
    lam, beta = rng.standard_normal((2, 1, 2, 4, 4))
    out = N.sain(h, N.ModulationMaps(lam, beta))
    for c in range(2):
        vals = h[0, c].ravel().tolist()
        mu = sum(vals) / len(vals)
        sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / len(vals))
        for y in range(4):
            for x in range(4):
                ref = lam[0, c, y, x] * (h[0, c, y, x] - mu) / math.sqrt(sd ** 2 + N.EPS) \
                    + beta[0, c, y, x]
                assert out[0, c, y, x] == pytest.approx(ref, abs=1e-12)


def test_sain_shape_error():
    h = np.zeros((1, 2, 3, 3))
    with pytest.raises(DimensionError):
        N.sain(h, N.ModulationMaps(np.ones((1, 2, 4, 4)), np.ones((1, 2, 4, 4))))
    with pytest.raises(DimensionError):
        N.ModulationMaps(np.ones((1, 2, 3, 3)), np.ones((1, 1, 3, 3)))


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_unit_maps_mean_and_std(seed):
    h = np.random.default_rng(seed).standard_normal((1, 3, 8, 8)) * 2
    out = N.sain(h, N.ModulationMaps(np.ones_like(h), np.zeros_like(h)))
    assert np.all(np.abs(out.mean(axis=(2, 3))) < 1e-6)
    std = out.std(axis=(2, 3))
    assert np.all((std >= 1 - 1e-3) & (std <= 1))


# --- warping ----------------------------------------------------------------


def test_warp_zero_flow():
    _, h, mod, _, _ = setup(7)
    w = N.warp_modulation(mod, np.zeros((2, 2, 6, 6)))
    assert np.array_equal(w.lambda_map, mod.lambda_map)
    assert np.array_equal(w.beta_map, mod.beta_map)


def test_warp_integer_shift_with_clamp():
    _, h, mod, _, _ = setup(8)
    flow = np.zeros((2, 2, 6, 6))
    flow[:, 1] = -2.0  # read two columns to the left
    w = N.warp_modulation(mod, flow)
    assert np.array_equal(w.lambda_map[..., 2:], mod.lambda_map[..., :-2])
    assert np.array_equal(w.lambda_map[..., 0], mod.lambda_map[..., 0])
    assert np.array_equal(w.lambda_map[..., 1], mod.lambda_map[..., 0])


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_warp_constant_maps_unchanged(seed):
    rng, h, _, flow, _ = setup(seed)
    mod = const_maps(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), h.shape)
    w = N.warp_modulation(mod, 3 * flow)
    assert np.allclose(w.lambda_map, mod.lambda_map, rtol=0, atol=1e-14)
    assert np.allclose(w.beta_map, mod.beta_map, rtol=0, atol=1e-14)


# --- SAWN -------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_reduction_chain(seed):
    rng, h, mod, _, _ = setup(seed)
    zero, one = np.zeros((2, 2, 6, 6)), np.ones((2, 1, 6, 6))
    ref = N.sain(h, mod)
    for v in V:
        assert np.array_equal(N.sawn(h, mod, zero, one, v), ref)
    lam, beta = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    cm = const_maps(lam, beta, h.shape)
    assert np.allclose(N.sawn(h, cm, zero, one, V.SAWN), N.adain(h, lam, beta), rtol=0, atol=1e-13)


def test_sawn_zero_mask_uses_raw_activations():
    _, h, mod, flow, _ = setup(9)
    out = N.sawn(h, mod, flow, np.zeros((2, 1, 6, 6)), V.SAWN)
    expected = h * N.normalized(h) + T.bilinear_sample(mod.beta_map, flow)
    assert np.allclose(out, expected, rtol=0, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_san_ignores_flow_and_mask(seed):
    _, h, mod, flow, occ = setup(seed)
    assert np.array_equal(N.sawn(h, mod, flow, occ, V.SAN), N.sain(h, mod))


def test_saws_keeps_bias_unwarped():
    _, h, mod, flow, occ = setup(10)
    diff = N.sawn(h, mod, flow, occ, V.SAWN) - N.sawn(h, mod, flow, occ, V.SAWS)
    assert np.allclose(diff, T.bilinear_sample(mod.beta_map, flow) - mod.beta_map, atol=1e-13)


def test_translation_equivariance():
    rng, h, mod, _, _ = setup(11, shape=(1, 2, 10, 10))
    s = (2, -1)
    flow = np.zeros((1, 2, 10, 10))
    flow[:, 0], flow[:, 1] = s
    one = np.ones((1, 1, 10, 10))
    shifted = N.ModulationMaps(np.roll(mod.lambda_map, (-s[0], -s[1]), axis=(2, 3)),
                               np.roll(mod.beta_map, (-s[0], -s[1]), axis=(2, 3)))
    a = N.sawn(h, mod, flow, one, V.SAWN)
    b = N.sain(h, shifted)
    inner = (slice(None), slice(None), slice(0, 10 - s[0]), slice(-s[1], 10))
    assert np.allclose(a[inner], b[inner], rtol=0, atol=1e-13)


def test_occlusion_range_checked():
    _, h, mod, flow, occ = setup(12)
    with pytest.raises(ContractError):
        N.sawn(h, mod, flow, occ + 1.0, V.SAWN)
    with T.checked_mode(False):
        N.sawn(h, mod, flow, occ + 1.0, V.SAWN)


def test_unknown_variant():
    with pytest.raises(ContractError):
        V.parse("SPADE")
    assert V.parse("sawn") is V.SAWN


# --- M-SAWN -----------------------------------------------------------------


def test_msawn_region_one_is_sawn():
    _, h, mod, flow, occ = setup(13)
    one = np.ones((2, 1, 6, 6))
    assert np.array_equal(N.msawn(h, mod, flow, occ, one), N.sawn(h, mod, flow, occ))


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_msawn_region_zero_flow_invariant(seed):
    rng, h, mod, flow, occ = setup(seed)
    zero = np.zeros((2, 1, 6, 6))
    a = N.msawn(h, mod, flow, occ, zero)
    b = N.msawn(h, mod, flow + rng.uniform(-3, 3, flow.shape), occ, zero)
    assert np.array_equal(a, b)
    assert np.array_equal(a, mod.lambda_map * N.normalized(h) + mod.beta_map)


def test_msawn_checkerboard_merge():
    _, h, mod, flow, occ = setup(14)
    yy, xx = np.mgrid[:6, :6]
    region = ((yy + xx) % 2).astype(float)[None, None].repeat(2, 0)
    out = N.msawn(h, mod, flow, occ, region)
    warped = N.sawn(h, mod, flow, occ)
    plain = N.sain(h, mod)
    assert np.array_equal(out[..., region[0, 0] == 1], warped[..., region[0, 0] == 1])
    assert np.allclose(out[..., region[0, 0] == 0], plain[..., region[0, 0] == 0], atol=1e-15)


def test_msawn_region_must_be_binary():
    _, h, mod, flow, occ = setup(15)
    with pytest.raises(ContractError):
        N.msawn(h, mod, flow, occ, np.full((2, 1, 6, 6), 0.5))


# --- adjoints ---------------------------------------------------------------


def test_sain_bias_gradient_is_grad_out():
    _, h, mod, _, _ = setup(16)
    g = np.random.default_rng(0).standard_normal(h.shape)
    _, _, dbeta = N.normalize_vjp("sain", (h, mod.lambda_map, mod.beta_map), g)
    assert np.array_equal(dbeta, g)


def test_adain_scale_gradient():
    _, h, _, _, _ = setup(17)
    g = np.random.default_rng(1).standard_normal(h.shape)
    lam, beta = np.ones((2, 3)), np.zeros((2, 3))
    _, dlam, dbeta = N.normalize_vjp("adain", (h, lam, beta), g)
    assert np.allclose(dlam, (g * N.normalized(h)).sum(axis=(2, 3)), atol=1e-12)
    assert np.allclose(dbeta, g.sum(axis=(2, 3)), atol=1e-12)


def test_normalize_vjp_unknown_op():
    with pytest.raises(ContractError):
        N.normalize_vjp("batchnorm", (np.zeros((1, 1, 2, 2)),), np.zeros((1, 1, 2, 2)))
