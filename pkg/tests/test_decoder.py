import numpy as np
import pytest

from octsplat.decoder import (DecoderParams, ShapeMismatch, decode, decode_backward, offset_reg,
                              volume_opacity_reg)
from octsplat.raster import EXACT_SETTINGS, ParamGrads, backward, render

from conftest import front_camera
from helpers import ATTRS


def small_params(rng, K=4, out_init=0.5):
    return DecoderParams.init(rng, K=K, fourier_bands=2, hidden=8, offset_scale=0.2,
                              base_log_scale=np.log(0.1), out_init=out_init)


def flat_outputs(params, x):
    s = decode(x, params).scene
    return np.concatenate([getattr(s, k).ravel() for k in ATTRS])


def test_zero_weights_put_primitives_on_anchor(rng):
    p = small_params(rng)
    p.weights = p.zeros_like()
    x = rng.uniform(-1, 1, size=(5, 3))
    dec = decode(x, p)
    np.testing.assert_array_equal(dec.scene.centers, np.repeat(x, 4, axis=0))
    for k in ("log_scales", "rotations", "opacity_logits", "colors"):
        v = getattr(dec.scene, k)
        assert np.all(v == v[0])
    assert len(dec.scene) == 5 * 4
    np.testing.assert_array_equal(dec.scene.anchor_of, np.repeat(np.arange(5), 4))


def test_offsets_bounded(rng):
    p = small_params(rng, out_init=50.0)
    x = rng.uniform(-1, 1, size=(50, 3))
    dec = decode(x, p)
    d = np.linalg.norm(dec.scene.centers - np.repeat(x, p.K, axis=0), axis=1)
    assert np.all(d <= p.offset_scale * np.sqrt(3) + 1e-12)


def test_decode_deterministic(rng):
    p = small_params(rng)
    x = rng.uniform(-1, 1, size=(7, 3))
    np.testing.assert_array_equal(flat_outputs(p, x), flat_outputs(p, x))


def test_jacobian_matches_finite_differences(rng):
    p = small_params(rng, K=2)
    x = rng.uniform(-1, 1, size=(3, 3))
    base = decode(x, p)
    n = len(base.scene)
    # random upstream vector turns the Jacobian check into a vector-Jacobian product check
    up = ParamGrads(*(rng.normal(size=getattr(base.scene, k).shape) for k in ATTRS))
    vjp = decode_backward(x, p, up)
    v = np.concatenate([getattr(up, k).ravel() for k in ATTRS])
    h = 1e-6
    worst = 0.0
    for name, W in p.weights.items():
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            orig = W[idx]
            W[idx] = orig + h
            fp = flat_outputs(p, x)
            W[idx] = orig - h
            fm = flat_outputs(p, x)
            W[idx] = orig
            fd[idx] = v @ (fp - fm) / (2 * h)
        worst = max(worst, np.abs(fd - vjp[name]).max() / np.abs(fd).max())
    assert n == 6
    assert worst < 1e-4


def test_backward_zero_and_shape(rng):
    p = small_params(rng)
    x = rng.uniform(-1, 1, size=(4, 3))
    g = decode_backward(x, p, ParamGrads.zeros(16))
    assert all(not np.any(v) for v in g.values())
    with pytest.raises(ShapeMismatch):
        decode_backward(x, p, ParamGrads.zeros(15))


def test_backward_additive_over_anchors(rng):
    p = small_params(rng)
    x = rng.uniform(-1, 1, size=(6, 3))
    up = ParamGrads(*(rng.normal(size=s) for s in [(24, 3), (24, 3), (24, 4), (24,), (24, 3)]))
    full = decode_backward(x, p, up)
    first = ParamGrads(*(getattr(up, k)[:12] for k in ATTRS))
    second = ParamGrads(*(getattr(up, k)[12:] for k in ATTRS))
    a = decode_backward(x[:3], p, first)
    b = decode_backward(x[3:], p, second)
    for k in full:
        np.testing.assert_allclose(full[k], a[k] + b[k], atol=1e-12)


def test_offset_reg_examples():
    x = np.array([[0.0, 0, 0], [0.05, 0, 0]])
    assert offset_reg(x, np.zeros((2, 3, 3)))[0] == 0.0
    assert offset_reg(x[:1], np.ones((1, 2, 3)) * 0.01)[0] == pytest.approx(np.linalg.norm([0.01] * 3) * 0.5)
    delta = np.array([0.1, 0.0, 0.0])
    offs = np.stack([np.stack([delta, -delta])] * 2)
    sigma = 0.1
    value, _ = offset_reg(x, offs)
    assert value == pytest.approx((sigma - 0.05) / 4 * 2)


def test_offset_reg_nonnegative_and_gradient(rng):
    for _ in range(5):
        P, K = 6, 4
        x = rng.uniform(-0.3, 0.3, size=(P, 3))
        offs = rng.normal(scale=0.1, size=(P, K, 3)) + rng.normal(scale=0.1, size=(P, 1, 3))
        v, g = offset_reg(x, offs)
        assert v >= 0
        h = 1e-7
        fd = np.zeros_like(offs)
        for idx in np.ndindex(offs.shape):
            o = offs.copy()
            o[idx] += h
            vp = offset_reg(x, o)[0]
            o[idx] -= 2 * h
            vm = offset_reg(x, o)[0]
            fd[idx] = (vp - vm) / (2 * h)
        assert np.abs(fd - g).max() / np.abs(fd).max() < 1e-4


def test_volume_opacity_reg(rng):
    p = small_params(rng)
    scene = decode(rng.uniform(-1, 1, size=(3, 3)), p).scene
    scene.log_scales[:] = 0.0
    scene.opacity_logits[:] = 40.0
    assert volume_opacity_reg(scene, 2.0, 3.0)[0] == pytest.approx(2.0)
    scene.opacity_logits[:] = -40.0
    assert volume_opacity_reg(scene, 0.0, 3.0)[0] == pytest.approx(3.0)
    scene = decode(rng.uniform(-1, 1, size=(3, 3)), p).scene
    v, g = volume_opacity_reg(scene, 0.7, 0.3)
    h = 1e-6
    for attr in ("log_scales", "opacity_logits"):
        arr = getattr(scene, attr)
        for idx in np.ndindex(arr.shape):
            arr[idx] += h
            vp = volume_opacity_reg(scene, 0.7, 0.3)[0]
            arr[idx] -= 2 * h
            vm = volume_opacity_reg(scene, 0.7, 0.3)[0]
            arr[idx] += h
            assert (vp - vm) / (2 * h) == pytest.approx(getattr(g, attr)[idx], rel=1e-5, abs=1e-10)


def test_render_to_decoder_chain_rule(rng):
    """End-to-end: d(sum G * render(decode(x; w)))/dw against finite differences."""
    p = small_params(rng, K=2, out_init=0.3)
    x = rng.uniform(-0.3, 0.3, size=(3, 3))
    cam = front_camera(24)
    G = rng.normal(size=(24, 24, 3))

    def f():
        return float(np.sum(G * render(decode(x, p).scene, cam, EXACT_SETTINGS).image.pixels))

    dec = decode(x, p)
    out = render(dec.scene, cam, EXACT_SETTINGS)
    g = decode_backward(x, p, backward(dec.scene, cam, out, G), dec)
    h = 1e-6
    for name in ("W3", "b1"):
        W = p.weights[name]
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            orig = W[idx]
            W[idx] = orig + h
            fp = f()
            W[idx] = orig - h
            fm = f()
            W[idx] = orig
            fd[idx] = (fp - fm) / (2 * h)
        assert np.abs(fd - g[name]).max() / np.abs(fd).max() < 1e-3
