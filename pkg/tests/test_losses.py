import numpy as np
import pytest

from octsplat.losses import SizeMismatch, gaussian_window, l1_mean, psnr, render_loss, ssim
from octsplat.octree import LogitGrads, OctreeDensity
from octsplat.optim import Adam, OctreeAdam


def test_identical_images(rng):
    img = rng.uniform(size=(12, 10, 3))
    loss, grad, _ = render_loss(img, img)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.abs(grad).max() < 1e-12
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    assert psnr(img, img) == 99.0


def test_constant_offset_l1_is_mean():
    a = np.full((4, 5, 3), 0.3)
    assert l1_mean(a, a + 0.25)[0] == pytest.approx(0.25)


def test_psnr_formula(rng):
    t = rng.uniform(size=(10, 10, 3))
    noise = np.sqrt(1e-3) * np.where(rng.uniform(size=t.shape) < 0.5, -1.0, 1.0)
    assert psnr(t + noise, t) == pytest.approx(30.0, abs=1e-9)


def test_size_mismatch():
    with pytest.raises(SizeMismatch):
        render_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_window_normalized():
    w = gaussian_window()
    assert len(w) == 11 and w.sum() == pytest.approx(1.0) and np.argmax(w) == 5


def test_ssim_bounded_and_symmetric(rng):
    a, b = rng.uniform(size=(2, 16, 16, 3))
    s = ssim(a, b)
    assert -1 <= s < 1
    assert s == pytest.approx(ssim(b, a), abs=1e-14)


def test_ssim_gradient_finite_differences(rng):
    x = rng.uniform(size=(9, 8, 3))
    y = np.clip(x + rng.normal(scale=0.2, size=x.shape), 0, 1)
    _, g = ssim(x, y, with_grad=True)
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        fd[idx] = (ssim(xp, y) - ssim(xm, y)) / (2 * h)
    assert np.abs(fd - g).max() / np.abs(fd).max() < 1e-4


def test_render_loss_gradient_matches_fd(rng):
    x = rng.uniform(size=(8, 8, 3))
    y = rng.uniform(size=(8, 8, 3))
    loss, g, parts = render_loss(x, y, lam_ssim=0.2)
    assert loss == pytest.approx(parts["l1"] + 0.2 * (1 - parts["ssim"]))
    h = 1e-7
    for idx in [(0, 0, 0), (3, 4, 1), (7, 7, 2)]:
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        fd = (render_loss(xp, y)[0] - render_loss(xm, y)[0]) / (2 * h)
        assert fd == pytest.approx(g[idx], rel=1e-5, abs=1e-9)


def test_adam_minimizes_quadratic():
    p = {"w": np.array([3.0, -2.0])}
    opt = Adam(lr=0.1)
    for _ in range(500):
        opt.step(p, {"w": 2 * p["w"]})
    assert np.abs(p["w"]).max() < 1e-2


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, 1.0])}
    Adam(lr=0.01).step(p, {"w": np.array([5.0, -0.1])})
    np.testing.assert_allclose(p["w"], [0.99, 1.01], atol=1e-6)


def test_octree_adam_realigns_growing_tables():
    d = OctreeDensity(2)
    opt = OctreeAdam(lr=0.1)
    g = LogitGrads()
    g[1] = (np.array([5]), np.ones((1, 8)) * np.arange(8))
    opt.step(d, g)
    before = d.logits_for(1, [5])[0].copy()
    g2 = LogitGrads()
    g2[1] = (np.array([2]), np.ones((1, 8)))
    opt.step(d, g2)
    assert list(d.tables[1].paths) == [2, 5]
    # momentum keeps moving cell 5 in the same direction
    assert np.all(d.logits_for(1, [5])[0][1:] < before[1:])
    # a cell first seen on step 2 still gets the step-2 bias correction
    expect = -0.1 * (0.1 / (1 - 0.9**2)) / np.sqrt(0.001 / (1 - 0.999**2))
    np.testing.assert_allclose(d.logits_for(1, [2])[0], expect, atol=1e-6)
