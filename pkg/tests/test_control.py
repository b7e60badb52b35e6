import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import log_softmax, softmax

from octsplat.control import (StaleAnchors, UnmappedPrimitive, anchor_rewards, clamp_rewards, density_gradient,
                              dump_rewards_csv, group_by_anchor, surrogate)
from octsplat.octree import AnchorSet, LogitGrads, OctreeDensity, log_prob_many, sample_anchors

from test_octree import random_density

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_group_k1_is_permutation_copy(rng):
    delta = rng.normal(size=12)
    perm = rng.permutation(12)
    raw = group_by_anchor(delta, perm, 12)
    np.testing.assert_array_equal(raw[perm], delta)


def test_group_zero_and_empty_anchor():
    raw = group_by_anchor(np.zeros(6), [0, 0, 1, 1, 3, 3], 5)
    np.testing.assert_array_equal(raw, np.zeros(5))


def test_group_matches_double_loop(rng):
    for _ in range(20):
        n, A = rng.integers(1, 60), rng.integers(1, 10)
        delta = rng.normal(size=n)
        owner = rng.integers(0, A, size=n)
        expect = np.zeros(A)
        for a in range(A):
            for i in range(n):
                if owner[i] == a:
                    expect[a] += delta[i]
        np.testing.assert_allclose(group_by_anchor(delta, owner, A), expect, atol=1e-12)


def test_group_unmapped():
    with pytest.raises(UnmappedPrimitive):
        group_by_anchor(np.zeros(3), [0, 1], 2)
    with pytest.raises(UnmappedPrimitive):
        group_by_anchor(np.zeros(2), None, 2)
    with pytest.raises(UnmappedPrimitive):
        group_by_anchor(np.zeros(2), [0, -1], 2)


def test_clamp_examples():
    np.testing.assert_array_equal(clamp_rewards([0.5, 2.0, 1e-9]), np.zeros(3))
    np.testing.assert_array_equal(clamp_rewards([-2.0] * 7), [-2.0] * 7)
    raw = np.array([-10.0] + [-1.0] * 9)
    # sorted position 0.1 * 9 = 0.9 -> -10 + 0.9 * 9
    out = clamp_rewards(raw)
    assert out[0] == pytest.approx(-1.9, abs=1e-12)
    np.testing.assert_array_equal(out[1:], -1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=40))
def test_clamp_bounds(raw):
    raw = np.array(raw)
    out = clamp_rewards(raw)
    assert np.all(out <= 0)
    assert np.all(out >= min(np.percentile(raw, 10), 0) - 1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 3).map(lambda m: 10 * m + 1), st.data())
def test_clamp_idempotent_when_percentile_hits_a_sample(n, data):
    # with n = 10m + 1 the percentile lands exactly on an order statistic
    raw = np.array(data.draw(st.lists(finite, min_size=n, max_size=n)))
    once = clamp_rewards(raw)
    np.testing.assert_array_equal(clamp_rewards(once), once)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=30), st.lists(st.floats(0, 10), min_size=30, max_size=30))
def test_clamp_monotone(raw, bump):
    a = np.array(raw)
    b = a + np.array(bump[: len(a)])
    ca, cb = clamp_rewards(a), clamp_rewards(b)
    assert np.all(ca <= cb + 1e-9)


def test_anchor_rewards_bundle(rng):
    r = anchor_rewards(rng.normal(size=20), np.repeat(np.arange(5), 4), 5)
    assert r.raw.shape == (5,) and np.all(r.clamped <= 0)


def anchor_set_for(d, leaves):
    leaves = np.asarray(leaves, dtype=np.int64)
    return AnchorSet(np.zeros((len(leaves), 3)), leaves, log_prob_many(d, leaves), d.levels)


def test_density_gradient_zero_rewards(rng):
    d = random_density(rng, 2)
    a = sample_anchors(d, 10, rng)
    assert density_gradient(a, np.zeros(10), d).max_abs() == 0.0


def test_density_gradient_single_level_example(rng):
    d = OctreeDensity(1)
    z = rng.normal(size=8)
    d.set_logits(0, 0, z)
    g = density_gradient(anchor_set_for(d, [5]), [-1.0], d)
    e = np.eye(8)[5]
    np.testing.assert_allclose(g.dense(d)[0][0], -(e - softmax(z)), atol=1e-15)


def test_density_gradient_matches_surrogate_fd(rng):
    d = random_density(rng, 3, fill=0.5)
    a = sample_anchors(d, 40, rng)
    r = rng.normal(size=40)
    g = density_gradient(a, r, d)
    h = 1e-6
    for level, (paths, G) in g.items():
        for row in range(0, len(paths), 3):
            for k in (0, 5):
                bump = LogitGrads()
                e = np.zeros((1, 8))
                e[0, k] = 1.0
                bump[level] = (paths[row:row + 1], e)
                vals = []
                for s in (h, -h):
                    dm = d.copy()
                    dm.add(bump, s)
                    vals.append(float(r @ log_prob_many(dm, a.leaf_indices)))
                assert (vals[0] - vals[1]) / (2 * h) == pytest.approx(G[row, k], abs=1e-7)


def test_density_gradient_matches_log_softmax_sum(rng):
    d = random_density(rng, 2)
    leaves = rng.integers(0, 64, size=15)
    r = rng.normal(size=15)
    g = density_gradient(anchor_set_for(d, leaves), r, d)
    dense = g.dense(d)
    expect_root = np.zeros(8)
    for leaf, rj in zip(leaves, r):
        expect_root += rj * (np.eye(8)[leaf >> 3] - softmax(d.logits_for(0, [0])[0]))
    np.testing.assert_allclose(dense[0][0], expect_root, atol=1e-12)
    assert surrogate(anchor_set_for(d, leaves), r) == pytest.approx(
        sum(rj * (log_softmax(d.logits_for(0, [0])[0])[leaf >> 3]
                  + log_softmax(d.logits_for(1, [leaf >> 3])[0])[leaf & 7]) for leaf, rj in zip(leaves, r)))


def test_descent_raises_density_of_helpful_anchor():
    d = OctreeDensity(2)
    a = anchor_set_for(d, [9])
    before = log_prob_many(d, [9])[0]
    d.add(density_gradient(a, [-1.0], d), -0.5)
    assert log_prob_many(d, [9])[0] > before


def test_stale_anchors(rng):
    d3 = random_density(rng, 3)
    a = sample_anchors(d3, 5, rng)
    with pytest.raises(StaleAnchors):
        density_gradient(a, np.ones(5), OctreeDensity(2))


def test_rewards_csv(tmp_path, rng):
    d = OctreeDensity(2)
    a = sample_anchors(d, 4, rng)
    r = anchor_rewards(rng.normal(size=4), np.arange(4), 4)
    p = tmp_path / "r.csv"
    dump_rewards_csv(p, a, r, iteration=3)
    dump_rewards_csv(p, a, r, iteration=4, append=True)
    lines = p.read_text().splitlines()
    assert lines[0] == "iteration,anchor,raw,clamped,log_prob"
    assert len(lines) == 9
