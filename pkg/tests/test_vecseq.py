import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import qmc

from octsplat.vecseq import (SizeMismatch, SobolAnchors, TooFewPoints, fps, ot_assign, serialize, sinusoidal_pe,
                             sobol, sobol3d)


def test_sobol_first_points():
    s = sobol3d(4).points
    np.testing.assert_array_equal(s[0], [0.5, 0.5, 0.5])
    np.testing.assert_array_equal(s[:, 0], [0.5, 0.75, 0.25, 0.375])


@pytest.mark.filterwarnings("ignore:The balance properties")
@pytest.mark.parametrize("dim", [1, 3, 8])
def test_sobol_matches_reference_generator(dim):
    ref = qmc.Sobol(d=dim, scramble=False).random(1025)[1:]
    np.testing.assert_array_equal(sobol(1024, dim), ref)


def test_sobol_range_and_determinism():
    a = sobol3d(3000).points
    assert a.min() >= 0 and a.max() < 1
    assert a.tobytes() == sobol3d(3000).points.tobytes()


def test_sobol_more_uniform_than_random():
    def max_bin_dev(p):
        counts = np.bincount(np.ravel_multi_index(np.floor(p * 4).astype(int).T, (4, 4, 4)), minlength=64)
        return np.abs(counts - len(p) / 64).max()

    rng = np.random.default_rng(0)
    s = max_bin_dev(sobol3d(256).points)
    random_devs = [max_bin_dev(rng.uniform(size=(256, 3))) for _ in range(100)]
    assert s < np.median(random_devs)


def test_custom_direction_file(tmp_path):
    f = tmp_path / "dirs.txt"
    f.write_text("d s a m_i\n2 1 0 1\n3 2 1 1 3\n")
    np.testing.assert_array_equal(sobol(50, 3, f), sobol3d(50).points)
    with pytest.raises(ValueError):
        sobol(5, 4, f)


def test_fps_basics(rng):
    pts = rng.normal(size=(20, 3))
    assert sorted(fps(pts, 20).tolist()) == list(range(20))
    seg = np.array([[0.3, 0, 0], [0.0, 0, 0], [1.0, 0, 0], [0.6, 0, 0]])
    assert sorted(fps(seg, 2).tolist()) == [0, 2]
    seg = np.array([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])
    assert fps(seg, 2).tolist() == [0, 2]
    with pytest.raises(TooFewPoints):
        fps(pts, 21)


def test_fps_beats_random_subsets(rng):
    def min_pair(p):
        d = np.linalg.norm(p[:, None] - p[None], axis=2)
        return d[np.triu_indices(len(p), 1)].min()

    for _ in range(5):
        pts = rng.uniform(size=(64, 3))
        chosen = min_pair(pts[fps(pts, 8)])
        others = [min_pair(pts[rng.choice(64, 8, replace=False)]) for _ in range(100)]
        assert chosen >= max(others) - 1e-12 or chosen >= np.percentile(others, 99)


def test_fps_ties_lowest_index():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
    assert fps(pts, 2).tolist() == [0, 1]


def test_ot_trivial_cases(rng):
    a = rng.uniform(size=(6, 3))
    perm, cost = ot_assign(a, a)
    assert perm.tolist() == list(range(6)) and cost == 0.0
    b = a.copy()
    b[[1, 4]] = b[[4, 1]]
    perm, _ = ot_assign(b, a)
    assert perm.tolist() == [0, 4, 2, 3, 1, 5]
    with pytest.raises(SizeMismatch):
        ot_assign(a[:5], a)


def brute_force_cost(src, anc):
    best = np.inf
    for p in itertools.permutations(range(len(src))):
        best = min(best, float(np.sum((src[list(p)] - anc) ** 2)))
    return best


def test_ot_matches_brute_force(rng):
    for _ in range(40):
        M = int(rng.integers(1, 8))
        src, anc = rng.uniform(size=(2, M, 3))
        perm, cost = ot_assign(src, anc)
        assert sorted(perm.tolist()) == list(range(M))
        assert cost == pytest.approx(brute_force_cost(src, anc), abs=1e-12)
        assert cost == pytest.approx(float(np.sum((src[perm] - anc) ** 2)), abs=1e-12)


def test_pe_examples():
    np.testing.assert_array_equal(sinusoidal_pe(np.zeros((1, 3)), 6), [[0, 1, 0, 1, 0, 1]])
    pe = sinusoidal_pe(np.array([[0.2, 0.4, 0.6]]), 12)
    assert pe.shape == (1, 12)
    assert pe[0, 0] == pytest.approx(np.sin(0.2)) and pe[0, 2] == pytest.approx(np.sin(0.2 * 0.01))
    with pytest.raises(ValueError):
        sinusoidal_pe(np.zeros((1, 3)), 8)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31))
def test_serialize_is_permutation_invariant(M, seed):
    rng = np.random.default_rng(seed)
    anchors = sobol3d(M)
    pts = rng.uniform(size=(M, 3))
    tokens = np.concatenate([pts, rng.normal(size=(M, 2))], axis=1)
    a = serialize(tokens, pts, anchors, 6)
    sigma = rng.permutation(M)
    b = serialize(tokens[sigma], pts[sigma], anchors, 6)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_array_equal(a.anchor_pe, b.anchor_pe)
    assert sorted(a.order.tolist()) == list(range(M))
    np.testing.assert_array_equal(a.tokens, tokens[a.order])


def test_serialize_idempotent_on_anchors():
    anchors = sobol3d(30)
    tok = np.arange(60.0).reshape(30, 2)
    out = serialize(tok, anchors.points, anchors, 6)
    assert out.order.tolist() == list(range(30)) and out.cost == 0.0
    np.testing.assert_array_equal(out.tokens, tok)
    assert isinstance(anchors, SobolAnchors)
