import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbaflow import diffcore as dc
from hbaflow import haar


def col(*v):
    return np.array(v, dtype=float)[:, None]


def test_split_even_odd():
    e, o = haar.split_even_odd(col(1, 2, 3, 4))
    assert e.ravel().tolist() == [2, 4] and o.ravel().tolist() == [1, 3]
    e, o = haar.split_even_odd(col(7, 9))
    assert e.ravel().tolist() == [9] and o.ravel().tolist() == [7]
    with pytest.raises(haar.LengthError):
        haar.split_even_odd(col(1, 2, 3))


def test_haar_mix_examples():
    f, c = haar.haar_mix(col(2, 4), col(1, 3), 0.5)
    assert c.ravel().tolist() == [1.5, 3.5] and f.ravel().tolist() == [-0.5, -0.5]
    e, o = col(3, -1), col(2, 5)
    f, c = haar.haar_mix(e, o, 0.0)
    assert np.array_equal(c, e) and np.array_equal(f, o - e)
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(haar.ParameterError):
            haar.haar_mix(e, o, bad)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2), st.floats(0, 0.99))
def test_fine_plus_coarse_is_odd(vals, alpha):
    e, o = col(vals[0]), col(vals[1])
    f, c = haar.haar_mix(e, o, alpha)
    assert np.allclose(f + c, o, atol=1e-9)


def test_forward_examples():
    f, c, ld = haar.f_hba_forward(col(1, 2, 3, 4), 0.5)
    assert f.ravel().tolist() == [-0.5, -0.5] and c.ravel().tolist() == [1.5, 3.5]
    assert ld == pytest.approx(2 * math.log(0.5), abs=1e-15)
    assert haar.f_hba_forward(np.random.default_rng(0).normal(size=(6, 2)), 0.0)[2] == 0.0
    y = np.arange(8.0).reshape(4, 2)
    assert haar.f_hba_forward(y, 0.5)[2] == pytest.approx(4 * math.log(0.5))


def test_inverse_examples():
    y = haar.f_hba_inverse(col(-0.5, -0.5), col(1.5, 3.5), 0.5)
    assert np.allclose(y.ravel(), [1, 2, 3, 4], atol=1e-15)
    y = haar.f_hba_inverse(np.zeros((2, 1)), col(3, 8), 0.0)
    assert y.ravel().tolist() == [3, 3, 8, 8]
    with pytest.raises(haar.ParameterError):
        haar.f_hba_inverse(col(1), col(1), 1.0)


def test_decompose_worked_example():
    p = haar.decompose(col(1, 2, 3, 4), 2, 0.5)
    assert p.fines[0].ravel().tolist() == [-0.5, -0.5]
    assert p.fines[1].ravel().tolist() == [-1.0]
    assert p.coarsest.ravel().tolist() == [2.5]
    assert p.logdet == pytest.approx(3 * math.log(0.5), abs=1e-12)
    assert np.allclose(haar.reconstruct(p).ravel(), [1, 2, 3, 4], atol=1e-15)


def test_scale_count_bound():
    y = np.zeros((8, 1))
    for K in (1, 2, 3):
        haar.decompose(y, K, 0.5)
    with pytest.raises(haar.LengthError, match="divisible by 2\\^K = 16"):
        haar.decompose(y, 4, 0.5)
    with pytest.raises(haar.LengthError):
        haar.decompose(np.zeros((12, 1)), 3, 0.5)
    assert [haar.max_scales(T) for T in (1, 2, 8, 12, 32)] == [0, 1, 3, 2, 5]


def test_k1_equals_single_level():
    y = np.random.default_rng(2).normal(size=(8, 2))
    p = haar.decompose(y, 1, 0.3)
    f, c, ld = haar.f_hba_forward(y, 0.3)
    assert np.array_equal(p.fines[0], f) and np.array_equal(p.coarsest, c) and p.logdet == ld


def test_zero_pyramid_reconstructs_zero():
    p = haar.pyramid_from_parts([np.zeros((4, 2)), np.zeros((2, 2))], np.zeros((2, 2)), 0.0)
    assert np.array_equal(haar.reconstruct(p), np.zeros((8, 2)))


def test_reconstruct_rejects_inconsistent_shapes():
    p = haar.decompose(np.ones((8, 1)), 2, 0.5)
    p.fines[0] = np.ones((3, 1))
    with pytest.raises(haar.StructureError):
        haar.reconstruct(p)


def test_roundtrip_random_trajectories():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.choice([4, 8, 16, 32]))
        d = int(rng.integers(1, 3))
        K = int(rng.integers(1, haar.max_scales(T) + 1))
        y = rng.normal(scale=5, size=(T, d))
        alphas = list(rng.uniform(0, 0.99, size=K))
        worst = max(worst, np.max(np.abs(haar.reconstruct(haar.decompose(y, K, alphas)) - y)))
    assert worst < 1e-10


def test_roundtrip_random_pyramids():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        K = int(rng.integers(1, 5))
        T = 2 ** K * int(rng.integers(1, 3))
        d = int(rng.integers(1, 3))
        a = float(rng.uniform(0, 0.999))
        fines = [rng.normal(size=(T // 2 ** (k + 1), d)) for k in range(K)]
        cK = rng.normal(size=(T // 2 ** K, d))
        p = haar.pyramid_from_parts(fines, cK, a)
        q = haar.decompose(haar.reconstruct(p), K, a)
        err = max(np.max(np.abs(x - y)) for x, y in zip(q.fines + [q.coarsest], fines + [cK]))
        worst = max(worst, err)
    assert worst < 1e-10


def numerical_jacobian(fn, y, h=1e-6):
    n = y.size
    J = np.zeros((n, n))
    for i in range(n):
        dy = np.zeros(n)
        dy[i] = h
        J[:, i] = (fn((y.ravel() + dy).reshape(y.shape)) - fn((y.ravel() - dy).reshape(y.shape))) / (2 * h)
    return J


def level_pairs(alpha):
    """One level as a flat map with outputs interleaved ``[f1, c1, f2, c2, ...]``."""
    def fn(y):
        f, c, _ = haar.f_hba_forward(y, alpha)
        return haar.interleave(f, c).ravel()
    return fn


@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.5, 0.9])
@pytest.mark.parametrize("T,d", [(2, 1), (4, 1), (8, 1), (2, 2), (4, 2), (8, 2)])
def test_logdet_matches_numerical_jacobian(T, d, alpha):
    y = np.random.default_rng(T * 10 + d).normal(size=(T, d))
    J = numerical_jacobian(level_pairs(alpha), y)
    _, ld_num = np.linalg.slogdet(J)
    assert abs(ld_num - haar.f_hba_forward(y, alpha)[2]) < 1e-6


@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.5, 0.9])
def test_jacobian_is_block_diagonal_2x2(alpha):
    T, d = 8, 2
    J = numerical_jacobian(level_pairs(alpha), np.random.default_rng(3).normal(size=(T, d)))
    block = np.array([[1 - alpha, alpha - 1], [alpha, 1 - alpha]])
    expect = np.zeros_like(J)
    # flat index (t, j) -> t*d + j; pair p couples steps 2p (odd) and 2p+1 (even) per dim
    for p in range(T // 2):
        for j in range(d):
            rows = [(2 * p) * d + j, (2 * p + 1) * d + j]
            for r in range(2):
                for c in range(2):
                    expect[rows[r], rows[c]] = block[r, c]
    assert np.max(np.abs(J - expect)) < 1e-8


def test_tail_of_pyramid_equals_decomposition_of_coarse():
    y = np.random.default_rng(4).normal(size=(16, 2))
    full = haar.decompose(y, 4, [0.2, 0.4, 0.6, 0.8])
    for k in range(1, 4):
        tail = haar.decompose(full.coarse[k - 1], 4 - k, [0.2, 0.4, 0.6, 0.8][k:])
        for a, b in zip(tail.fines + [tail.coarsest], full.fines[k:] + [full.coarsest]):
            assert np.array_equal(a, b)


def test_differentiable_alpha_logdet():
    a = dc.Array(0.4, requires_grad=True)
    p = haar.decompose(np.ones((4, 1)), 1, a)
    g = dc.backward(p.logdet)
    assert g[a.id] == pytest.approx(-2 / 0.6)


def test_mixparam_range():
    for u in (-50.0, 0.0, 50.0):
        a = haar.MixParam(u).alpha
        assert 0 <= a <= 1 - 1e-3
    assert haar.MixParam.from_alpha(0.5).alpha == pytest.approx(0.5)
    assert haar.MixParam(fixed=0.0).alpha == 0.0


def test_trajectory_validation():
    with pytest.raises(ValueError):
        haar.Trajectory(np.array([[np.nan, 0.0]]), 0.1)
