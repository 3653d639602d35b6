"""
Tests for the truncated Hilbert-space kernel
"""
import numpy as np
import pytest

from core.hilbert import DimensionError, HSOperator, TruncatedSpace, hs_inner, semigroup_apply, symmetrize


def test_semigroup_identity_spectrum():
    """Zero spectrum gives the identity semigroup"""
    space = TruncatedSpace(n=2, eigenvalues=(0.0, 0.0))
    assert np.allclose(semigroup_apply(space, 5.0, [1.0, 2.0]), [1.0, 2.0])


def test_semigroup_at_zero_time():
    """S(0) = I for any spectrum"""
    space = TruncatedSpace.dirichlet(3)
    x = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(semigroup_apply(space, 0.0, x), x)


def test_semigroup_halving():
    """exp(-ln 2) halves the coordinate"""
    space = TruncatedSpace(n=1, eigenvalues=(-1.0,))
    assert semigroup_apply(space, np.log(2.0), [4.0])[0] == pytest.approx(2.0, abs=1e-14)


def test_semigroup_property():
    """S(s + t) x = S(s) S(t) x"""
    space = TruncatedSpace.dirichlet(4)
    rng = np.random.default_rng(1)
    x = rng.standard_normal(4)
    for s, t in [(0.01, 0.02), (0.1, 0.0), (0.3, 0.7)]:
        once = semigroup_apply(space, s + t, x)
        twice = semigroup_apply(space, s, semigroup_apply(space, t, x))
        assert np.allclose(once, twice, rtol=1e-13, atol=1e-300)


def test_semigroup_rejects_bad_input():
    """Negative time and wrong length are rejected"""
    space = TruncatedSpace.dirichlet(2)
    with pytest.raises(DimensionError):
        semigroup_apply(space, -0.1, [1.0, 1.0])
    with pytest.raises(DimensionError):
        semigroup_apply(space, 0.1, [1.0, 1.0, 1.0])


def test_semigroup_acts_on_path_batches():
    """The last axis carries the modes"""
    space = TruncatedSpace.dirichlet(2)
    batch = np.ones((5, 2))
    out = semigroup_apply(space, 0.1, batch)
    assert out.shape == (5, 2)
    assert np.allclose(out[3], space.semigroup_diagonal(0.1))


def test_dirichlet_spectrum():
    """lambda_k = -k^2 pi^2"""
    space = TruncatedSpace.dirichlet(3)
    assert np.allclose(space.spectrum, [-np.pi ** 2, -4 * np.pi ** 2, -9 * np.pi ** 2])


def test_space_validation():
    """n must be positive and match the eigenvalue count"""
    with pytest.raises(DimensionError, match='dims positive'):
        TruncatedSpace(n=0, eigenvalues=())
    with pytest.raises(DimensionError):
        TruncatedSpace(n=2, eigenvalues=(1.0,))


def test_hs_inner_basic():
    """<w, 0> = 0 and <I, I> = 2"""
    w = HSOperator(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert hs_inner(w, HSOperator(np.zeros((2, 2)))) == 0.0
    assert hs_inner(HSOperator(np.eye(2)), HSOperator(np.eye(2))) == pytest.approx(2.0)


def test_hs_inner_matches_double_loop():
    """Squared Frobenius norm by explicit summation"""
    rng = np.random.default_rng(7)
    entries = rng.standard_normal((3, 2))
    expected = 0.0
    for i in range(3):
        for j in range(2):
            expected += entries[i, j] * entries[i, j]
    assert hs_inner(entries, entries) == pytest.approx(expected, rel=1e-14)
    assert HSOperator(entries).norm() == pytest.approx(np.sqrt(expected))


def test_hs_inner_symmetric_and_bilinear():
    """Symmetry and bilinearity on random triples"""
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b, c = (rng.standard_normal((3, 2)) for _ in range(3))
        alpha, beta = rng.standard_normal(2)
        assert hs_inner(a, b) == pytest.approx(hs_inner(b, a))
        assert hs_inner(alpha * a + beta * b, c) == pytest.approx(alpha * hs_inner(a, c) + beta * hs_inner(b, c))


def test_hs_inner_shape_mismatch():
    """Different shapes are rejected"""
    with pytest.raises(DimensionError):
        hs_inner(np.zeros((2, 2)), np.zeros((2, 3)))


def test_hs_inner_batched():
    """Leading axes are kept"""
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 3, 2))
    out = hs_inner(a, a)
    assert out.shape == (4,)
    assert np.allclose(out, (a ** 2).sum(axis=(1, 2)))


def test_symmetrize():
    """Result is symmetric and fixes symmetric input"""
    rng = np.random.default_rng(2)
    m = rng.standard_normal((5, 3, 3))
    s = symmetrize(m)
    assert np.allclose(s, np.swapaxes(s, -1, -2))
    assert np.allclose(symmetrize(s), s)


if __name__ == '__main__':
    pytest.main([__file__])
