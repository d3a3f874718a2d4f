import numpy as np
import pytest

from mner import Dataset, Design, InputError, SingularCovariance, SymMat, UnitBlock
from mner.core import area_means, dense_marginal_covariance, marginal_block_inverse

from conftest import random_psd


def test_symmat_symmetrizes_small_asymmetry():
    a = np.array([[1.0, 2.0], [2.0 + 1e-10, 3.0]])
    s = SymMat(a)
    assert np.array_equal(s.array, s.array.T)
    assert s.array[0, 1] == pytest.approx(2.0 + 5e-11, abs=1e-16)


def test_symmat_rejects_asymmetry():
    with pytest.raises(InputError):
        SymMat([[1.0, 2.0], [2.1, 3.0]])


def test_symmat_is_immutable():
    s = SymMat(np.eye(2))
    with pytest.raises(ValueError):
        s.array[0, 0] = 5.0


def test_area_means_single_unit():
    b = UnitBlock([[1.5, -2.0]], np.arange(8.0).reshape(1, 2, 4))
    ybar, rbar = area_means(b)
    assert np.array_equal(ybar, [1.5, -2.0])
    assert np.array_equal(rbar, b.regressors[0])


def test_area_means_symmetric_pair():
    b = UnitBlock([[1.0, 1.0], [3.0, 3.0]], np.zeros((2, 2, 1)))
    assert np.array_equal(area_means(b)[0], [2.0, 2.0])


def test_area_means_brute_force_and_linear(rng):
    y, z = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    r = rng.normal(size=(5, 3, 4))
    ybar, rbar = area_means(UnitBlock(y, r))
    assert np.allclose(ybar, [sum(y[i, j] for i in range(5)) / 5 for j in range(3)], rtol=1e-14)
    assert np.allclose(rbar, r.sum(axis=0) / 5, rtol=1e-14)
    sum_means = area_means(UnitBlock(y, r))[0] + area_means(UnitBlock(z, r))[0]
    assert np.allclose(area_means(UnitBlock(y + z, r))[0], sum_means, rtol=1e-14, atol=1e-15)


def test_unitblock_shape_errors():
    with pytest.raises(InputError):
        UnitBlock(np.zeros((3, 2)), np.zeros((3, 1, 4)))
    with pytest.raises(InputError):
        UnitBlock(np.zeros((0, 2)), np.zeros((0, 2, 4)))


def test_design_validation():
    with pytest.raises(InputError):
        Design(np.zeros((3, 1, 1)), [1, 1])
    with pytest.raises(InputError):
        Design(np.zeros((3, 1, 1)), [3])
    with pytest.raises(InputError):
        Design(np.zeros((3, 1, 1)), [1, 2], area_ids=("a", "a"))


def test_dataset_from_blocks_roundtrip(rng):
    blocks = [UnitBlock(rng.normal(size=(n, 2)), rng.normal(size=(n, 2, 3))) for n in (1, 3, 2)]
    data = Dataset.from_blocks(blocks, area_ids=["x", "y", "z"])
    assert (data.m, data.N, data.k, data.s) == (3, 6, 2, 3)
    assert data.area_ids == ("x", "y", "z")
    for b, a in zip(blocks, data.areas):
        assert np.array_equal(b.responses, a.responses)
        assert np.array_equal(b.regressors, a.regressors)
    assert np.allclose(data.ybar[1], blocks[1].responses.mean(axis=0))


def test_block_inverse_without_random_effect():
    sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
    sinv, c = marginal_block_inverse(np.zeros((2, 2)), sigma, 4)
    assert np.allclose(sinv, np.linalg.inv(sigma), rtol=1e-14)
    assert np.array_equal(c, np.zeros((2, 2)))


@pytest.mark.parametrize("n", [1, 3, 7])
def test_block_inverse_scalar(n):
    psi, sigma = 0.7, 1.3
    _, c = marginal_block_inverse([[psi]], [[sigma]], n)
    assert c[0, 0] == pytest.approx(psi / (sigma * (sigma + n * psi)), rel=1e-14)


def test_block_inverse_dense_identity(rng):
    for _ in range(20):
        psi, sigma = random_psd(rng, 2), random_psd(rng, 2)
        sinv, c = marginal_block_inverse(psi, sigma, 3)
        dinv = np.kron(np.eye(3), sinv) - np.kron(np.ones((3, 3)), c)
        assert np.abs(dinv @ dense_marginal_covariance(psi, sigma, 3) - np.eye(6)).max() < 1e-12


def test_block_inverse_batched_matches_loop(rng):
    psi, sigma = random_psd(rng, 3), random_psd(rng, 3)
    sizes = np.array([1, 2, 5, 9])
    _, cs = marginal_block_inverse(psi, sigma, sizes)
    for n, c in zip(sizes, cs):
        assert np.allclose(c, marginal_block_inverse(psi, sigma, int(n))[1], rtol=1e-13, atol=1e-15)


def _conditioned(rng, k, log_cond):
    q, _ = np.linalg.qr(rng.normal(size=(k, k)))
    return q @ np.diag(np.logspace(0, -log_cond, k)) @ q.T


def _residual(psi, sigma, n):
    sinv, c = marginal_block_inverse(psi, sigma, n)
    dinv = np.kron(np.eye(n), sinv) - np.kron(np.ones((n, n)), c)
    d = dense_marginal_covariance(psi, sigma, n)
    return np.abs(d @ dinv - np.eye(n * sigma.shape[0])).max(), d


def test_block_inverse_well_conditioned(rng):
    # condition numbers of Psi and Sigma up to 1e4
    for _ in range(500):
        k, n = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        sigma = _conditioned(rng, k, rng.uniform(0, 4))
        psi = _conditioned(rng, k, rng.uniform(0, 4)) * rng.uniform(0.1, 10)
        assert _residual(psi, sigma, n)[0] < 1e-10


def test_block_inverse_ill_conditioned(rng):
    # up to 1e6 the factored form cancels terms of size |Sigma^-1|, so the
    # attainable residual scales with n k eps |D| max(|Sigma^-1|, |D^-1|)
    for _ in range(500):
        k, n = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        sigma = _conditioned(rng, k, rng.uniform(4, 6))
        psi = random_psd(rng, k, rank=int(rng.integers(0, k + 1)))
        err, d = _residual(psi, sigma, n)
        scale = max(np.linalg.norm(np.linalg.inv(sigma), 2), np.linalg.norm(np.linalg.inv(d), 2))
        bound = d.shape[0] * np.finfo(float).eps * np.linalg.norm(d, 2) * scale
        assert err < max(1e-10, bound)


def test_block_inverse_singular_sigma():
    with pytest.raises(SingularCovariance) as err:
        marginal_block_inverse(np.eye(2), np.diag([1.0, 0.0]), 2)
    assert "Sigma" in str(err.value)
