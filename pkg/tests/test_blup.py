import numpy as np
import pytest

from mner import (
    Dataset,
    Design,
    FitResult,
    OracleTooLarge,
    SingularCovariance,
    SymMat,
    UnitBlock,
    bayes_predict,
    dense_gls_oracle,
    eblup,
    fit,
    gls_fit,
    shrinkage_matrix,
    univariate_eblup_oracle,
)
from mner.blup import gls_batch
from mner.components import psi0_batch, sigma_batch
from mner.simulation import SimConfig, build_design
from mner.validation import check_dense_gls

from conftest import kron_dataset, random_dataset


def test_gls_without_random_effect_is_ols(rng):
    data = random_dataset(rng, 6, 2, 3)
    fr = gls_fit(data, np.zeros((2, 2)), np.eye(2))
    x = data.design.stacked
    ols = np.linalg.lstsq(x, data.responses.reshape(-1), rcond=None)[0]
    assert np.allclose(fr.beta, ols, rtol=1e-12)


def test_gls_matches_dense_oracle():
    res = check_dense_gls(instances=100, seed=5)
    assert res.passed, res.value


def test_oracle_hand_solve():
    # m = 2, n = (1, 1), k = 1: two equations, two unknowns, exact fit
    reg = np.array([[[1.0, 0.0]], [[1.0, 1.0]]])
    data = Dataset(Design(reg, [1, 1]), np.array([[2.0], [5.0]]))
    beta, _ = dense_gls_oracle(data, [[0.5]], [[1.0]])
    assert np.allclose(beta, [2.0, 3.0], rtol=1e-14)
    assert np.allclose(gls_fit(data, [[0.5]], [[1.0]]).beta, [2.0, 3.0], rtol=1e-14)


def test_oracle_size_guard(rng):
    data = random_dataset(rng, 40, 3, 2, sizes=np.full(40, 6))
    with pytest.raises(OracleTooLarge):
        dense_gls_oracle(data, np.eye(3), np.eye(3))


def test_shrinkage_examples():
    assert np.array_equal(shrinkage_matrix(np.zeros((2, 2)), np.eye(2), 3), np.zeros((2, 2)))
    assert np.allclose(shrinkage_matrix(np.eye(2), np.eye(2), 1), 0.5 * np.eye(2), rtol=1e-15)
    psi, sigma = np.diag([1.0, 3.0]), np.diag([2.0, 0.5])
    b = shrinkage_matrix(psi, sigma, 4)
    assert np.allclose(b, np.diag([1.0 / (1.0 + 0.5), 3.0 / (3.0 + 0.125)]), rtol=1e-14)


def test_bayes_predict_zero_innovation(rng):
    reg = rng.normal(size=(3, 2, 4))
    beta = rng.normal(size=4)
    c = rng.normal(size=(2, 4))
    area = UnitBlock(np.tile(reg.mean(0) @ beta, (3, 1)) + np.array([[1, -1], [0, 0], [-1, 1]]), reg)
    out = bayes_predict(beta, np.eye(2), np.eye(2), area, c_a=c)
    assert np.allclose(out, c @ beta, rtol=1e-13)


def test_bayes_predict_full_weight(rng):
    area = UnitBlock(rng.normal(size=(3, 2)), rng.normal(size=(3, 2, 4)))
    out = bayes_predict(rng.normal(size=4), np.eye(2), np.eye(2), area, shrinkage=np.eye(2))
    assert np.allclose(out, area.responses.mean(0), rtol=1e-13)


def test_eblup_with_zero_psi_is_synthetic(rng):
    data = random_dataset(rng, 8, 2, 4)
    fr = gls_fit(data, np.zeros((2, 2)), np.eye(2))
    c = rng.normal(size=(8, 2, 4))
    preds = eblup(data, c_spec=c, fit_result=fr)
    for p, ca in zip(preds, c):
        assert np.allclose(p.theta_hat, ca @ fr.beta, rtol=1e-13)


def block_dataset(rng, m=12, k=2, q=2):
    """Each response has its own intercept and covariates."""
    sizes = rng.integers(2, 6, size=m)
    n = int(sizes.sum())
    reg = np.zeros((n, k, k * q))
    for p in range(k):
        reg[:, p, p * q] = 1.0
        reg[:, p, p * q + 1 : (p + 1) * q] = rng.normal(size=(n, q - 1))
    y = reg @ rng.normal(size=k * q) + np.repeat(rng.normal(size=(m, k)), sizes, 0) + rng.normal(size=(n, k))
    return Dataset(Design(reg, sizes), y)


def test_diagonal_components_decouple(rng):
    data = block_dataset(rng, k=3, q=3)
    psi, sigma = np.diag([0.7, 1.2, 0.3]), np.diag([1.0, 0.4, 2.0])
    preds = eblup(data, fit_result=gls_fit(data, psi, sigma))
    theta = np.array([p.theta_hat for p in preds])
    for p in range(3):
        cols = slice(3 * p, 3 * p + 3)
        x = data.design.regressors[:, p, cols]
        o = univariate_eblup_oracle((data.responses[:, p], x, data.design.sizes), psi[p, p], sigma[p, p])
        assert np.allclose(theta[:, p], o.theta, rtol=1e-12)


def test_singleton_areas(rng):
    data = random_dataset(rng, 10, 2, 2, sizes=np.array([1, 1, 1, 1, 2, 3, 4, 5, 6, 7]))
    preds = eblup(data)
    assert all(np.all(np.isfinite(p.theta_hat)) for p in preds)


def test_singular_lambda_names_area(rng):
    data = random_dataset(rng, 4, 2, 2)
    fr = FitResult(np.zeros(2), np.eye(2), SymMat(np.zeros((2, 2))), SymMat(np.diag([1.0, 0.0])), None, ())
    with pytest.raises(SingularCovariance) as err:
        eblup(data, fit_result=fr)
    assert data.area_ids[0] in str(err.value)


def test_prediction_on_shrinkage_path(rng):
    data = random_dataset(rng, 10, 3, 4)
    fr = fit(data)
    for p, cache in zip(eblup(data, fit_result=fr), fr.per_area_cache):
        expect = cache.rbar @ fr.beta + cache.shrinkage @ (cache.ybar - cache.rbar @ fr.beta)
        assert np.allclose(p.theta_hat, expect, rtol=1e-12)
        w = np.linalg.eigvals(cache.shrinkage).real
        assert w.min() > -1e-12 and w.max() < 1 + 1e-12


def _thetas(data):
    return np.array([p.theta_hat for p in eblup(data)])


def test_eblup_equivariance(rng):
    psi = np.array([[2.0, 0.5], [0.5, 1.5]])
    data = kron_dataset(rng, m=30, k=2, q=2, psi=psi)
    a = np.array([[1.5, 0.2], [-0.8, 0.9]])
    moved = Dataset(data.design, data.responses @ a.T)
    assert not fit(data).components.truncated
    assert np.allclose(_thetas(moved), _thetas(data) @ a.T, rtol=1e-9, atol=1e-11)


def test_eblup_rotation_equivariance_with_truncation(rng):
    # eigenvalue clipping commutes with orthogonal maps only
    data = kron_dataset(rng, m=8, k=2, q=2, psi=np.zeros((2, 2)))
    q = np.array([[np.cos(0.7), -np.sin(0.7)], [np.sin(0.7), np.cos(0.7)]])
    moved = Dataset(data.design, data.responses @ q.T)
    assert fit(data).components.truncated
    assert np.allclose(_thetas(moved), _thetas(data) @ q.T, rtol=1e-9, atol=1e-11)


def test_target_areas_and_mapping(rng):
    data = random_dataset(rng, 5, 2, 3)
    c = rng.normal(size=(2, 3))
    full = eblup(data)
    one = eblup(data, target_areas=[data.area_ids[2]], c_spec={data.area_ids[2]: c})
    assert len(one) == 1 and one[0].area_id == data.area_ids[2]
    fr = fit(data)
    cache = fr.per_area_cache[2]
    assert np.allclose(one[0].theta_hat, c @ fr.beta + cache.shrinkage @ (cache.ybar - cache.rbar @ fr.beta))
    assert not np.allclose(one[0].theta_hat, full[2].theta_hat)


def test_gls_independent_of_residual_statistics():
    # beta(Psi, Sigma) is uncorrelated with Sigma_hat and Psi0_hat
    cfg = SimConfig(m=40, rho=0.5)
    design = build_design(cfg)
    rng = np.random.default_rng(99)
    reps = 20_000
    v = rng.multivariate_normal(np.zeros(2), cfg.psi, size=(reps, design.m))
    y = design.regressors @ cfg.beta_vector + v[:, design.area_index] + rng.standard_normal((reps, design.N, 2))
    ybar = design.area_sums(y) / design.sizes[:, None]
    beta, _ = gls_batch(design, y, ybar, cfg.psi, cfg.sigma_matrix)
    sig = sigma_batch(design, y)
    p0 = psi0_batch(design, y, sig)
    stats = np.concatenate([sig.reshape(reps, -1)[:, [0, 1, 3]], p0.reshape(reps, -1)[:, [0, 1, 3]]], axis=1)
    corr = np.corrcoef(beta.T, stats.T)[: beta.shape[1], beta.shape[1] :]
    assert np.abs(corr).max() < 3 / np.sqrt(reps)
