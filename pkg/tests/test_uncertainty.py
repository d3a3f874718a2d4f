from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mner import (
    Dataset,
    InputError,
    InsufficientDegreesOfFreedom,
    NonpositiveMSE,
    corrected_interval,
    fit,
    g1,
    g2,
    g3,
    gls_fit,
    msem_estimate,
    shrinkage_matrix,
    theoretical_coverage,
    univariate_eblup_oracle,
    v_approx,
)
from mner.normal import norm_cdf, norm_pdf, norm_ppf, z_quantile
from mner.uncertainty import z_star

from conftest import kron_dataset, permute_areas, random_dataset, random_psd

Z95 = 1.959963984540054


def test_g1_examples(rng):
    assert np.allclose(g1(np.eye(2), np.eye(2), 1).array, 0.5 * np.eye(2), rtol=1e-15)
    assert np.array_equal(g1(np.zeros((2, 2)), np.eye(2), 3).array, np.zeros((2, 2)))
    for _ in range(20):
        psi, sigma, n = random_psd(rng, 3), random_psd(rng, 3), int(rng.integers(1, 9))
        alt = np.linalg.inv(np.linalg.inv(psi) + n * np.linalg.inv(sigma))
        assert np.allclose(g1(psi, sigma, n).array, alt, rtol=1e-12, atol=1e-14)


def test_g2_zero_when_target_is_shrunk_mean(rng):
    data = random_dataset(rng, 6, 2, 3)
    psi, sigma = random_psd(rng, 2), random_psd(rng, 2)
    fr = gls_fit(data, psi, sigma)
    b = shrinkage_matrix(psi, sigma, data.design.sizes[1])
    out = g2(psi, sigma, fr, 1, c_a=b @ data.design.rbar[1])
    assert np.abs(out.array).max() < 1e-15


def test_g2_rejects_mismatched_fit(rng):
    data = random_dataset(rng, 6, 2, 3)
    fr = gls_fit(data, np.eye(2), np.eye(2))
    with pytest.raises(InputError):
        g2(2 * np.eye(2), np.eye(2), fr, 0)


def test_scalar_terms_match_oracle(rng):
    data = random_dataset(rng, 12, 1, 2, sizes=rng.integers(2, 7, size=12), psi=np.eye(1), sigma=np.eye(1))
    fr = fit(data)
    o = univariate_eblup_oracle(data)
    preds = msem_estimate(data, fr)
    for name in ("g1", "g2", "g3", "msem", "naive"):
        got = np.array([getattr(p, name).array[0, 0] for p in preds])
        assert np.allclose(got, getattr(o, name), rtol=1e-12), name


def test_g3_zero_sigma():
    out = g3(np.eye(2), np.zeros((2, 2)), [2, 3, 4], 3)
    assert np.array_equal(out.array, np.zeros((2, 2)))


def test_g3_checks_totals_and_degrees_of_freedom():
    with pytest.raises(InputError):
        g3(np.eye(2), np.eye(2), [2, 3], 2, N=6)
    with pytest.raises(InsufficientDegreesOfFreedom):
        g3(np.eye(2), np.eye(2), [1, 1, 1], 1)


def test_msem_bookkeeping(rng):
    data = random_dataset(rng, 10, 2, 3)
    for p in msem_estimate(data, fit(data)):
        eps = 4 * np.finfo(float).eps * np.abs(p.msem.array).max()
        assert np.allclose(p.msem.array - p.naive.array, p.g3.array, rtol=0, atol=eps)
        total = p.g1.array + p.g2.array + 2 * p.g3.array
        assert np.allclose(p.msem.array, total, rtol=1e-15, atol=0)


def test_msem_limit_for_many_areas():
    # Psi = Sigma = I, n_a = 1: g1 = I / 2 and g3 = O(1 / m)
    assert np.allclose(g1(np.eye(2), np.eye(2), 1).array, 0.5 * np.eye(2))
    small = [np.abs(g3(np.eye(2), np.eye(2), [2] * m, 1).array).max() for m in (500, 1000, 2000)]
    assert small[0] < 0.01
    assert small[1] / small[0] == pytest.approx(0.5, rel=0.02)
    assert small[2] / small[1] == pytest.approx(0.5, rel=0.02)


def scalar_v(form):
    # k = 1, psi = sigma = 1, m = 10, n_i = 2, in exact arithmetic
    m, n, N = 10, 2, 20
    lam, p, q = Fraction(3, 2), Fraction(2, 3), Fraction(2, 3)
    if form == "printed":
        first = Fraction(2 * m) * p**2 * lam**2 / (n**2 * N**2)
        last = -Fraction(2 * m) * (q * q * p + (p * q) ** 2) / (n**3 * N * (N - m))
    else:
        first = Fraction(2 * m * n * n) * (p * p * lam) ** 2 / (n**4 * N**2)
        last = -Fraction(4 * m) * (p * q) ** 2 / (n**3 * N * (N - m))
    second = Fraction(2 * m * m) * (p * p) ** 2 / (n**4 * N**2 * (N - m))
    third = 2 * (q * q) ** 2 / Fraction(n**2 * (N - m))
    return float(first + second + third + last)


@pytest.mark.parametrize("form", ["printed", "wishart"])
def test_v_scalar_transcription(form):
    got = v_approx([[1.0]], [[1.0]], [1.0], [2] * 10, 2, form=form)
    assert got == pytest.approx(scalar_v(form), rel=1e-13)


def test_v_zero_sigma_and_floor(rng):
    assert v_approx(np.eye(2), np.zeros((2, 2)), [1.0, 1.0], [2, 3, 4], 3) == 0.0
    for _ in range(200):
        psi, sigma = random_psd(rng, 2, rank=int(rng.integers(0, 3))), random_psd(rng, 2)
        sizes = rng.integers(1, 5, size=6)
        assert v_approx(psi, sigma, rng.normal(size=2), sizes, int(sizes[0])) >= 0.0


def test_zstar_without_correction():
    assert z_star(Z95, 0.0, 1.0) == Z95
    assert z_quantile(0.05) == pytest.approx(1.959964, abs=5e-7)


@pytest.mark.parametrize("x", np.linspace(-8.0, 8.0, 20))
def test_normal_functions_against_mpmath(x):
    mpmath.mp.dps = 40
    assert norm_cdf(x) == pytest.approx(float(mpmath.ncdf(x)), rel=1e-12, abs=1e-300)
    assert norm_pdf(x) == pytest.approx(float(mpmath.npdf(x)), rel=1e-12)


@pytest.mark.parametrize("p", [1e-12, 1e-8, 1e-4, 0.001, 0.01, 0.02425, 0.025, 0.05, 0.1, 0.2,
                               0.3, 0.4, 0.5, 0.6, 0.75, 0.9, 0.95, 0.975, 0.999, 1 - 1e-6])
def test_normal_quantile_against_mpmath(p):
    mpmath.mp.dps = 40
    exact = float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))
    assert norm_ppf(p) == pytest.approx(exact, rel=1e-12, abs=1e-15)


def test_theoretical_coverage_examples():
    assert theoretical_coverage(Z95, 0.0, 1.0) == pytest.approx(0.95, abs=1e-13)
    assert theoretical_coverage(0.0, 0.3, 1.0) == 0.0
    mpmath.mp.dps = 40
    z = mpmath.mpf(Z95)
    ref = 2 * mpmath.ncdf(z) - 1 - mpmath.mpf("0.01") * (z**3 + z) * mpmath.npdf(z)
    # V / (4 M^2) = 0.01 with M = 1
    assert theoretical_coverage(Z95, 0.04, 1.0) == pytest.approx(float(ref), abs=1e-13)


def test_interval_shapes(rng):
    data = random_dataset(rng, 10, 2, 3)
    fr = fit(data)
    comp = fr.components
    ell = np.array([1.0, -0.5])
    for p, n in zip(msem_estimate(data, fr), data.design.sizes):
        ci, naive = corrected_interval(p, ell, 0.05, (comp.psi_hat, comp.sigma_hat, data.design.sizes, int(n)))
        assert ci.lower <= ci.upper
        mid = float(ell @ p.theta_hat)
        assert (ci.lower + ci.upper) / 2 == pytest.approx(mid, rel=1e-12, abs=1e-12)
        assert naive.z_star == pytest.approx(Z95, rel=1e-15)
        assert ci.z_star >= naive.z_star
        assert ci.upper - ci.lower >= naive.upper - naive.lower
    ci, naive = corrected_interval(p, ell, 0.05, None)
    assert ci.z_star == naive.z_star


def test_interval_rejects_zero_contrast(rng):
    data = random_dataset(rng, 10, 2, 3)
    p = msem_estimate(data, fit(data), area=data.area_ids[0])
    with pytest.raises(NonpositiveMSE):
        corrected_interval(p, [0.0, 0.0])


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_scaling(rng, c):
    psi, sigma = random_psd(rng, 3), random_psd(rng, 3)
    sizes = rng.integers(1, 6, size=9)
    n = int(sizes[4])
    assert np.allclose(g1(c * psi, c * sigma, n).array, c * g1(psi, sigma, n).array, rtol=1e-13)
    assert np.allclose(g3(c * psi, c * sigma, sizes, n).array, c * g3(psi, sigma, sizes, n).array, rtol=1e-12)
    assert np.allclose(shrinkage_matrix(c * psi, c * sigma, n), shrinkage_matrix(psi, sigma, n), rtol=1e-12)


def test_non_target_area_order_irrelevant(rng):
    data = random_dataset(rng, 9, 2, 3)
    perm = np.r_[0, rng.permutation(np.arange(1, 9))]
    moved = permute_areas(data, perm)
    a = msem_estimate(data, fit(data), area=data.area_ids[0])
    b = msem_estimate(moved, fit(moved), area=data.area_ids[0])
    for name in ("g1", "g2", "g3", "msem"):
        assert np.allclose(getattr(a, name).array, getattr(b, name).array, rtol=1e-11, atol=1e-14)


def test_msem_equivariance(rng):
    psi = np.array([[2.0, 0.5], [0.5, 1.5]])
    data = kron_dataset(rng, m=30, k=2, q=2, psi=psi)
    a = np.array([[1.5, 0.2], [-0.8, 0.9]])
    moved = Dataset(data.design, data.responses @ a.T)
    assert not fit(data).components.truncated
    for p, q in zip(msem_estimate(data, fit(data)), msem_estimate(moved, fit(moved))):
        assert np.allclose(q.msem.array, a @ p.msem.array @ a.T, rtol=1e-9, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 3), m=st.integers(3, 12))
def test_msem_symmetric_psd_at_psd_plugins(seed, k, m):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, m, k, 2, sizes=rng.integers(2, 6, size=m))
    psi = random_psd(rng, k, rank=int(rng.integers(0, k + 1)))
    sigma = random_psd(rng, k)
    fr = gls_fit(data, psi, sigma)
    for p in msem_estimate(data, fr):
        a = p.msem.array
        assert np.array_equal(a, a.T)
        w = np.linalg.eigvalsh(a)
        assert w.min() >= -1e-12 * max(w.max(), 1e-300)
        assert not p.msem_nonpsd or w.min() < 0
