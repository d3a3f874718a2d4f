"""Second-order MSE matrix, its estimator, and coverage-corrected intervals.

Batched kernels take ``psi``/``sigma`` with leading batch dimensions and return
per-area stacks ``(..., m, k, k)`` (or ``(..., m)`` for scalars).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blup import area_lambdas, predict_batch, resolve_targets
from .core import (
    AreaPrediction,
    Dataset,
    FitResult,
    InputError,
    InsufficientDegreesOfFreedom,
    NonpositiveMSE,
    SymMat,
    as_array,
    inv_sym,
    symmetrize,
)
from .normal import norm_cdf, norm_pdf, z_quantile

V_FORMS = ("printed", "wishart")
V_DEFAULT = "printed"


@dataclass(frozen=True)
class IntervalResult:
    lower: float
    upper: float
    z_star: float
    v_hat: float
    msem_scalar: float
    alpha: float
    method: str
    estimate: float = float("nan")


# ---------------------------------------------------------------------------
# batched kernels


def _trace_pairs(a, b):
    """tr(a_x b_y) for stacks a (..., X, k, k), b (..., Y, k, k) -> (..., X, Y)."""
    return np.einsum("...xkl,...ylk->...xy", a, b)


def g1_batch(psi, sigma, sizes):
    n = np.asarray(sizes, dtype=float)[:, None, None]
    lam_inv = inv_sym(area_lambdas(psi, sigma, sizes), "Lambda_a")
    return symmetrize(psi[..., None, :, :] @ lam_inv @ sigma[..., None, :, :] / n)


def g2_batch(shrinkage, beta_cov, targets, rbar):
    mm = targets - shrinkage @ rbar
    return symmetrize(np.einsum("...iks,...st,...ilt->...ikl", mm, beta_cov, mm))


def _sizes(sizes, n_target):
    n = np.asarray(sizes, dtype=float)
    N, m = n.sum(), n.shape[0]
    if N <= m:
        raise InsufficientDegreesOfFreedom("N must exceed m")
    na = n if n_target is None else np.asarray(n_target, dtype=float)
    return n, na, N, m


def g3_batch(psi, sigma, sizes, n_target=None):
    """Covariance-estimation term, (..., a, k, k).

    Sums over i run over ``sizes``; the target areas default to the same areas
    but ``n_target`` may give other sizes.
    """
    n, na, N, m = _sizes(sizes, n_target)
    n2 = n * n
    lam = area_lambdas(psi, sigma, n)
    inv_sym(lam, "Lambda_i")
    li = inv_sym(area_lambdas(psi, sigma, na), "Lambda_a")
    sig = sigma[..., None, :, :]
    tr = _trace_pairs(li, lam)  # [a, i] = tr(Li_a Lam_i)
    inner = np.einsum("i,...ikl,...alm,...imn->...akn", n2, lam, li, lam) + np.einsum(
        "i,...ai,...ikl->...akl", n2, tr, lam
    )
    first = sig @ li @ inner @ li @ sig
    w = (N * psi + m * sigma)[..., None, :, :]
    tr_s = np.einsum("...akl,...lk->...a", li, sigma)
    mid = sig @ li @ sig + tr_s[..., None, None] * sig
    second = w @ li @ mid @ li @ w
    na2 = (na * na)[:, None, None]
    return symmetrize(first / (na2 * N**2) + second / (na2 * N**2 * (N - m)))


def _quad(a, mat, b):
    return np.einsum("...k,...kl,...l->...", a, mat, b)


def v_batch(psi, sigma, ell, sizes, form: str = V_DEFAULT, n_target=None):
    """Second moment of ``l' msem l - l' MSEM l`` for every target area, (..., a).

    ``form="printed"`` evaluates the published four-line display term by term.
    ``form="wishart"`` takes the same Wishart moments with the quadratic
    forms evaluated directly.  With ``p = Li_a Sigma l`` and
    ``q = Li_a Psi l`` it is
    ``2 n_a^-4/N^2 sum n_i^2 (p'Lam_i p)^2 + 2 n_a^-4 m^2/(N^2 (N-m)) (p'Sigma p)^2
    + 2 n_a^-2/(N-m) (q'Sigma q)^2 - 4 n_a^-3 m/(N (N-m)) (p'Sigma q)^2``.
    """
    if form not in V_FORMS:
        raise ValueError(f"form must be one of {V_FORMS}")
    n, na, N, m = _sizes(sizes, n_target)
    ell = np.asarray(ell, dtype=float)
    lam = area_lambdas(psi, sigma, n)
    li = inv_sym(area_lambdas(psi, sigma, na), "Lambda_a")
    sig = sigma[..., None, :, :]
    p = li @ (sigma @ ell)[..., None, :, None]
    q = li @ (psi @ ell)[..., None, :, None]
    p, q = p[..., 0], q[..., 0]  # (..., a, k)
    pSp = _quad(p, sig, p)
    qSq = _quad(q, sig, q)
    pSq = _quad(p, sig, q)
    pLp = np.einsum("...ak,...ikl,...al->...ai", p, lam, p)
    l2 = 2.0 * m**2 * pSp**2 / (na**4 * N**2 * (N - m))
    l3 = 2.0 * qSq**2 / (na**2 * (N - m))
    if form == "wishart":
        l1 = 2.0 * np.einsum("i,...ai->...a", n * n, pLp**2) / (na**4 * N**2)
        l4 = -4.0 * m * pSq**2 / (na**3 * N * (N - m))
        return l1 + l2 + l3 + l4
    pLl = np.einsum("...ak,...ikl,l->...ai", p, lam, ell)
    lLl = np.einsum("k,...ikl,l->...i", ell, lam, ell)
    lSp = np.einsum("...k,...ak->...a", sigma @ ell, p)
    l1 = np.einsum("i,...ai->...a", n * n, pLl**2 + pLp * lLl[..., None, :]) / (na**4 * N**2)
    l4 = -2.0 * m * (qSq * lSp + pSq**2) / (na**3 * N * (N - m))
    return l1 + l2 + l3 + l4


def z_star(z, v, msem2):
    """Corrected quantile ``z + (z^3 + z) V / (8 M^2)``."""
    return z + (z**3 + z) * v / (8.0 * msem2**2)


# ---------------------------------------------------------------------------
# public operations


def g1(psi, sigma, n_a) -> SymMat:
    """Leading MSE term ``n_a^-1 Psi Lambda_a^-1 Sigma``."""
    p, s = as_array(psi), as_array(sigma)
    return SymMat(g1_batch(p, s, [n_a])[0])


def g2(psi, sigma, fit: FitResult, area: int, c_a=None) -> SymMat:
    """Coefficient-estimation term ``M (X'D^-1 X)^-1 M'`` with ``M = c_a - B_a Rbar_a``.

    ``fit`` must have been computed at (psi, sigma); ``area`` is the area's
    position.  ``c_a`` defaults to the area mean of the regressors.
    """
    p, s = as_array(psi), as_array(sigma)
    if not (np.allclose(p, fit.psi.array, rtol=1e-12, atol=0) and np.allclose(s, fit.sigma.array, rtol=1e-12, atol=0)):
        raise InputError("fit was computed at different covariance components")
    cache = fit.per_area_cache[area]
    c = cache.rbar if c_a is None else np.asarray(c_a, dtype=float)
    return SymMat(g2_batch(cache.shrinkage[None], fit.beta_cov, c[None], cache.rbar[None])[0])


def _check_totals(area_sizes, N, m):
    sizes = np.asarray(area_sizes, dtype=float)
    if N is not None and float(N) != sizes.sum():
        raise InputError("N does not match the area sizes")
    if m is not None and int(m) != sizes.shape[0]:
        raise InputError("m does not match the area sizes")


def g3(psi, sigma, area_sizes, n_a, N=None, m=None) -> SymMat:
    """Covariance-estimation term for an area of size ``n_a``.

    ``area_sizes`` are all the n_i; ``N`` and ``m`` default to their sum and
    count and are checked against them when given.
    """
    _check_totals(area_sizes, N, m)
    return SymMat(g3_batch(as_array(psi), as_array(sigma), area_sizes, [n_a])[0])


def v_approx(psi, sigma, ell, area_sizes, n_a, N=None, m=None, form: str = V_DEFAULT) -> float:
    """Approximate second moment of ``l' msem l - l' MSEM l``, floored at zero."""
    _check_totals(area_sizes, N, m)
    val = v_batch(as_array(psi), as_array(sigma), ell, area_sizes, form, [n_a])[0]
    return max(float(val), 0.0)


def msem_batch(psi, sigma, beta_cov, targets, rbar, sizes):
    """Per-area (g1, g2, g3) at the given covariance components."""
    lam_inv = inv_sym(area_lambdas(psi, sigma, sizes), "Lambda_a")
    b = psi[..., None, :, :] @ lam_inv
    return (
        g1_batch(psi, sigma, sizes),
        g2_batch(b, beta_cov, targets, rbar),
        g3_batch(psi, sigma, sizes),
    )


def msem_estimate(
    data: Dataset, fit: FitResult, area=None, c_spec=None
) -> AreaPrediction | list[AreaPrediction]:
    """EBLUP with its second-order unbiased MSE-matrix estimate ``g1 + g2 + 2 g3``.

    The naive plug-in ``g1 + g2 + g3`` is attached as ``naive``.  Returns a list
    over all areas when ``area`` is None.
    """
    d = data.design
    targets = resolve_targets(data, c_spec)
    p, s = fit.psi.array, fit.sigma.array
    theta, _, _ = predict_batch(d, data.ybar, fit.beta, p, s, targets)
    a1, a2, a3 = msem_batch(p, s, fit.beta_cov, targets, d.rbar, d.sizes)
    trunc = bool(fit.components.truncated) if fit.components is not None else False
    out = []
    positions = range(d.m) if area is None else [data.area_position(area)]
    for i in positions:
        ms = a1[i] + a2[i] + 2.0 * a3[i]
        out.append(
            AreaPrediction(
                area_id=d.area_ids[i],
                theta_hat=theta[i],
                target_spec=targets[i],
                g1=SymMat(a1[i]),
                g2=SymMat(a2[i]),
                g3=SymMat(a3[i]),
                msem=SymMat(ms),
                naive=SymMat(a1[i] + a2[i] + a3[i]),
                msem_nonpsd=bool(np.linalg.eigvalsh(ms)[0] < 0),
                truncated=trunc,
            )
        )
    return out if area is None else out[0]


def corrected_interval(
    pred: AreaPrediction,
    ell,
    alpha: float = 0.05,
    components: tuple | None = None,
    *,
    v_form: str = V_DEFAULT,
) -> tuple[IntervalResult, IntervalResult]:
    """Corrected and naive intervals for ``l' theta_a``.

    ``components`` is ``(psi_hat, sigma_hat, area_sizes, n_a)``; V is evaluated
    there and floored at zero.  The z* denominator uses the plug-in
    ``l'(g1 + g2 + g3) l``.  Returns ``(corrected, naive)``.
    """
    ell = np.asarray(ell, dtype=float)
    msem = pred.msem.array
    ms = float(ell @ msem @ ell)
    if not ms > 0:
        raise NonpositiveMSE(f"l' msem l = {ms:.6g} for area {pred.area_id}")
    m2 = float(ell @ pred.naive.array @ ell)
    z = z_quantile(alpha)
    if components is None:
        v = 0.0
    else:
        psi, sigma, sizes, n_a = components
        v = v_approx(psi, sigma, ell, sizes, n_a, form=v_form)
    zs = z_star(z, v, m2) if v > 0 else z
    est = float(ell @ pred.theta_hat)
    half = np.sqrt(ms)
    corrected = IntervalResult(est - zs * half, est + zs * half, zs, v, ms, alpha, "corrected", est)
    naive = IntervalResult(est - z * half, est + z * half, z, v, ms, alpha, "naive", est)
    return corrected, naive


def theoretical_coverage(z, v, msem_scalar) -> float:
    """Second-order coverage ``2 Phi(z) - 1 - V / (4 M^2) (z^3 + z) phi(z)``."""
    if not msem_scalar > 0:
        raise NonpositiveMSE("msem_scalar must be positive")
    return 2.0 * norm_cdf(z) - 1.0 - v / (4.0 * msem_scalar**2) * (z**3 + z) * norm_pdf(z)
