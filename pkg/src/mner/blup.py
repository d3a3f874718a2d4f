"""GLS coefficients and Bayes / BLUP / EBLUP prediction of area characteristics."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .components import DOF_DEFAULT, estimate_components
from .core import (
    AreaCache,
    AreaPrediction,
    CovComponents,
    Dataset,
    Design,
    FitResult,
    InputError,
    RankDeficientDesign,
    SingularCovariance,
    SymMat,
    UnitBlock,
    area_means,
    as_array,
    inv_sym,
    marginal_block_inverse,
    symmetrize,
)


def gls_batch(design: Design, y: np.ndarray, ybar: np.ndarray, psi: np.ndarray, sigma: np.ndarray):
    """GLS estimate via per-area factored inverses.

    Returns ``(beta, beta_cov)`` with ``beta_cov = (X'D^-1 X)^-1``.  Never forms
    the (N k) x (N k) covariance.
    """
    d = design
    sinv, c = marginal_block_inverse(psi, sigma, d.sizes)
    n2 = d.sizes.astype(float) ** 2
    xdx = np.einsum("kslt,...kl->...st", d.regressor_cross, sinv) - np.einsum(
        "i,iks,...ikl,ilt->...st", n2, d.rbar, c, d.rbar
    )
    xdy = np.einsum("nks,...nk->...s", d.regressors, y @ sinv) - np.einsum(
        "i,iks,...ikl,...il->...s", n2, d.rbar, c, ybar
    )
    xdx = symmetrize(xdx)
    try:
        cov = inv_sym(xdx, "X'D^-1 X")
    except SingularCovariance as exc:
        raise RankDeficientDesign(str(exc)) from None
    beta = np.einsum("...st,...t->...s", cov, xdy)
    return beta, cov


def area_lambdas(psi: np.ndarray, sigma: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """``Lambda_i = Psi + Sigma / n_i`` stacked over areas, (..., m, k, k)."""
    n = np.asarray(sizes, dtype=float)[:, None, None]
    return psi[..., None, :, :] + sigma[..., None, :, :] / n


def predict_batch(design: Design, ybar, beta, psi, sigma, targets=None):
    """EBLUP/BLUP predictions for every area; returns (theta, shrinkage, lam_inv)."""
    targets = design.rbar if targets is None else targets
    lam = area_lambdas(psi, sigma, design.sizes)
    lam_inv = inv_sym(lam, "Lambda_a")
    b = psi[..., None, :, :] @ lam_inv
    synth = np.einsum("iks,...s->...ik", targets, beta)
    resid = ybar - np.einsum("iks,...s->...ik", design.rbar, beta)
    return synth + np.einsum("...ikl,...il->...ik", b, resid), b, lam_inv


# ---------------------------------------------------------------------------
# public operations


def shrinkage_matrix(psi, sigma, n_a) -> np.ndarray:
    """``B_a = Psi (Psi + Sigma / n_a)^-1``."""
    psi, sigma = as_array(psi), as_array(sigma)
    lam = psi + sigma / float(n_a)
    return psi @ inv_sym(lam, "Lambda_a")


def bayes_predict(beta, psi, sigma, area: UnitBlock, c_a=None, shrinkage=None) -> np.ndarray:
    """Posterior-mean predictor ``c_a beta + B_a (ybar_a - Rbar_a beta)``.

    ``shrinkage`` overrides ``B_a`` (used to probe limiting cases such as
    ``B_a = I``).
    """
    beta = np.asarray(beta, dtype=float)
    ybar, rbar = area_means(area)
    c_a = rbar if c_a is None else np.asarray(c_a, dtype=float)
    b = shrinkage_matrix(psi, sigma, area.n_units) if shrinkage is None else np.asarray(shrinkage)
    return c_a @ beta + b @ (ybar - rbar @ beta)


def gls_fit(data: Dataset, psi, sigma, components: CovComponents | None = None) -> FitResult:
    """Generalized least squares at fixed (Psi, Sigma) with per-area caches."""
    d = data.design
    p, s = as_array(psi), as_array(sigma)
    beta, cov = gls_batch(d, data.responses, data.ybar, p, s)
    lam = area_lambdas(p, s, d.sizes)
    lam_inv = inv_sym(lam, "Lambda_a")
    b = p @ lam_inv
    cache = tuple(
        AreaCache(lam[i], lam_inv[i], b[i], data.ybar[i], d.rbar[i]) for i in range(d.m)
    )
    return FitResult(beta, cov, SymMat(p), SymMat(s), components, cache)


def fit(data: Dataset, dof: str = DOF_DEFAULT) -> FitResult:
    """Estimate the covariance components and the GLS coefficients at the plug-ins."""
    comp = estimate_components(data, dof)
    return gls_fit(data, comp.psi_hat, comp.sigma_hat, comp)


def resolve_targets(data: Dataset, c_spec=None) -> np.ndarray:
    """Target matrices ``c_a`` (m, k, s); default is the area mean of the regressors.

    ``c_spec`` may be an (m, k, s) array or a mapping from area id to a (k, s)
    array; areas missing from the mapping keep the default.
    """
    d = data.design
    if c_spec is None:
        return d.rbar
    if isinstance(c_spec, Mapping):
        out = d.rbar.copy()
        for key, val in c_spec.items():
            v = np.asarray(val, dtype=float)
            if v.shape != (d.k, d.s):
                raise InputError(f"target for area {key!r} must be {d.k} x {d.s}")
            out[data.area_position(key)] = v
        return out
    arr = np.asarray(c_spec, dtype=float)
    if arr.shape != (d.m, d.k, d.s):
        raise InputError(f"targets must have shape {(d.m, d.k, d.s)}")
    return arr


def _positions(data: Dataset, target_areas):
    if target_areas is None:
        return list(range(data.m))
    return [data.area_position(a) for a in target_areas]


def eblup(
    data: Dataset,
    target_areas: Sequence | None = None,
    c_spec=None,
    *,
    fit_result: FitResult | None = None,
    dof: str = DOF_DEFAULT,
) -> list[AreaPrediction]:
    """EBLUP of ``theta_a = c_a beta + v_a`` for the requested areas."""
    fr = fit(data, dof) if fit_result is None else fit_result
    targets = resolve_targets(data, c_spec)
    try:
        theta, _, _ = predict_batch(
            data.design, data.ybar, fr.beta, fr.psi.array, fr.sigma.array, targets
        )
    except SingularCovariance:
        lam = area_lambdas(fr.psi.array, fr.sigma.array, data.design.sizes)
        for i, l in enumerate(lam):
            try:
                inv_sym(l, "Lambda_a")
            except SingularCovariance as exc:
                raise SingularCovariance(f"Lambda_a for area {data.area_ids[i]}", exc.rcond) from None
        raise
    trunc = bool(fr.components.truncated) if fr.components is not None else False
    return [
        AreaPrediction(data.area_ids[i], theta[i], targets[i], truncated=trunc)
        for i in _positions(data, target_areas)
    ]
