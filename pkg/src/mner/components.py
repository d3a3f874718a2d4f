"""Moment estimators of the within-area and between-area covariances.

The array-level functions (``*_batch``) accept responses with leading batch
dimensions ``(..., N, k)`` and are what the simulation harness calls; the
public functions wrap them for a single :class:`~mner.core.Dataset`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CovComponents,
    Dataset,
    Design,
    InsufficientDegreesOfFreedom,
    InputError,
    SymMat,
    as_array,
    symmetrize,
)

DOF_METHODS = ("rank", "exact")
DOF_DEFAULT = "rank"


@dataclass(frozen=True, eq=False)
class BiasInputs:
    """Parameters at which the bias of the consistent Psi estimator is evaluated."""

    psi: SymMat
    sigma: SymMat
    design: Design

    @property
    def xtx_inv(self) -> np.ndarray:
        return self.design.xtx_inv


# ---------------------------------------------------------------------------
# batched kernels


def _check_dof(design: Design):
    if design.N - design.m - design.s0 < 1:
        raise InsufficientDegreesOfFreedom(
            f"N - m - s0 = {design.N} - {design.m} - {design.s0} < 1"
        )


def within_residual_sum(design: Design, y: np.ndarray) -> np.ndarray:
    """Sum over units of outer products of within-area regression residuals."""
    ybar = design.area_sums(y) / design.sizes[:, None]
    yc = y - ybar[..., design.area_index, :]
    if design.s0:
        flat = yc.reshape(yc.shape[:-2] + (-1,))
        bt = flat @ design.centered_pinv.T
        yc = yc - np.einsum("nks,...s->...nk", design.centered, bt)
    return np.einsum("...ni,...nj->...ij", yc, yc)


def sigma_from_residual_sum(design: Design, rss: np.ndarray, dof: str = DOF_DEFAULT) -> np.ndarray:
    if dof == "rank":
        return rss / (design.N - design.m - design.s0)
    if dof != "exact":
        raise InputError(f"dof must be one of {DOF_METHODS}")
    k = design.k
    iu = np.triu_indices(k)
    v = rss[..., iu[0], iu[1]]
    sol = np.linalg.solve(design.sigma_moment_matrix, v[..., None])[..., 0]
    out = np.zeros(rss.shape)
    out[..., iu[0], iu[1]] = sol
    out[..., iu[1], iu[0]] = sol
    return out


def sigma_batch(design: Design, y: np.ndarray, dof: str = DOF_DEFAULT) -> np.ndarray:
    _check_dof(design)
    return symmetrize(sigma_from_residual_sum(design, within_residual_sum(design, y), dof))


def ols_batch(design: Design, y: np.ndarray) -> np.ndarray:
    xty = np.einsum("nks,...nk->...s", design.regressors, y)
    return xty @ design.xtx_inv


def psi0_batch(design: Design, y: np.ndarray, sigma_hat: np.ndarray) -> np.ndarray:
    beta = ols_batch(design, y)
    e = y - np.einsum("nks,...s->...nk", design.regressors, beta)
    return symmetrize(np.einsum("...ni,...nj->...ij", e, e) / design.N - sigma_hat)


def bias_psi0_batch(design: Design, psi: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Exact ``E[Psi0_hat] - Psi`` at (Psi, Sigma) for the given design.

    With ``u = y - X beta`` and ``G = (X'X)^-1``, the OLS residual of unit u is
    ``u_u - R_u G X'u``, whose second moment is
    ``Psi + Sigma - K_u G R_u' - R_u G K_u' + R_u Cov(beta_ols) R_u'`` where
    ``K_u = E[u_u (X'u)'] = n_i Psi Rbar_i + Sigma R_u`` and
    ``Cov(beta_ols) = G X'DX G``.
    """
    d = design
    g = d.xtx_inv
    r = d.regressors
    n2 = d.sizes.astype(float) ** 2
    xdx = np.einsum("nks,...kl,nlt->...st", r, sigma, r) + np.einsum(
        "i,iks,...kl,ilt->...st", n2, d.rbar, psi, d.rbar
    )
    cov = g @ xdx @ g
    quad = np.einsum("nks,...st,nlt->...kl", r, cov, r)
    w_area = np.einsum("i,iks,st,ilt->kl", n2, d.rbar, g, d.rbar)
    w_unit = np.einsum("nks,st,nlt->kl", r, g, r)
    cross = psi @ w_area + sigma @ w_unit
    return symmetrize(quad - cross - np.swapaxes(cross, -1, -2)) / d.N


def truncate_psd(psi1: np.ndarray):
    """Clip negative eigenvalues; returns (psi_hat, eigenvalues, truncated)."""
    w, h = np.linalg.eigh(symmetrize(psi1))
    tol = 1e-12 * np.max(np.abs(w), axis=-1, keepdims=True)
    truncated = np.any(w < -tol, axis=-1)
    wc = np.maximum(w, 0.0)
    psi = symmetrize((h * wc[..., None, :]) @ np.swapaxes(h, -1, -2))
    return psi, w, truncated


def components_batch(design: Design, y: np.ndarray, dof: str = DOF_DEFAULT):
    """Sigma_hat, Psi0, Psi1, Psi_hat, eigenvalues, truncated for stacked responses."""
    sig = sigma_batch(design, y, dof)
    p0 = psi0_batch(design, y, sig)
    p1 = p0 - bias_psi0_batch(design, p0, sig)
    p, w, trunc = truncate_psd(p1)
    return sig, p0, p1, p, w, trunc


# ---------------------------------------------------------------------------
# public operations


def estimate_sigma(data: Dataset, dof: str = DOF_DEFAULT) -> tuple[SymMat, int]:
    """Within-area covariance estimate and the rank ``s0`` of the centered design.

    Residuals come from a minimum-norm least-squares fit of within-area
    deviations ``y_ij - ybar_i`` on ``R_ij - Rbar_i``; their outer products are
    summed over units.  The default ``dof="rank"`` divides by ``N - m - s0``
    and is always PSD.  ``dof="exact"`` divides by the exact expectation of the
    residual sum, which makes the estimator unbiased for every design but can
    leave it indefinite when the within-area degrees of freedom are few.  The
    two coincide when ``k = 1`` or when centering annihilates every regressor
    column.
    """
    d = data.design
    sig = sigma_batch(d, data.responses, dof)
    return SymMat(sig), d.s0


def estimate_psi0(data: Dataset, sigma_hat) -> SymMat:
    """Consistent (possibly indefinite) estimate of the between-area covariance."""
    return SymMat(psi0_batch(data.design, data.responses, as_array(sigma_hat)))


def bias_psi0(inputs: BiasInputs) -> SymMat:
    return SymMat(bias_psi0_batch(inputs.design, as_array(inputs.psi), as_array(inputs.sigma)))


def estimate_psi(data: Dataset, sigma_hat, s0: int | None = None) -> CovComponents:
    d = data.design
    sig = as_array(sigma_hat)
    p0 = psi0_batch(d, data.responses, sig)
    p1 = symmetrize(p0 - bias_psi0_batch(d, p0, sig))
    p, w, trunc = truncate_psd(p1)
    return CovComponents(
        sigma_hat=SymMat(sig),
        psi0=SymMat(p0),
        psi1=SymMat(p1),
        psi_hat=SymMat(p),
        s0=d.s0 if s0 is None else s0,
        truncated=bool(trunc),
        eigenvalues=w,
    )


def estimate_components(data: Dataset, dof: str = DOF_DEFAULT) -> CovComponents:
    sig, s0 = estimate_sigma(data, dof)
    return estimate_psi(data, sig, s0)
