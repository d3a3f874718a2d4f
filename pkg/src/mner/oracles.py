"""Brute-force reference implementations used to check the structured code.

Nothing here shares matrix code with the estimation modules: the dense GLS
oracle materializes the full covariance, and the univariate oracle is a scalar
transcription of the k = 1 pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, InputError, MNERError, as_array

DENSE_LIMIT = 600


class OracleTooLarge(MNERError):
    pass


def dense_gls_oracle(data: Dataset, psi, sigma):
    """GLS coefficients and their covariance from the materialized ``D``.

    Returns ``(beta, beta_cov)``.  Refuses problems with ``N k > 600``.
    """
    d = data.design
    nk = d.N * d.k
    if nk > DENSE_LIMIT:
        raise OracleTooLarge(f"N k = {nk} exceeds {DENSE_LIMIT}")
    p, s = as_array(psi), as_array(sigma)
    x = d.regressors.reshape(nk, d.s)
    y = data.responses.reshape(nk)
    dmat = np.zeros((nk, nk))
    start = 0
    for n in d.sizes:
        block = np.kron(np.ones((n, n)), p) + np.kron(np.eye(n), s)
        sl = slice(start, start + n * d.k)
        dmat[sl, sl] = block
        start += n * d.k
    dix = np.linalg.solve(dmat, x)
    diy = np.linalg.solve(dmat, y)
    cov = np.linalg.inv(x.T @ dix)
    return cov @ (x.T @ diy), cov


@dataclass(frozen=True)
class UnivariateResult:
    sigma_hat: float
    psi0: float
    bias: float
    psi1: float
    psi_hat: float
    beta: np.ndarray
    beta_cov: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    msem: np.ndarray
    naive: np.ndarray
    v_printed: np.ndarray
    v_wishart: np.ndarray


def _scalar_inputs(data):
    if isinstance(data, Dataset):
        if data.k != 1:
            raise InputError("univariate oracle needs k = 1")
        return data.responses[:, 0], data.design.regressors[:, 0, :], data.design.sizes
    y, x, sizes = data
    return np.asarray(y, float), np.asarray(x, float), np.asarray(sizes)


def univariate_eblup_oracle(data, psi=None, sigma=None, targets=None) -> UnivariateResult:
    """Scalar nested-error pipeline: moments, GLS, EBLUP, MSE terms and V.

    ``data`` is a k = 1 :class:`Dataset` or a tuple ``(y, x, sizes)`` with
    ``y`` of length N and ``x`` of shape (N, s).  When ``psi`` and ``sigma``
    are given they are used in place of the estimates.  ``targets`` (m, s)
    default to the area means of ``x``.
    """
    y, x, sizes = _scalar_inputs(data)
    sizes = np.asarray(sizes, dtype=int)
    m, N = len(sizes), int(sizes.sum())
    area = np.repeat(np.arange(m), sizes)
    ybar = np.bincount(area, y) / sizes
    xbar = np.stack([np.bincount(area, x[:, j]) / sizes for j in range(x.shape[1])], axis=1)

    # within-area covariance
    yc = y - ybar[area]
    xc = x - xbar[area]
    tol = 1e-8 * max(1.0, np.linalg.norm(x, 2))
    sv = np.linalg.svd(xc, compute_uv=False)
    s0 = int(np.sum(sv > tol))
    if s0:
        coef = np.linalg.lstsq(xc, yc, rcond=tol / max(sv[0], tol))[0]
        resid = yc - xc @ coef
    else:
        resid = yc
    sigma_hat = float(resid @ resid) / (N - m - s0)

    # between-area covariance and its bias via the dense residual projector
    g = np.linalg.inv(x.T @ x)
    e = y - x @ (g @ (x.T @ y))
    psi0 = float(e @ e) / N - sigma_hat
    resid_proj = np.eye(N) - x @ g @ x.T
    same = area[:, None] == area[None, :]

    def bias(ps, sg):
        dmat = ps * same + sg * np.eye(N)
        return float(np.trace(resid_proj @ dmat)) / N - ps - sg

    b = bias(psi0, sigma_hat)
    psi1 = psi0 - b
    psi_hat = max(psi1, 0.0)

    ps = psi_hat if psi is None else float(psi)
    sg = sigma_hat if sigma is None else float(sigma)

    # GLS with D_i^-1 = (I - gamma_i / n_i J) / sigma
    gamma = sizes * ps / (sg + sizes * ps)
    xtdx = (x.T @ x - (gamma * sizes)[None, :] * xbar.T @ xbar) / sg
    xtdy = (x.T @ y - (gamma * sizes) @ (xbar * ybar[:, None])) / sg
    cov = np.linalg.inv(xtdx)
    beta = cov @ xtdy

    c = xbar if targets is None else np.asarray(targets, float)
    theta = c @ beta + gamma * (ybar - xbar @ beta)

    lam = ps + sg / sizes
    g1 = gamma * sg / sizes
    mm = c - gamma[:, None] * xbar
    g2 = np.einsum("as,st,at->a", mm, cov, mm)
    g3 = 2.0 * sg**2 * np.sum(sizes**2 * lam**2) / (sizes**2 * N**2 * lam**3) + 2.0 * sg**2 * (
        N * ps + m * sg
    ) ** 2 / (sizes**2 * N**2 * (N - m) * lam**3)
    msem = g1 + g2 + 2.0 * g3
    naive = g1 + g2 + g3

    sum_l2 = np.sum(sizes**2 * lam**2)
    na = sizes
    v_printed = (
        2.0 * sg**2 * sum_l2 / (na**4 * N**2 * lam**2)
        + 2.0 * m**2 * (sg**3 / lam**2) ** 2 / (na**4 * N**2 * (N - m))
        + 2.0 * (ps**2 * sg / lam**2) ** 2 / (na**2 * (N - m))
        - 2.0 * m * ((ps**2 * sg / lam**2) * (sg**2 / lam) + (sg**2 * ps / lam**2) ** 2)
        / (na**3 * N * (N - m))
    )
    p, q = sg / lam, ps / lam
    v_wishart = (
        2.0 * p**4 * sum_l2 / (na**4 * N**2)
        + 2.0 * m**2 * (p * p * sg) ** 2 / (na**4 * N**2 * (N - m))
        + 2.0 * (q * q * sg) ** 2 / (na**2 * (N - m))
        - 4.0 * m * (p * sg * q) ** 2 / (na**3 * N * (N - m))
    )
    return UnivariateResult(
        sigma_hat, psi0, b, psi1, psi_hat, beta, cov, theta, gamma,
        g1, g2, g3, msem, naive, v_printed, v_wishart,
    )
