"""Domain types and the block-structured covariance algebra.

Units are stored area-contiguous: ``Design.regressors`` has shape ``(N, k, s)``
where row ``u`` holds the k x s block ``R_u`` acting on the coefficient vector,
so ``E[y_u] = R_u @ beta``.  Most kernels in the package accept arrays with
arbitrary leading batch dimensions; the Monte Carlo harness relies on that.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

RCOND_MIN = 1e-12
SYM_RTOL = 1e-8


class MNERError(Exception):
    """Base class for all package errors."""


class InputError(MNERError, ValueError):
    """Malformed input data or configuration."""


class NumericalError(MNERError, ArithmeticError):
    """A numerical precondition failed on otherwise valid input."""


class SingularCovariance(NumericalError):
    def __init__(self, name: str, rcond: float | None = None):
        self.name = name
        self.rcond = rcond
        msg = f"{name} is singular" if rcond is None or rcond >= 0 else f"{name} is not positive definite"
        if rcond is not None:
            msg += f" (reciprocal condition {rcond:.3g})"
        super().__init__(msg)


class RankDeficientDesign(NumericalError):
    pass


class InsufficientDegreesOfFreedom(NumericalError):
    pass


class NonpositiveMSE(NumericalError):
    pass


# ---------------------------------------------------------------------------
# symmetric matrices


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def rcond_sym(a: np.ndarray) -> np.ndarray:
    """Reciprocal condition number of symmetric matrices (batched)."""
    w = np.abs(np.linalg.eigvalsh(symmetrize(a)))
    top = w.max(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(top > 0, w.min(axis=-1) / np.where(top > 0, top, 1.0), 0.0)
    return out


def inv_sym(a: np.ndarray, name: str) -> np.ndarray:
    """Invert a (stack of) symmetric matrices, refusing near-singular ones."""
    rc = rcond_sym(a)
    if np.any(~(rc >= RCOND_MIN)):
        raise SingularCovariance(name, float(np.min(rc)))
    return symmetrize(np.linalg.inv(a))


class SymMat:
    """Immutable symmetric k x k matrix.

    Input is symmetrized as ``(A + A.T) / 2`` after checking that the
    asymmetry does not exceed ``1e-8`` relative to the largest entry.
    """

    __slots__ = ("_a",)

    def __init__(self, entries, *, rtol: float = SYM_RTOL):
        a = np.array(entries, dtype=float)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise InputError(f"SymMat needs a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InputError("SymMat entries must be finite")
        scale = max(float(np.max(np.abs(a))), 1.0)
        if np.max(np.abs(a - a.T)) > rtol * scale:
            raise InputError("matrix is not symmetric")
        a = 0.5 * (a + a.T)
        a.setflags(write=False)
        self._a = a

    @classmethod
    def of(cls, obj) -> "SymMat":
        return obj if isinstance(obj, SymMat) else cls(obj)

    @property
    def dim(self) -> int:
        return self._a.shape[0]

    @property
    def array(self) -> np.ndarray:
        return self._a

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._a.copy()
        return self._a.astype(dtype)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self._a)

    def is_psd(self, tol: float = 1e-12) -> bool:
        w = self.eigenvalues()
        return bool(w.min() >= -tol * max(np.abs(w).max(), 1e-300))

    def __add__(self, other):
        return SymMat(self._a + as_array(other))

    __radd__ = __add__

    def __sub__(self, other):
        return SymMat(self._a - as_array(other))

    def __rsub__(self, other):
        return SymMat(as_array(other) - self._a)

    def __mul__(self, c):
        return SymMat(float(c) * self._a)

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, SymMat):
            return NotImplemented
        return self._a.shape == other._a.shape and bool(np.all(self._a == other._a))

    __hash__ = None

    def __repr__(self):
        return f"SymMat({self._a.tolist()!r})"


def as_array(m) -> np.ndarray:
    if isinstance(m, SymMat):
        return m.array
    return np.asarray(m, dtype=float)


# ---------------------------------------------------------------------------
# data containers


@dataclass(frozen=True, eq=False)
class UnitBlock:
    """Units observed in one area: ``responses`` (n, k), ``regressors`` (n, k, s)."""

    responses: np.ndarray
    regressors: np.ndarray

    def __post_init__(self):
        y = np.array(self.responses, dtype=float)
        r = np.array(self.regressors, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if r.ndim == 2:
            # k = 1 convenience: (n, s) -> (n, 1, s)
            r = r[:, None, :]
        if y.ndim != 2 or y.shape[0] < 1:
            raise InputError("responses must be an (n, k) array with n >= 1")
        if r.ndim != 3 or r.shape[0] != y.shape[0] or r.shape[1] != y.shape[1]:
            raise InputError(
                f"regressors must have shape (n, k, s) = ({y.shape[0]}, {y.shape[1]}, s), got {r.shape}"
            )
        y.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "regressors", r)

    @property
    def n_units(self) -> int:
        return self.responses.shape[0]

    @property
    def k(self) -> int:
        return self.responses.shape[1]

    @property
    def s(self) -> int:
        return self.regressors.shape[2]


def area_means(block: UnitBlock) -> tuple[np.ndarray, np.ndarray]:
    """Sample means of the responses (k,) and of the regressor blocks (k, s)."""
    return block.responses.mean(axis=0), block.regressors.mean(axis=0)


@dataclass(frozen=True, eq=False)
class Design:
    """Regressors and area grouping, independent of the responses.

    Everything that depends only on the design (OLS inverse, within-area
    centering, rank of the centered design, the moment operator for the
    within-area covariance) is cached here so that repeated fits on new
    responses, as in the Monte Carlo harness, cost only the response-dependent
    work.
    """

    regressors: np.ndarray  # (N, k, s)
    sizes: np.ndarray  # (m,)
    area_ids: tuple = field(default=())

    def __post_init__(self):
        r = np.array(self.regressors, dtype=float)
        n = np.array(self.sizes, dtype=np.int64)
        if r.ndim != 3:
            raise InputError("regressors must be (N, k, s)")
        if n.ndim != 1 or np.any(n < 1):
            raise InputError("every area needs at least one unit")
        if n.sum() != r.shape[0]:
            raise InputError("area sizes do not add up to the number of units")
        if n.shape[0] < 2:
            raise InputError("at least two areas are required")
        ids = tuple(str(a) for a in self.area_ids) if len(self.area_ids) else tuple(
            str(i + 1) for i in range(n.shape[0])
        )
        if len(ids) != n.shape[0]:
            raise InputError("area_ids length does not match the number of areas")
        if len(set(ids)) != len(ids):
            raise InputError("area ids must be unique")
        r.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "regressors", r)
        object.__setattr__(self, "sizes", n)
        object.__setattr__(self, "area_ids", ids)

    # shapes -----------------------------------------------------------------
    @property
    def N(self) -> int:
        return self.regressors.shape[0]

    @property
    def m(self) -> int:
        return self.sizes.shape[0]

    @property
    def k(self) -> int:
        return self.regressors.shape[1]

    @property
    def s(self) -> int:
        return self.regressors.shape[2]

    @cached_property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]])

    @cached_property
    def area_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.m), self.sizes)

    def area_sums(self, a: np.ndarray, axis: int = -2) -> np.ndarray:
        """Sum unit rows within areas along ``axis`` (the unit axis)."""
        return np.add.reduceat(a, self.starts, axis=axis)

    @cached_property
    def rbar(self) -> np.ndarray:
        """Area means of the regressor blocks, (m, k, s)."""
        return self.area_sums(self.regressors, axis=0) / self.sizes[:, None, None]

    @cached_property
    def stacked(self) -> np.ndarray:
        """The (N k) x s stacked regressor matrix."""
        return self.regressors.reshape(self.N * self.k, self.s)

    @cached_property
    def regressor_cross(self) -> np.ndarray:
        """``sum_u R_u[k, s] R_u[l, t]`` arranged (k, s, l, t)."""
        return np.einsum("nks,nlt->kslt", self.regressors, self.regressors)

    @cached_property
    def xtx_inv(self) -> np.ndarray:
        x = self.stacked
        xtx = x.T @ x
        w = np.linalg.eigvalsh(xtx)
        if w[0] <= RCOND_MIN * max(w[-1], 1e-300):
            raise RankDeficientDesign(
                f"X'X is singular: the stacked design has rank < s = {self.s}"
            )
        return symmetrize(np.linalg.inv(xtx))

    @cached_property
    def centered(self) -> np.ndarray:
        """Within-area centered regressors, (N, k, s)."""
        return self.regressors - self.rbar[self.area_index]

    @cached_property
    def _centered_svd(self):
        xc = self.centered.reshape(self.N * self.k, self.s)
        u, sv, vt = np.linalg.svd(xc, full_matrices=False)
        # absolute cutoff tied to the uncentered scale: columns that centering
        # annihilates (intercepts, area-level covariates) leave round-off only
        scale = np.linalg.norm(self.stacked, 2)
        tol = max(self.N * self.k, self.s) * np.finfo(float).eps * max(scale, 1.0) * 8
        keep = sv > tol
        return u[:, keep], sv[keep], vt[keep]

    @cached_property
    def s0(self) -> int:
        """Rank of the centered design."""
        return int(self._centered_svd[1].shape[0])

    @cached_property
    def centered_pinv(self) -> np.ndarray:
        """Minimum-norm least-squares solver on centered data, s x (N k)."""
        u, sv, vt = self._centered_svd
        return (vt.T / sv) @ u.T

    @cached_property
    def centered_hat_blocks(self) -> np.ndarray:
        """Diagonal k x k blocks of the centered-design hat matrix, (N, k, k)."""
        u = self._centered_svd[0].reshape(self.N, self.k, -1)
        return np.einsum("nkr,nlr->nkl", u, u)

    @cached_property
    def sigma_moment_matrix(self) -> np.ndarray:
        """Matrix of the linear map Sigma -> E[S] on half-vectorized symmetric matrices.

        ``S`` is the within-area residual sum of outer products.  For k = 1 or
        when the centered design vanishes this is the scalar ``N - m - s0``.
        """
        k = self.k
        iu = np.triu_indices(k)
        u = self._centered_svd[0].reshape(self.N, k, -1)
        a = self.centered_hat_blocks.sum(axis=0)
        cols = []
        for p, q in zip(*iu):
            e = np.zeros((k, k))
            e[p, q] = e[q, p] = 1.0
            # sum over unit blocks of H (I x E) H, with H = U U'
            g = np.einsum("nkr,kl,nls->rs", u, e, u)
            hh = np.einsum("nkr,rs,nls->kl", u, g, u)
            val = (self.N - self.m) * e - a @ e - e @ a + hh
            cols.append(val[iu])
        return np.array(cols).T

    def with_responses(self, responses) -> "Dataset":
        return Dataset(self, responses)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Design plus the (N, k) matrix of responses."""

    design: Design
    responses: np.ndarray

    def __post_init__(self):
        y = np.array(self.responses, dtype=float)
        if y.ndim == 1 and self.design.k == 1:
            y = y[:, None]
        if y.shape != (self.design.N, self.design.k):
            raise InputError(
                f"responses must have shape {(self.design.N, self.design.k)}, got {y.shape}"
            )
        if not np.all(np.isfinite(y)):
            raise InputError("responses must be finite")
        y.setflags(write=False)
        object.__setattr__(self, "responses", y)

    @classmethod
    def from_blocks(cls, blocks: Sequence[UnitBlock], area_ids: Sequence | None = None) -> "Dataset":
        blocks = list(blocks)
        if len(blocks) < 2:
            raise InputError("at least two areas are required")
        k, s = blocks[0].k, blocks[0].s
        for b in blocks:
            if b.k != k or b.s != s:
                raise InputError("k and s must be constant across areas")
        design = Design(
            np.concatenate([b.regressors for b in blocks]),
            np.array([b.n_units for b in blocks]),
            tuple(area_ids) if area_ids is not None else (),
        )
        return cls(design, np.concatenate([b.responses for b in blocks]))

    # convenience passthroughs
    @property
    def m(self) -> int:
        return self.design.m

    @property
    def N(self) -> int:
        return self.design.N

    @property
    def k(self) -> int:
        return self.design.k

    @property
    def s(self) -> int:
        return self.design.s

    @property
    def area_ids(self) -> tuple:
        return self.design.area_ids

    @property
    def areas(self) -> list[UnitBlock]:
        d = self.design
        return [
            UnitBlock(self.responses[a:a + n], d.regressors[a:a + n])
            for a, n in zip(d.starts, d.sizes)
        ]

    @cached_property
    def ybar(self) -> np.ndarray:
        return self.design.area_sums(self.responses) / self.design.sizes[:, None]

    def area_position(self, area) -> int:
        ids = self.design.area_ids
        key = str(area)
        if key in ids:
            return ids.index(key)
        raise InputError(f"unknown area id {area!r}")


# ---------------------------------------------------------------------------
# covariance algebra


def marginal_block_inverse(psi, sigma, n_i):
    """Factored inverse of ``D_i = J_n (x) Psi + I_n (x) Sigma``.

    Returns ``(Sigma^-1, C_i)`` with ``C_i = Sigma^-1 Psi (Sigma + n_i Psi)^-1``,
    so that ``D_i^-1 = I (x) Sigma^-1 - J (x) C_i``.  ``n_i`` may be an array, in
    which case ``C_i`` is stacked along a new axis before the last two.

    Psi is whitened by Sigma and diagonalized once, ``Sigma^-1/2 Psi Sigma^-1/2
    = Q diag(t) Q'``, so ``C_i = G diag(t / (1 + n_i t)) G'`` with
    ``G = Sigma^-1/2 Q`` for every ``n_i``; this stays close to the accuracy of a
    dense inverse when Sigma is badly conditioned.
    """
    psi = symmetrize(as_array(psi))
    sigma = symmetrize(as_array(sigma))
    n_i = np.asarray(n_i, dtype=float)
    w, h = np.linalg.eigh(sigma)
    top = np.abs(w).max(axis=-1)
    rc = np.where(top > 0, w.min(axis=-1) / np.where(top > 0, top, 1.0), 0.0)
    if np.any(~(rc >= RCOND_MIN)):
        raise SingularCovariance("Sigma", float(np.min(rc)))
    r = h / np.sqrt(w)[..., None, :]  # Sigma^-1 = r r'
    sinv = symmetrize(r @ np.swapaxes(r, -1, -2))
    t, q = np.linalg.eigh(symmetrize(np.swapaxes(r, -1, -2) @ psi @ r))
    g = r @ q
    if n_i.ndim:
        inner = sigma[..., None, :, :] + n_i[:, None, None] * psi[..., None, :, :]
        rc = rcond_sym(inner)
        if np.any(~(rc >= RCOND_MIN)):
            raise SingularCovariance("Sigma + n_i Psi", float(np.min(rc)))
        weight = t[..., None, :] / (1.0 + n_i[:, None] * t[..., None, :])
        gg = g[..., None, :, :]
        c = (gg * weight[..., None, :]) @ np.swapaxes(gg, -1, -2)
    else:
        rc = rcond_sym(sigma + n_i * psi)
        if np.any(~(rc >= RCOND_MIN)):
            raise SingularCovariance("Sigma + n_i Psi", float(np.min(rc)))
        c = (g * (t / (1.0 + n_i * t))[..., None, :]) @ np.swapaxes(g, -1, -2)
    return sinv, c


def dense_marginal_covariance(psi, sigma, n_i: int) -> np.ndarray:
    """``J_n (x) Psi + I_n (x) Sigma`` materialized; used by oracles only."""
    psi, sigma = as_array(psi), as_array(sigma)
    return np.kron(np.ones((n_i, n_i)), psi) + np.kron(np.eye(n_i), sigma)


# ---------------------------------------------------------------------------
# result containers


@dataclass(frozen=True, eq=False)
class CovComponents:
    sigma_hat: SymMat
    psi0: SymMat
    psi1: SymMat
    psi_hat: SymMat
    s0: int
    truncated: bool
    eigenvalues: np.ndarray


@dataclass(frozen=True, eq=False)
class AreaCache:
    lam: np.ndarray
    lam_inv: np.ndarray
    shrinkage: np.ndarray
    ybar: np.ndarray
    rbar: np.ndarray


@dataclass(frozen=True, eq=False)
class FitResult:
    beta: np.ndarray
    beta_cov: np.ndarray
    psi: SymMat
    sigma: SymMat
    components: CovComponents | None
    per_area_cache: tuple  # of AreaCache, design order


@dataclass(frozen=True, eq=False)
class AreaPrediction:
    area_id: str
    theta_hat: np.ndarray
    target_spec: np.ndarray
    g1: SymMat | None = None
    g2: SymMat | None = None
    g3: SymMat | None = None
    msem: SymMat | None = None
    naive: SymMat | None = None
    msem_nonpsd: bool = False
    truncated: bool = False
