"""Monte Carlo replication engine for the multivariate nested-error model.

Replications are processed in fixed-size chunks through the batched kernels of
the estimation modules.  Replication ``r`` of phase ``p`` draws from
``SeedSequence([master_seed, p, r])`` and chunk results are merged in index
order, so a study is bitwise reproducible for any worker count.
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np

from .blup import gls_batch, predict_batch
from .components import DOF_DEFAULT, DOF_METHODS, components_batch, psi0_batch, sigma_batch
from .core import Design, InputError, NumericalError, SymMat
from .normal import z_quantile
from .uncertainty import V_DEFAULT, V_FORMS, g1_batch, g2_batch, g3_batch, v_batch, z_star

log = logging.getLogger(__name__)

EFFECT_DISTS = ("normal", "t", "chisq")
PSI_VECTORS = {2: (math.sqrt(1.5), math.sqrt(0.5)), 3: (math.sqrt(1.5), 1.0, math.sqrt(0.5))}
BETAS = {2: (0.8, -0.5, -0.3, 0.6), 3: (0.8, -0.5, -0.3, 0.6, 0.4, -0.2)}
PRESET_SCALES = {"paper": (50_000, 5_000), "acceptance": (20_000, 5_000), "smoke": (2_000, 1_000)}
PHASE_DESIGN, PHASE_A, PHASE_B = 0, 1, 2
CHUNK = 250
MAX_FAIL_FRACTION = 0.01


class InvalidConfig(InputError):
    pass


class StudyAborted(NumericalError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """One simulation scenario.

    ``group_sizes`` gives the per-group sample size; areas are split into
    ``len(group_sizes)`` groups as evenly as possible, earlier groups taking the
    remainder.  ``beta`` and ``psi_vector`` default to the published values
    for k = 2 and 3.
    """

    m: int = 40
    k: int = 2
    rho: float = 0.5
    effect_dist: str = "normal"
    replications_a: int = 20_000
    replications_b: int = 5_000
    master_seed: int = 20240601
    alpha: float = 0.05
    group_sizes: tuple = (1, 4, 7, 10)
    beta: tuple | None = None
    psi_vector: tuple | None = None
    sigma: tuple | None = None  # row-major k x k, default identity
    dof: str = DOF_DEFAULT
    v_form: str = V_DEFAULT

    def __post_init__(self):
        if self.k < 1 or self.m < 2:
            raise InvalidConfig("need k >= 1 and m >= 2")
        if not -1.0 < self.rho < 1.0:
            raise InvalidConfig("rho must lie in (-1, 1)")
        if self.effect_dist not in EFFECT_DISTS:
            raise InvalidConfig(f"effect_dist must be one of {EFFECT_DISTS}")
        if self.dof not in DOF_METHODS:
            raise InvalidConfig(f"dof must be one of {DOF_METHODS}")
        if self.v_form not in V_FORMS:
            raise InvalidConfig(f"v_form must be one of {V_FORMS}")
        if self.beta is None and self.k not in BETAS:
            raise InvalidConfig("beta must be given for k outside {2, 3}")
        if self.psi_vector is None and self.k not in PSI_VECTORS:
            raise InvalidConfig("psi_vector must be given for k outside {2, 3}")
        if self.beta is not None and len(self.beta) != 2 * self.k:
            raise InvalidConfig("beta must have 2k entries")
        if len(self.group_sizes) > self.m or min(self.group_sizes) < 1:
            raise InvalidConfig("bad group sizes")

    @property
    def beta_vector(self) -> np.ndarray:
        return np.array(BETAS[self.k] if self.beta is None else self.beta, dtype=float)

    @property
    def psi(self) -> np.ndarray:
        return psi_from_rho(self.rho, self.k, self.psi_vector).array

    @property
    def sigma_matrix(self) -> np.ndarray:
        if self.sigma is None:
            return np.eye(self.k)
        return np.array(self.sigma, dtype=float).reshape(self.k, self.k)

    @property
    def groups(self) -> np.ndarray:
        """Group index (0-based) of every area."""
        g = len(self.group_sizes)
        counts = np.full(g, self.m // g)
        counts[: self.m % g] += 1
        return np.repeat(np.arange(g), counts)

    @property
    def sizes(self) -> np.ndarray:
        return np.asarray(self.group_sizes)[self.groups]


@dataclass
class SimMetrics:
    """Per-area accumulations of a study plus per-group summaries.

    Matrices are indexed ``[area, i, j]``; interval metrics ``[ell, area]`` with
    ``ells`` listing the contrasts (see :func:`contrasts`).
    """

    config: dict
    groups: np.ndarray
    ells: np.ndarray
    msem_true: np.ndarray
    msem_direct: np.ndarray
    msem_univariate: np.ndarray
    eb_blup_gap: np.ndarray
    msem_mean: np.ndarray
    naive_mean: np.ndarray
    cp: np.ndarray
    cp_naive: np.ndarray
    al: np.ndarray
    al_naive: np.ndarray
    msem_ell_sq: np.ndarray  # E[(l' msem l)^2] per ell, area
    v_mean: dict
    sigma_mean: np.ndarray
    psi_mean: np.ndarray
    psi0_mean: np.ndarray
    truncation_rate: float
    replications_a: int
    replications_b: int
    failures_a: int
    failures_b: int

    @property
    def rb(self) -> np.ndarray:
        return relative_bias(self.msem_mean, self.msem_true)

    @property
    def rb_naive(self) -> np.ndarray:
        return relative_bias(self.naive_mean, self.msem_true)

    @property
    def prial_direct(self) -> np.ndarray:
        return prial(self.msem_true, self.msem_direct)

    @property
    def prial_univariate(self) -> np.ndarray:
        return prial(self.msem_true, self.msem_univariate)

    @property
    def msem_ell_var(self) -> np.ndarray:
        """Monte Carlo E[(l' msem l - l' MSEM l)^2] per ell and area."""
        truth = np.einsum("ek,akl,el->ea", self.ells, self.msem_true, self.ells)
        mean = np.einsum("ek,akl,el->ea", self.ells, self.msem_mean, self.ells)
        return self.msem_ell_sq - 2.0 * truth * mean + truth**2

    def group_mean(self, a: np.ndarray, axis: int = 0) -> np.ndarray:
        a = np.moveaxis(np.asarray(a), axis, 0)
        g = int(self.groups.max()) + 1
        out = np.stack([a[self.groups == i].mean(axis=0) for i in range(g)])
        return np.moveaxis(out, 0, axis)

    def rows(self, scenario: str = "") -> list[dict]:
        """One flat record per group, as written to CSV."""
        out = []
        rb, rbn = self.group_mean(self.rb), self.group_mean(self.rb_naive)
        pd, pu = self.group_mean(self.prial_direct), self.group_mean(self.prial_univariate)
        cp, cpn = self.group_mean(self.cp, 1), self.group_mean(self.cp_naive, 1)
        al, aln = self.group_mean(self.al, 1), self.group_mean(self.al_naive, 1)
        k = rb.shape[-1]
        for g in range(rb.shape[0]):
            row = {"scenario": scenario, "group": g + 1,
                   "prial_direct": pd[g], "prial_univariate": pu[g]}
            for i in range(k):
                for j in range(k):
                    row[f"rb_{i + 1}{j + 1}"] = 100.0 * rb[g, i, j]
            for i in range(k):
                for j in range(k):
                    row[f"rb_naive_{i + 1}{j + 1}"] = 100.0 * rbn[g, i, j]
            for e, name in enumerate(ell_names(k)):
                row[f"cp_{name}"] = cp[e, g]
                row[f"cp_naive_{name}"] = cpn[e, g]
                row[f"al_{name}"] = al[e, g]
                row[f"al_naive_{name}"] = aln[e, g]
            out.append(row)
        return out

    def summary(self) -> dict:
        """JSON-ready summary: config, counts and per-group tables."""
        return {
            "config": self.config,
            "replications_a": self.replications_a,
            "replications_b": self.replications_b,
            "failures_a": self.failures_a,
            "failures_b": self.failures_b,
            "truncation_rate": self.truncation_rate,
            "ells": ell_names(self.ells.shape[1]),
            "groups": [{k: _jsonable(v) for k, v in r.items()} for r in self.rows()],
            "sigma_mean": self.sigma_mean.tolist(),
            "psi_mean": self.psi_mean.tolist(),
            "psi0_mean": self.psi0_mean.tolist(),
        }


def _jsonable(v):
    return v.item() if isinstance(v, np.generic) else v


def ell_names(k: int) -> list[str]:
    return [f"e{i + 1}" for i in range(k)] + ["ones"] + (["e1-e2"] if k > 1 else [])


def contrasts(k: int) -> np.ndarray:
    """Rows: unit vectors, the ones vector and, for k > 1, ``e1 - e2``."""
    rows = [np.eye(k), np.ones((1, k))]
    if k > 1:
        d = np.zeros((1, k))
        d[0, :2] = (1.0, -1.0)
        rows.append(d)
    return np.vstack(rows)


def relative_bias(estimate_mean: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Elementwise ``mean(estimate) / truth - 1``."""
    return np.asarray(estimate_mean) / np.asarray(truth) - 1.0


def prial(mse: np.ndarray, mse_ref: np.ndarray) -> np.ndarray:
    """``100 (1 - tr MSE / tr MSE_ref)`` per area."""
    return 100.0 * (1.0 - np.trace(mse, axis1=-2, axis2=-1) / np.trace(mse_ref, axis1=-2, axis2=-1))


# ---------------------------------------------------------------------------
# scenario construction


def psi_from_rho(rho: float, k: int, psi_vector=None) -> SymMat:
    """``rho psi psi' + (1 - rho) diag(psi psi')``."""
    v = np.asarray(PSI_VECTORS[k] if psi_vector is None else psi_vector, dtype=float)
    if v.shape != (k,):
        raise InvalidConfig(f"psi_vector must have {k} entries")
    outer = np.outer(v, v)
    psi = rho * outer + (1.0 - rho) * np.diag(np.diag(outer))
    if np.linalg.eigvalsh(psi)[0] < -1e-12 * max(np.abs(psi).max(), 1.0):
        raise InvalidConfig("Psi is not positive semidefinite")
    return SymMat(psi)


def _rng(seed: int, phase: int, r: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, phase, r])))


@lru_cache(maxsize=8)
def build_design(config: SimConfig) -> Design:
    """Block design with rows ``(0, .., 1, x_ip, .., 0)`` per response.

    The covariates are area level, drawn once from U(-1, 1) with the master seed
    and frozen across replications.
    """
    m, k = config.m, config.k
    x = _rng(config.master_seed, PHASE_DESIGN).uniform(-1.0, 1.0, size=(m, k))
    sizes = config.sizes
    xu = np.repeat(x, sizes, axis=0)
    reg = np.zeros((xu.shape[0], k, 2 * k))
    for p in range(k):
        reg[:, p, 2 * p] = 1.0
        reg[:, p, 2 * p + 1] = xu[:, p]
    return Design(reg, sizes)


def _psi_factor(psi: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(psi)
    except np.linalg.LinAlgError:
        w, h = np.linalg.eigh(psi)
        return h * np.sqrt(np.maximum(w, 0.0))


def draw_effects(config: SimConfig, rng: np.random.Generator, factor=None) -> np.ndarray:
    """``m`` random effects with mean 0 and covariance Psi, shape (m, k)."""
    m, k = config.m, config.k
    if config.effect_dist == "normal":
        w = rng.standard_normal((m, k))
    elif config.effect_dist == "t":
        z = rng.standard_normal((m, k))
        u = rng.chisquare(5.0, size=(m, 1))
        w = z / np.sqrt(u / 5.0) * math.sqrt(3.0 / 5.0)
    else:
        w = (rng.chisquare(2.0, size=(m, k)) - 2.0) / 2.0
    f = _psi_factor(config.psi) if factor is None else factor
    return w @ f.T


def _draw_chunk(config: SimConfig, design: Design, phase: int, r0: int, r1: int):
    beta = config.beta_vector
    f_psi = _psi_factor(config.psi)
    f_sig = np.linalg.cholesky(config.sigma_matrix)
    mean = design.regressors @ beta
    v = np.empty((r1 - r0, design.m, design.k))
    eps = np.empty((r1 - r0, design.N, design.k))
    for j, r in enumerate(range(r0, r1)):
        rng = _rng(config.master_seed, phase, r)
        v[j] = draw_effects(config, rng, f_psi)
        eps[j] = rng.standard_normal((design.N, design.k)) @ f_sig.T
    y = mean + v[:, design.area_index, :] + eps
    theta = design.rbar @ beta + v
    return y, theta


# ---------------------------------------------------------------------------
# per-chunk kernels


def _eblup(design: Design, y: np.ndarray, dof: str):
    ybar = design.area_sums(y) / design.sizes[:, None]
    sig, p0, _, psi, _, trunc = components_batch(design, y, dof)
    beta, cov = gls_batch(design, y, ybar, psi, sig)
    theta, b, _ = predict_batch(design, ybar, beta, psi, sig)
    return theta, ybar, sig, p0, psi, trunc, cov, b


@lru_cache(maxsize=8)
def _univariate_designs(design: Design):
    out = []
    for p in range(design.k):
        cols = np.flatnonzero(np.any(design.regressors[:, p, :] != 0, axis=0))
        out.append(Design(design.regressors[:, p : p + 1, cols], design.sizes))
    return tuple(out)


def _phase_a(config: SimConfig, design: Design, y, theta):
    theta_hat, ybar, sig, p0, psi, trunc, _, _ = _eblup(design, y, config.dof)
    err = theta_hat - theta
    direct = ybar - theta
    uni = np.empty_like(theta_hat)
    for p, d1 in enumerate(_univariate_designs(design)):
        uni[..., p : p + 1] = _eblup(d1, y[..., p : p + 1], config.dof)[0]
    uerr = uni - theta
    # BLUP at the true covariances for the estimation-error term
    psi_t, sig_t = config.psi, config.sigma_matrix
    b_t, _ = gls_batch(design, y, ybar, psi_t, sig_t)
    blup = predict_batch(design, ybar, b_t, psi_t, sig_t)[0]
    gap = theta_hat - blup
    outer = lambda e: np.einsum("rak,ral->akl", e, e)  # noqa: E731
    return {
        "mse": outer(err),
        "direct": outer(direct),
        "univariate": outer(uerr),
        "gap": outer(gap),
        "sigma": sig.sum(0),
        "psi": psi.sum(0),
        "psi0": p0.sum(0),
        "trunc": float(trunc.sum()),
    }


def _phase_b(config: SimConfig, design: Design, y, theta):
    theta_hat, _, sig, _, psi, _, cov, b = _eblup(design, y, config.dof)
    sizes = design.sizes
    a1 = g1_batch(psi, sig, sizes)
    a2 = g2_batch(b, cov, design.rbar, design.rbar)
    a3 = g3_batch(psi, sig, sizes)
    naive = a1 + a2 + a3
    msem = naive + a3
    ells = contrasts(design.k)
    z = z_quantile(config.alpha)
    q = np.einsum("ek,rakl,el->rea", ells, msem, ells)
    qn = np.einsum("ek,rakl,el->rea", ells, naive, ells)
    if np.any(q <= 0):
        raise NumericalError("nonpositive l' msem l")
    dev = np.abs(np.einsum("ek,rak->rea", ells, theta_hat - theta))
    half = np.sqrt(q)
    res = {"msem": msem.sum(0), "naive": naive.sum(0), "msem_sq": (q * q).sum(0)}
    res["cover_naive"] = (dev <= z * half).sum(0).astype(float)
    res["len_naive"] = (2.0 * z * half).sum(0)
    for form in V_FORMS:
        v = np.stack([v_batch(psi, sig, e, sizes, form) for e in ells], axis=1)
        v = np.maximum(v, 0.0)
        res[f"v_{form}"] = v.sum(0)
        if form == config.v_form:
            zs = z_star(z, v, qn)
            res["cover"] = (dev <= zs * half).sum(0).astype(float)
            res["len"] = (2.0 * zs * half).sum(0)
    return res


def _run_chunk(config: SimConfig, phase: int, r0: int, r1: int):
    """Accumulated sums over replications ``r0..r1-1`` plus the failure count."""
    design = build_design(config)
    kernel = _phase_a if phase == PHASE_A else _phase_b
    y, theta = _draw_chunk(config, design, phase, r0, r1)
    try:
        return kernel(config, design, y, theta), r1 - r0, 0
    except NumericalError:
        pass
    # isolate failing replications one at a time
    total, ok, failed = None, 0, 0
    for j in range(r1 - r0):
        try:
            res = kernel(config, design, y[j : j + 1], theta[j : j + 1])
        except NumericalError:
            failed += 1
            continue
        ok += 1
        total = res if total is None else {key: total[key] + res[key] for key in total}
    return total, ok, failed


def _chunks(n: int, size: int = CHUNK):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _run_phase(config: SimConfig, phase: int, n: int, workers: int):
    spans = _chunks(n)
    if workers > 1 and len(spans) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, *zip(*[(config, phase, a, b) for a, b in spans])))
    else:
        parts = [_run_chunk(config, phase, a, b) for a, b in spans]
    total, ok, failed = None, 0, 0
    for res, n_ok, n_fail in parts:  # fixed chunk order keeps sums reproducible
        ok += n_ok
        failed += n_fail
        if res is not None:
            total = res if total is None else {key: total[key] + res[key] for key in total}
    if failed > MAX_FAIL_FRACTION * n:
        raise StudyAborted(f"{failed} of {n} replications failed in phase {phase}")
    if failed:
        log.warning("phase %d: %d of %d replications failed and were skipped", phase, failed, n)
    return total, ok, failed


def run_study(config: SimConfig, workers: int = 1) -> SimMetrics:
    """Two-phase study: truth MSEM (phase A), then estimator bias and intervals (phase B)."""
    log.info("study config %s", asdict(config))
    a, n_a, f_a = _run_phase(config, PHASE_A, config.replications_a, workers)
    b, n_b, f_b = _run_phase(config, PHASE_B, config.replications_b, workers)
    k = config.k
    return SimMetrics(
        config=asdict(config),
        groups=config.groups,
        ells=contrasts(k),
        msem_true=a["mse"] / n_a,
        msem_direct=a["direct"] / n_a,
        msem_univariate=a["univariate"] / n_a,
        eb_blup_gap=a["gap"] / n_a,
        msem_mean=b["msem"] / n_b,
        naive_mean=b["naive"] / n_b,
        cp=b["cover"] / n_b,
        cp_naive=b["cover_naive"] / n_b,
        al=b["len"] / n_b,
        al_naive=b["len_naive"] / n_b,
        msem_ell_sq=b["msem_sq"] / n_b,
        v_mean={form: b[f"v_{form}"] / n_b for form in V_FORMS},
        sigma_mean=a["sigma"] / n_a,
        psi_mean=a["psi"] / n_a,
        psi0_mean=a["psi0"] / n_a,
        truncation_rate=a["trunc"] / n_a,
        replications_a=n_a,
        replications_b=n_b,
        failures_a=f_a,
        failures_b=f_b,
    )


# ---------------------------------------------------------------------------
# component moment studies (no prediction)


def _moment_chunk(config: SimConfig, r0: int, r1: int, dof: str):
    design = build_design(config)
    y, _ = _draw_chunk(config, design, PHASE_A, r0, r1)
    sig, p0, _, psi, _, trunc = components_batch(design, y, dof)
    sums = {"trunc": float(trunc.sum())}
    for name, a in (("sigma", sig), ("psi0", p0), ("psi", psi)):
        sums[name] = a.sum(0)
        sums[name + "_sq"] = (a * a).sum(0)
    return sums


def component_moments(config: SimConfig, replications: int, workers: int = 1, dof: str | None = None) -> dict:
    """Monte Carlo means and standard errors of Sigma_hat, Psi0_hat and Psi_hat.

    Returns ``{"sigma": (mean, se), "psi0": (mean, se), "psi": (mean, se),
    "truncation_rate": float}``; uses the phase-A random numbers.
    """
    dof = config.dof if dof is None else dof
    spans = _chunks(replications, 4 * CHUNK)
    args = [(config, a, b, dof) for a, b in spans]
    if workers > 1 and len(spans) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_moment_chunk, *zip(*args)))
    else:
        parts = [_moment_chunk(*a) for a in args]
    tot = parts[0]
    for p in parts[1:]:
        tot = {key: tot[key] + p[key] for key in tot}
    n = replications
    out = {"truncation_rate": tot["trunc"] / n}
    for name in ("sigma", "psi0", "psi"):
        mean = tot[name] / n
        var = np.maximum(tot[name + "_sq"] / n - mean**2, 0.0) * n / (n - 1)
        out[name] = (mean, np.sqrt(var / n))
    return out


# ---------------------------------------------------------------------------
# presets

_PRESET_RE = re.compile(r"^(paper|acceptance|smoke)-k(\d+)-rho(\d+)-(normal|t|chisq)$")


def preset(name: str, **overrides) -> SimConfig:
    """Scenario from a name such as ``paper-k2-rho05-normal``.

    The scale sets (phase A, phase B) replications: paper (50000, 5000),
    acceptance (20000, 5000) and smoke (2000, 1000).  ``rho05`` reads as 0.5,
    ``rho025`` as 0.25.
    """
    mt = _PRESET_RE.match(name)
    if not mt:
        raise InvalidConfig(f"unknown preset {name!r}")
    scale, k, rho, dist = mt.groups()
    ra, rb = PRESET_SCALES[scale]
    cfg = SimConfig(k=int(k), rho=float("0." + rho[1:]) if rho.startswith("0") else float(rho),
                    effect_dist=dist, replications_a=ra, replications_b=rb)
    return replace(cfg, **overrides) if overrides else cfg


def preset_names() -> list[str]:
    return [
        f"{s}-k{k}-rho{r}-{d}"
        for s in PRESET_SCALES
        for k in (2, 3)
        for r in ("025", "05", "075")
        for d in EFFECT_DISTS
    ]
