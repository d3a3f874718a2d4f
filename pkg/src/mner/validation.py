"""Oracle suites shared by the ``validate`` command and the test suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blup import fit, gls_fit
from .components import bias_psi0_batch
from .core import Dataset, Design
from .oracles import dense_gls_oracle, univariate_eblup_oracle
from .simulation import SimConfig, build_design, component_moments
from .uncertainty import msem_estimate, v_batch


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (threshold {self.threshold:.3g})"


def rel_err(a, b) -> float:
    """Norm-wise relative error ``max|a - b| / max|b|`` (0 when both vanish)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    num = np.max(np.abs(a - b)) if a.size else 0.0
    den = np.max(np.abs(b)) if b.size else 0.0
    if num == 0.0:
        return 0.0
    return float(num / den) if den > 0 else float("inf")


def random_psd(rng: np.random.Generator, k: int, rank: int | None = None, scale: float = 1.0) -> np.ndarray:
    r = k if rank is None else rank
    a = rng.normal(size=(k, r))
    return scale * (a @ a.T / max(r, 1) + (0.1 * np.eye(k) if rank is None else 0.0))


def random_dataset(
    rng: np.random.Generator, m: int, k: int, s: int, sizes=None, max_n: int = 5, psi=None, sigma=None
) -> Dataset:
    """Data from the model with random regressors, Psi and Sigma."""
    sizes = rng.integers(1, max_n + 1, size=m) if sizes is None else np.asarray(sizes)
    n = int(sizes.sum())
    reg = rng.normal(size=(n, k, s))
    psi = random_psd(rng, k) if psi is None else psi
    sigma = random_psd(rng, k) if sigma is None else sigma
    beta = rng.normal(size=s)
    v = rng.multivariate_normal(np.zeros(k), psi, size=m)
    e = rng.multivariate_normal(np.zeros(k), sigma, size=n)
    y = reg @ beta + np.repeat(v, sizes, axis=0) + e
    return Dataset(Design(reg, sizes), y)


def check_dense_gls(instances: int = 100, seed: int = 1, tol: float = 1e-10) -> CheckResult:
    """Structured GLS against the dense oracle on random instances (m <= 8, k <= 3)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        m = int(rng.integers(2, 9))
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 5))
        data = random_dataset(rng, m, k, s, sizes=rng.integers(1, 6, size=m))
        if np.linalg.matrix_rank(data.design.stacked) < s:
            continue
        psi, sigma = random_psd(rng, k, rank=int(rng.integers(0, k + 1))), random_psd(rng, k)
        fr = gls_fit(data, psi, sigma)
        b, c = dense_gls_oracle(data, psi, sigma)
        worst = max(worst, rel_err(fr.beta, b), rel_err(fr.beta_cov, c))
    return CheckResult("gls_fit vs dense oracle", worst < tol, worst, tol, {"instances": instances})


def univariate_differences(data: Dataset) -> dict[str, float]:
    """Relative differences between the k = 1 pipeline and the scalar oracle."""
    fr = fit(data)
    o = univariate_eblup_oracle(data)
    preds = msem_estimate(data, fr)
    comp = fr.components
    pick = lambda name: np.array([getattr(p, name).array[0, 0] for p in preds])  # noqa: E731
    sizes = data.design.sizes
    return {
        "sigma_hat": rel_err(comp.sigma_hat.array[0, 0], o.sigma_hat),
        "psi0": rel_err(comp.psi0.array[0, 0], o.psi0),
        "psi1": rel_err(comp.psi1.array[0, 0], o.psi1),
        "psi_hat": rel_err(comp.psi_hat.array[0, 0], o.psi_hat),
        "beta": rel_err(fr.beta, o.beta),
        "beta_cov": rel_err(fr.beta_cov, o.beta_cov),
        "theta": rel_err([p.theta_hat[0] for p in preds], o.theta),
        "g1": rel_err(pick("g1"), o.g1),
        "g2": rel_err(pick("g2"), o.g2),
        "g3": rel_err(pick("g3"), o.g3),
        "msem": rel_err(pick("msem"), o.msem),
        "v_printed": rel_err(v_batch(fr.psi.array, fr.sigma.array, [1.0], sizes, "printed"), o.v_printed),
        "v_wishart": rel_err(v_batch(fr.psi.array, fr.sigma.array, [1.0], sizes, "wishart"), o.v_wishart),
    }


def check_univariate(instances: int = 20, seed: int = 2, tol: float = 1e-12) -> CheckResult:
    """Full k = 1 pipeline against the independent scalar implementation."""
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    done = 0
    while done < instances:
        m = int(rng.integers(6, 16))
        s = int(rng.integers(1, 4))
        data = random_dataset(rng, m, 1, s, sizes=rng.integers(2, 8, size=m),
                              psi=np.array([[rng.uniform(0.5, 2.0)]]), sigma=np.array([[rng.uniform(0.5, 2.0)]]))
        diffs = univariate_differences(data)
        done += 1
        name, val = max(diffs.items(), key=lambda kv: kv[1])
        if val > worst:
            worst, where = val, name
    return CheckResult("k=1 pipeline vs scalar oracle", worst < tol, worst, tol, {"worst_quantity": where})


def bias_config(rho: float = 0.5, seed: int = 20240601) -> SimConfig:
    return SimConfig(m=10, k=2, rho=rho, master_seed=seed)


def check_bias_mc(replications: int = 200_000, seed: int = 20240601, workers: int = 1, n_se: float = 3.0) -> CheckResult:
    """Exact bias of Psi0_hat against its Monte Carlo mean (m = 10, k = 2, rho = 0.5)."""
    cfg = bias_config(seed=seed)
    design = build_design(cfg)
    mean, se = component_moments(cfg, replications, workers)["psi0"]
    bias = bias_psi0_batch(design, cfg.psi, cfg.sigma_matrix)
    z = np.abs(mean - cfg.psi - bias) / se
    return CheckResult(
        "bias_psi0 vs Monte Carlo",
        bool(np.all(z < n_se)),
        float(z.max()),
        n_se,
        {"bias": bias, "mc_bias": mean - cfg.psi, "se": se, "replications": replications},
    )


def run_all(seed: int = 1, workers: int = 1, replications: int = 200_000) -> list[CheckResult]:
    return [
        check_dense_gls(seed=seed),
        check_univariate(seed=seed + 1),
        check_bias_mc(replications=replications, seed=seed, workers=workers),
    ]
