import numpy as np
import pytest

from mner import Dataset, Design
from mner.validation import random_dataset, random_psd


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def kron_design(x: np.ndarray, sizes, k: int) -> Design:
    """Every response shares the unit-level covariates ``x`` (N, q): R_u = I_k (x) x_u'."""
    reg = np.stack([np.kron(np.eye(k), row[None, :]) for row in x])
    return Design(reg, np.asarray(sizes))


def kron_dataset(rng, m=12, k=2, q=2, max_n=5, psi=None, sigma=None) -> Dataset:
    sizes = rng.integers(2, max_n + 1, size=m)
    n = int(sizes.sum())
    x = np.column_stack([np.ones(n), rng.normal(size=(n, q - 1))])
    design = kron_design(x, sizes, k)
    psi = random_psd(rng, k) if psi is None else psi
    sigma = random_psd(rng, k) if sigma is None else sigma
    beta = rng.normal(size=k * q)
    v = rng.multivariate_normal(np.zeros(k), psi, size=m)
    e = rng.multivariate_normal(np.zeros(k), sigma, size=n)
    y = design.regressors @ beta + np.repeat(v, sizes, axis=0) + e
    return Dataset(design, y)


def permute_within_areas(data: Dataset, rng) -> Dataset:
    d = data.design
    order = np.concatenate([s + rng.permutation(n) for s, n in zip(d.starts, d.sizes)])
    return Dataset(Design(d.regressors[order], d.sizes, d.area_ids), data.responses[order])


def permute_areas(data: Dataset, perm) -> Dataset:
    d = data.design
    order = np.concatenate([np.arange(d.starts[i], d.starts[i] + d.sizes[i]) for i in perm])
    ids = tuple(d.area_ids[i] for i in perm)
    return Dataset(Design(d.regressors[order], d.sizes[perm], ids), data.responses[order])




_STUDIES: dict = {}


def study(name: str):
    """Run a simulation preset once per test session."""
    from mner.simulation import preset, run_study

    if name not in _STUDIES:
        _STUDIES[name] = run_study(preset(name))
    return _STUDIES[name]


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, text: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
