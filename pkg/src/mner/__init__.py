"""Multivariate nested-error regression: EBLUP, MSE-matrix estimation and intervals."""

__version__ = "0.1.0"

from .blup import bayes_predict, eblup, fit, gls_fit, shrinkage_matrix
from .components import (
    BiasInputs,
    bias_psi0,
    estimate_components,
    estimate_psi,
    estimate_psi0,
    estimate_sigma,
)
from .core import (
    AreaPrediction,
    CovComponents,
    Dataset,
    Design,
    FitResult,
    InputError,
    InsufficientDegreesOfFreedom,
    MNERError,
    NonpositiveMSE,
    NumericalError,
    RankDeficientDesign,
    SingularCovariance,
    SymMat,
    UnitBlock,
)
from .oracles import OracleTooLarge, dense_gls_oracle, univariate_eblup_oracle
from .simulation import SimConfig, SimMetrics, build_design, draw_effects, preset, psi_from_rho, run_study
from .uncertainty import (
    IntervalResult,
    corrected_interval,
    g1,
    g2,
    g3,
    msem_estimate,
    theoretical_coverage,
    v_approx,
)

__all__ = [
    "AreaPrediction", "BiasInputs", "CovComponents", "Dataset", "Design", "FitResult",
    "InputError", "InsufficientDegreesOfFreedom", "IntervalResult", "MNERError",
    "NonpositiveMSE", "NumericalError", "OracleTooLarge", "RankDeficientDesign",
    "SimConfig", "SimMetrics", "SingularCovariance", "SymMat", "UnitBlock",
    "bayes_predict", "bias_psi0", "build_design", "corrected_interval", "dense_gls_oracle",
    "draw_effects", "eblup", "estimate_components", "estimate_psi", "estimate_psi0",
    "estimate_sigma", "fit", "g1", "g2", "g3", "gls_fit", "msem_estimate", "preset",
    "psi_from_rho", "run_study", "shrinkage_matrix", "theoretical_coverage",
    "univariate_eblup_oracle", "v_approx",
]
