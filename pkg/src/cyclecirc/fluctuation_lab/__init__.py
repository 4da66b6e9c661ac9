"""Executable checks of Haldane equalities, fluctuation theorems and LDP symmetries."""

from .entropy import (
    EntropyDecomposition,
    EntropyExperiment,
    entropy_decomposition,
    entropy_experiment,
    entropy_production_rate,
    max_edge_log_ratio,
)
from .haldane import HaldaneReport, IndependenceResult, haldane_test, independence_test
from .large_deviations import (
    RateFunctionEstimate,
    RateSymmetryReport,
    ScgfEstimate,
    convexity_certificate,
    legendre_fenchel,
    rate_symmetry_check,
    scgf_estimate,
)
from .reports import dumps, input_digest
from .theorems import (
    FtReport,
    FtSection,
    ft_report,
    generating_symmetry_check,
    integral_ft,
    klsp_check,
    transient_ft,
)

__all__ = [
    "EntropyDecomposition",
    "EntropyExperiment",
    "FtReport",
    "FtSection",
    "HaldaneReport",
    "IndependenceResult",
    "RateFunctionEstimate",
    "RateSymmetryReport",
    "ScgfEstimate",
    "convexity_certificate",
    "dumps",
    "entropy_decomposition",
    "entropy_experiment",
    "entropy_production_rate",
    "ft_report",
    "generating_symmetry_check",
    "haldane_test",
    "independence_test",
    "input_digest",
    "integral_ft",
    "klsp_check",
    "legendre_fenchel",
    "max_edge_log_ratio",
    "rate_symmetry_check",
    "scgf_estimate",
    "transient_ft",
]
