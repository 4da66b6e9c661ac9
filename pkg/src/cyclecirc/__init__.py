"""Cycle forming times and circulation fluctuations of finite Markov chains."""

from .chain_model import (
    CtmcSpec,
    DtmcSpec,
    cycle_affinity,
    cycle_strength,
    kolmogorov_reversible,
    stationary_distribution,
    validate_chain,
)
from .cycle_algebra import Cycle, canonicalize, is_similar, reversed_cycle, run_derived
from .errors import CycleCircError

__version__ = "0.1.0"

__all__ = [
    "Cycle",
    "CtmcSpec",
    "CycleCircError",
    "DtmcSpec",
    "canonicalize",
    "cycle_affinity",
    "cycle_strength",
    "is_similar",
    "kolmogorov_reversible",
    "reversed_cycle",
    "run_derived",
    "stationary_distribution",
    "validate_chain",
    "__version__",
]
