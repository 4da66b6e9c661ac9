import numpy as np
import pytest

from cyclecirc import validate_chain


def ctmc(offdiag, labels=None):
    """Validated CTMC from a matrix whose diagonal is ignored."""
    Q = np.array(offdiag, dtype=float)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return validate_chain(Q, "ctmc", labels)


def dtmc(P, labels=None):
    return validate_chain(np.array(P, dtype=float), "dtmc", labels)


def random_dtmc(rng, S, zero_frac=0.0):
    """Random irreducible DTMC; the cyclic edge ``i -> i+1`` is always kept."""
    P = rng.uniform(0.05, 1.0, size=(S, S))
    if zero_frac:
        P[rng.random((S, S)) < zero_frac] = 0.0
    for i in range(S):
        P[i, (i + 1) % S] = max(P[i, (i + 1) % S], 0.1)
    P /= P.sum(axis=1, keepdims=True)
    return dtmc(P)


def random_ctmc(rng, S, low=0.2, high=2.0):
    return ctmc(rng.uniform(low, high, size=(S, S)))


# single-substrate enzyme kinetics fixture, states E, ES, EP
MM_RATES = [[0.0, 2.0, 0.2], [1.0, 0.0, 1.5], [3.0, 0.5, 0.0]]

# mildly irreversible 3-state ring used by the statistical checks
MILD_RATES = [[0.0, 1.2, 0.9], [0.9, 0.0, 1.0], [1.1, 0.8, 0.0]]

# weakly driven ring for the asymptotic rate-function check
WEAK_RATES = [[0.0, 0.35, 0.3], [0.28, 0.0, 0.3], [0.32, 0.3, 0.0]]

# 4-state fully connected irreversible chain for the entropy checks
ENTROPY_RATES = [
    [0.0, 1.0, 0.3, 0.5],
    [0.4, 0.0, 1.2, 0.3],
    [0.6, 0.2, 0.0, 1.0],
    [1.1, 0.5, 0.4, 0.0],
]


@pytest.fixture
def mm_chain():
    return ctmc(MM_RATES, ["E", "ES", "EP"])


@pytest.fixture
def mild_chain():
    return ctmc(MILD_RATES)


@pytest.fixture
def weak_chain():
    return ctmc(WEAK_RATES)


@pytest.fixture
def entropy_chain():
    return ctmc(ENTROPY_RATES)


@pytest.fixture
def symmetric_ctmc():
    return ctmc(np.ones((3, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
