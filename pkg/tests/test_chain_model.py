import math

import numpy as np
import pytest

from conftest import ctmc, dtmc, random_ctmc
from cyclecirc.chain_model import (
    CtmcSpec,
    DtmcSpec,
    cycle_affinity,
    cycle_scalar,
    cycle_strength,
    embedded_chain,
    kolmogorov_reversible,
    stationary_distribution,
    validate_chain,
)
from cyclecirc.cycle_algebra import Cycle
from cyclecirc.errors import (
    BadDiagonal,
    NegativeRate,
    NonStochasticRow,
    Reducible,
    UnknownState,
    ZeroForwardStrength,
)


def test_valid_symmetric_dtmc():
    chain = validate_chain([[0.5, 0.5], [0.5, 0.5]], "dtmc")
    assert isinstance(chain, DtmcSpec)
    assert chain.labels == ("0", "1")


def test_nonstochastic_row_named():
    with pytest.raises(NonStochasticRow) as exc:
        validate_chain([[0.6, 0.5], [0.5, 0.5]], "dtmc")
    assert exc.value.row == 0


def test_unidirectional_ring_is_irreducible():
    Q = [[-1, 1, 0], [0, -2, 2], [3, 0, -3]]
    chain = validate_chain(Q, "ctmc")
    assert isinstance(chain, CtmcSpec)


def test_validation_errors():
    with pytest.raises(NegativeRate) as exc:
        validate_chain([[-1, -1], [1, -1]], "ctmc")
    assert (exc.value.row, exc.value.col) == (0, 1)
    with pytest.raises(BadDiagonal) as exc:
        validate_chain([[-1, 1], [1, -2]], "ctmc")
    assert exc.value.row == 1
    with pytest.raises(Reducible):
        validate_chain([[1, 0], [0, 1]], "dtmc")
    with pytest.raises(Reducible):
        validate_chain([[0.5, 0.5, 0], [0.5, 0.5, 0], [0, 0.5, 0.5]], "dtmc")


def test_renormalize_only_on_request():
    with pytest.raises(NonStochasticRow):
        validate_chain([[1, 1], [2, 2]], "dtmc")
    chain = validate_chain([[1, 1], [2, 2]], "dtmc", renormalize=True)
    np.testing.assert_allclose(chain.P, 0.5)
    q = validate_chain([[0, 1], [2, 0]], "ctmc", renormalize=True)
    np.testing.assert_allclose(np.diag(q.Q), [-1, -2])


def test_matrices_are_immutable():
    chain = dtmc([[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(ValueError):
        chain.P[0, 0] = 1.0


def test_strengths_on_ring():
    chain = ctmc([[0, 1, 0], [0, 0, 2], [3, 0, 0]], ["E", "ES", "EP"])
    assert cycle_strength(chain, Cycle((0, 1, 2))) == 6.0
    assert cycle_strength(chain, Cycle((0, 2, 1))) == 0.0
    assert cycle_affinity(chain, Cycle((0, 1, 2))) == math.inf
    with pytest.raises(ZeroForwardStrength):
        cycle_affinity(chain, Cycle((0, 2, 1)))
    with pytest.raises(UnknownState):
        cycle_strength(chain, Cycle((0, 5)))


def test_strength_uniform_dtmc():
    P = np.full((3, 3), 0.5)
    np.fill_diagonal(P, 0.0)
    assert cycle_strength(dtmc(P), Cycle((0, 1, 2))) == pytest.approx(0.125, abs=1e-15)


def test_affinity_values():
    chain = ctmc([[0, 1, 1], [1, 0, 2], [3, 1, 0]])
    assert cycle_scalar(chain, Cycle((0, 1, 2))).strength == 6.0
    assert cycle_affinity(chain, Cycle((0, 1, 2))) == pytest.approx(math.log(6.0))
    chain = ctmc([[0, 1, 1], [1, 0, 2], [3, 3, 0]])
    assert cycle_affinity(chain, Cycle((0, 1, 2))) == pytest.approx(math.log(2.0))
    sym = ctmc(np.ones((3, 3)))
    assert cycle_affinity(sym, Cycle((0, 1, 2))) == 0.0


def test_strength_accepts_raw_rotations(rng):
    chain = random_ctmc(rng, 4)
    base = cycle_strength(chain, (0, 2, 3))
    for rot in [(2, 3, 0), (3, 0, 2)]:
        assert cycle_strength(chain, rot) == pytest.approx(base, rel=1e-15)


def test_kolmogorov_examples():
    assert kolmogorov_reversible(dtmc(np.full((3, 3), 1 / 3))).reversible
    res = kolmogorov_reversible(ctmc([[0, 1, 0], [0, 0, 1], [1, 0, 0]]))
    assert not res.reversible
    assert res.witness in (Cycle((0, 1, 2)), Cycle((0, 2, 1)))
    bd = ctmc([[0, 1, 0, 0], [2, 0, 0.5, 0], [0, 3, 0, 4], [0, 0, 1, 0]])
    assert kolmogorov_reversible(bd).reversible


def test_kolmogorov_max_len():
    # only the 3-cycle breaks balance, so length-2 checks cannot see it
    chain = ctmc([[0, 2, 1], [1, 0, 2], [2, 1, 0]])
    assert kolmogorov_reversible(chain, max_cycle_len=2).reversible
    assert not kolmogorov_reversible(chain).reversible


def test_embedded_chain(mm_chain):
    emb = embedded_chain(mm_chain)
    np.testing.assert_allclose(emb.P[0], [0, 2 / 2.2, 0.2 / 2.2])
    assert np.all(np.diag(emb.P) == 0)


def test_stationary_distribution(mm_chain, rng):
    pi = stationary_distribution(mm_chain)
    np.testing.assert_allclose(pi @ mm_chain.Q, 0, atol=1e-12)
    assert pi.sum() == pytest.approx(1.0)
    P = random_ctmc(rng, 4)
    d = embedded_chain(P)
    pd = stationary_distribution(d)
    np.testing.assert_allclose(pd @ d.P, pd, atol=1e-12)
