import itertools
import json
import math
import warnings

import numpy as np
import pytest

import oracles
from conftest import ctmc, dtmc, random_dtmc
from cyclecirc.chain_model import cycle_affinity, cycle_strength, stationary_distribution
from cyclecirc.cycle_algebra import Cycle
from cyclecirc.errors import DegenerateTail, EmptyGrid, InfiniteAffinity, InfiniteEntropyProduction, NotSimilar
from cyclecirc.exact_engine import exact_count_dist, exact_generating
from cyclecirc.fluctuation_lab import (
    convexity_certificate,
    dumps,
    entropy_decomposition,
    entropy_production_rate,
    ft_report,
    generating_symmetry_check,
    haldane_test,
    independence_test,
    integral_ft,
    klsp_check,
    legendre_fenchel,
    max_edge_log_ratio,
    rate_symmetry_check,
    scgf_estimate,
    transient_ft,
)
from cyclecirc.simulator import Trajectory, batch_sample, simulate_ctmc

C = Cycle((0, 1, 2))
FAMILY4 = [Cycle((0,) + p) for p in itertools.permutations((1, 2, 3))]


def _symmetric_dtmc(S):
    P = np.full((S, S), 1.0 / (S - 1))
    np.fill_diagonal(P, 0.0)
    return dtmc(P)


# --- Haldane ratios -------------------------------------------------------------------

def test_haldane_exact_distinct_rates(rng):
    chain = random_dtmc(rng, 4)
    rep = haldane_test(chain, FAMILY4, mode="exact", n_max=60)
    assert rep.passed
    g = [cycle_strength(chain, c) for c in FAMILY4]
    assert rep.strengths == g
    for row in rep.pairs:
        k, l = row["pair"]
        assert row["target"] == g[k] / g[l]
    assert rep.independence.passed and rep.independence.statistic <= 1e-10


def test_haldane_symmetric_chain_mc():
    chain = _symmetric_dtmc(4)
    rep = haldane_test(chain, FAMILY4, mode="mc", replicas=3000, seed=5, workers=1)
    assert rep.passed
    for row in rep.pairs:
        assert row["target"] == 1.0
    assert rep.independence.passed


def test_haldane_ctmc_conjugate_pair(mm_chain):
    rep = haldane_test(mm_chain, [C, C.reversed()], mode="mc", replicas=5000, seed=3, workers=1)
    assert rep.passed
    assert rep.pairs[0]["target"] == pytest.approx(90.0)
    lo, hi = rep.pairs[0]["ci"]
    assert lo <= 90.0 <= hi
    exact = haldane_test(mm_chain, [C, C.reversed()], mode="exact")
    assert exact.passed


def test_haldane_not_similar(mm_chain):
    with pytest.raises(NotSimilar):
        haldane_test(mm_chain, [C, Cycle((0, 1))], mode="exact")
    rep = haldane_test(mm_chain, [C, Cycle((0, 1))], mode="exact", require="common", start=0)
    assert rep.passed


def test_haldane_report_json(mm_chain):
    rep = haldane_test(mm_chain, [C, C.reversed()], mode="exact")
    doc = json.loads(dumps(rep.to_dict()))
    assert doc["verdict"] == "pass"
    assert len(doc["input_digest"]) == 64


def test_independence_cases(rng):
    chain = random_dtmc(rng, 4)
    assert independence_test(chain, FAMILY4, mode="exact").statistic <= 1e-10
    single = independence_test(chain, FAMILY4[:1], mode="exact")
    assert single.passed and single.statistic == 0.0
    sym = independence_test(_symmetric_dtmc(4), FAMILY4, mode="mc", replicas=3000, seed=8, workers=1)
    assert sym.passed


# --- finite-time fluctuation theorems -------------------------------------------------------

def test_transient_ft_exact(mm_chain):
    sec = transient_ft(mm_chain, [C], 2.0, caps=20)
    assert sec.passed
    slope = sec.summary["slopes"][0]
    assert abs(slope["slope"] - math.log(90.0)) <= 1e-8


def test_transient_ft_reversible(symmetric_ctmc):
    sec = transient_ft(symmetric_ctmc, [C], 1.0, caps=10)
    assert sec.passed
    assert all(abs(cell["log_ratio"]) <= cell["bound"] for cell in sec.cells)


def test_transient_ft_infinite_affinity():
    chain = ctmc([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    with pytest.raises(InfiniteAffinity):
        transient_ft(chain, [C], 1.0, caps=5)
    sec = integral_ft(chain, [C], 1.0, caps=5)
    assert sec.passed and sec.skipped


def test_transient_ft_mc(mild_chain):
    sec = transient_ft(mild_chain, [C], 2.0, mode="mc", replicas=4000, seed=2, workers=1)
    assert sec.passed and sec.summary["tested_cells"] > 0


def test_integral_ft_exact(mm_chain):
    sec = integral_ft(mm_chain, [C], 3.0, caps=25)
    assert sec.passed
    assert abs(sec.summary["estimate"] - 1.0) <= 10 * sec.summary["eps_trunc"]


def test_integral_ft_reversible_and_short(symmetric_ctmc, mild_chain):
    sec = integral_ft(symmetric_ctmc, [C], 2.0, mode="mc", replicas=200, seed=1, workers=1)
    assert sec.summary["estimate"] == 1.0
    sec = integral_ft(mild_chain, [C], 1e-9, caps=3)
    assert sec.summary["estimate"] == pytest.approx(1.0, abs=1e-12)


def test_klsp(mm_chain, symmetric_ctmc):
    rho = math.log(90.0)
    sec = klsp_check(mm_chain, [C], 2.0, [-1.0, -0.5, 0.0, 0.5, 1.0], caps=20)
    assert sec.passed
    fixed = klsp_check(mm_chain, [C], 2.0, [-rho / 2], caps=20)
    assert fixed.cells[0]["rel_residual"] <= 1e-15
    even = klsp_check(symmetric_ctmc, [C], 1.0, [-0.7, 0.7], caps=15)
    assert even.passed


def test_generating_symmetry(mm_chain):
    sec = generating_symmetry_check(mm_chain, [C, C.reversed()], (0, 1), 2.0, [-1.0, -0.5, 0.0, 0.5, 1.0], caps=20)
    assert sec.passed


def test_ft_report_reversible(symmetric_ctmc):
    rep = ft_report(symmetric_ctmc, [C], 1.0, caps=10)
    assert rep.passed
    assert {s.name for s in rep.sections} >= {"transient", "integral", "klsp"}


# --- SCGF and Legendre-Fenchel ---------------------------------------------------------------

def test_scgf_zero_and_convex(mm_chain):
    batch = batch_sample(mm_chain, 0, 5.0, 800, 4, [C], workers=1)
    lam = np.linspace(-0.6, 0.6, 13)[:, None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateTail)
        est = scgf_estimate(batch, lam, "J")
    assert est.values[6] == 0.0
    assert np.all(np.diff(est.values) >= 0)
    assert convexity_certificate(lam, est.values) >= -1e-12


def test_scgf_warns_on_degenerate_tail(mm_chain):
    batch = batch_sample(mm_chain, 0, 5.0, 150, 4, [C], workers=1)
    with pytest.warns(DegenerateTail):
        scgf_estimate(batch, [[4.0]], "J")


def test_scgf_finite_time_symmetry(mm_chain):
    t = 1.0
    batch = batch_sample(mm_chain, 0, t, 20000, 12, [C, C.reversed()], workers=1)
    dist = exact_count_dist(mm_chain, [C, C.reversed()], t, caps=20)
    ell = math.log(90.0)
    for l1, l2 in [(0.2, -0.3), (-0.5, 0.1)]:
        pts = np.array([[l1, l2], [l2 - ell, l1 + ell]])
        est = scgf_estimate(batch, pts, "J", warn=False)
        assert abs(est.values[0] - est.values[1]) <= 3 * math.hypot(*est.stderr)
        exact = math.log(exact_generating(dist, [l1, l2])[0]) / t
        assert abs(est.values[0] - exact) <= 4 * est.stderr[0]


def test_legendre_quadratic():
    h = 0.01
    lam = np.arange(-4, 4 + h / 2, h)
    xs = np.linspace(-2, 2, 41)
    I = legendre_fenchel(lam, lam ** 2 / 2, xs)
    assert np.max(np.abs(I.values - xs ** 2 / 2)) <= h ** 2 / 8 + 1e-12
    assert I.convex


def test_legendre_abs():
    L = 3.0
    lam = np.linspace(-L, L, 61)
    xs = np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0])
    I = legendre_fenchel(lam, np.abs(lam), xs)
    inside = np.abs(xs) <= 1
    np.testing.assert_allclose(I.values[inside], 0.0, atol=1e-12)
    np.testing.assert_allclose(I.values[~inside], (np.abs(xs[~inside]) - 1) * L)


def test_legendre_poisson():
    mu, h = 1.5, 0.01
    lam = np.arange(-5, 2 + h / 2, h)
    xs = np.linspace(0.2, 4.0, 20)
    I = legendre_fenchel(lam, mu * np.expm1(lam), xs)
    np.testing.assert_allclose(I.values, oracles.poisson_rate_function(xs, mu), atol=h)


def test_legendre_empty_grid():
    with pytest.raises(EmptyGrid):
        legendre_fenchel([], [], [0.0])


# --- rate-function symmetry --------------------------------------------------------------

def test_rate_symmetry_reversible_pair(symmetric_ctmc):
    rep = rate_symmetry_check(symmetric_ctmc, [C], 30.0, mode="pair", replicas=2000, seed=4, workers=1,
                              n_lambda=15, bootstrap=60)
    assert rep.correction == 0.0
    assert rep.passed


def test_rate_symmetry_diagonal_trivial(weak_chain):
    x = np.array([[0.05, 0.05], [0.1, 0.02], [0.02, 0.1]])
    rep = rate_symmetry_check(weak_chain, [C], 40.0, mode="pair", replicas=1000, seed=2, workers=1,
                              n_lambda=11, x_grid=x, bootstrap=20)
    assert rep.trivial.tolist() == [True, False, False]
    assert rep.residual[0] == 0.0


# --- entropy production -------------------------------------------------------------------

def test_entropy_reversible(symmetric_ctmc):
    traj = simulate_ctmc(symmetric_ctmc, 0, 50.0, seed=3)
    d = entropy_decomposition(traj, symmetric_ctmc)
    assert d.cycle_part == 0.0
    assert d.W == pytest.approx(d.residual)
    assert entropy_production_rate(symmetric_ctmc) == 0.0


def test_entropy_closed_trajectory(mm_chain):
    # every transition is absorbed by a popped cycle: only the boundary remains
    traj = Trajectory("ctmc", np.array([0, 1, 2, 0, 2, 1, 0]), np.array([0, .1, .3, .4, .8, .9, 1.2]), 1.5)
    d = entropy_decomposition(traj, mm_chain)
    assert d.stack_term == 0.0
    assert d.n_cycles == 2
    assert d.residual * 1.5 == pytest.approx(d.boundary, abs=1e-12)
    assert d.cycle_part == pytest.approx((math.log(90.0) - math.log(90.0)) / 1.5, abs=1e-15)


def test_entropy_residual_is_stack_plus_boundary(entropy_chain):
    traj = simulate_ctmc(entropy_chain, 0, 40.0, seed=6)
    d = entropy_decomposition(traj, entropy_chain, t=30.0)
    assert d.t * d.residual == pytest.approx(d.boundary + d.stack_term, abs=1e-9)
    assert abs(d.stack_term) <= entropy_chain.n_states * max_edge_log_ratio(entropy_chain)


def test_entropy_infinite():
    chain = ctmc([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    traj = simulate_ctmc(chain, 0, 5.0, seed=1)
    with pytest.raises(InfiniteEntropyProduction):
        entropy_decomposition(traj, chain)


def test_entropy_rate_matches_cycle_form(mm_chain):
    # stationary flux form equals the cycle form sum_c J^c rho^c / 2 for a ring
    pi = stationary_distribution(mm_chain)
    Q = mm_chain.Q
    flux = pi[0] * Q[0, 1] - pi[1] * Q[1, 0]
    assert entropy_production_rate(mm_chain) == pytest.approx(flux * cycle_affinity(mm_chain, C), rel=1e-12)
