import itertools
import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_ctmc, random_dtmc
from cyclecirc.chain_model import (
    cycle_strength,
    embedded_chain,
    kolmogorov_reversible,
    validate_chain,
)
from cyclecirc.cycle_algebra import Cycle, derived_path, is_similar, reversed_cycle, run_derived
from cyclecirc.exact_engine import (
    check_lemma_basic,
    exact_count_dist,
    exact_forming_dist,
    g_functional,
    taboo_table,
)
from cyclecirc.fluctuation_lab import legendre_fenchel, scgf_estimate
from cyclecirc.simulator import batch_sample, extract_events, simulate

SETTINGS = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])

cycle_tuples = st.lists(st.integers(0, 9), min_size=1, max_size=7, unique=True)
paths = st.lists(st.integers(0, 5), min_size=1, max_size=60)
seeds = st.integers(0, 2**32 - 1)


def _chain(seed, S, kind="dtmc"):
    rng = np.random.default_rng(seed)
    return random_dtmc(rng, S, zero_frac=0.2) if kind == "dtmc" else random_ctmc(rng, S)


# --- cycles and the derived chain ------------------------------------------------------------

@SETTINGS
@given(cycle_tuples, st.integers(0, 10))
def test_canonical_rotation_invariant(states, shift):
    k = shift % len(states)
    rotated = states[k:] + states[:k]
    c = Cycle(tuple(states))
    assert Cycle(tuple(rotated)) == c
    assert Cycle(c.states) == c
    assert c.states[0] == min(states)


@SETTINGS
@given(cycle_tuples)
def test_reversal_involution(states):
    c = Cycle(tuple(states))
    assert reversed_cycle(reversed_cycle(c)) == c
    assert is_similar(c, reversed_cycle(c))


@SETTINGS
@given(cycle_tuples, cycle_tuples, cycle_tuples)
def test_similarity_equivalence(a, b, c):
    a, b, c = Cycle(tuple(a)), Cycle(tuple(b)), Cycle(tuple(c))
    assert is_similar(a, a)
    assert is_similar(a, b) == is_similar(b, a)
    if is_similar(a, b) and is_similar(b, c):
        assert is_similar(a, c)


@SETTINGS
@given(paths)
def test_derived_chain_conservation(path):
    events = run_derived(path)
    stacks = derived_path(path)
    assert all(len(set(s)) == len(s) for s in stacks)
    assert (len(stacks[-1]) - 1) + sum(len(c) for _, c in events) == len(path) - 1
    assert [(n, c.states) for n, c in events] == [(n, tuple(c)) for n, c in oracles.pop_all(path)]


# --- chains --------------------------------------------------------------------------

@SETTINGS
@given(seeds, st.integers(2, 6), st.sampled_from(["dtmc", "ctmc"]))
def test_row_sums_and_embedding(seed, S, kind):
    chain = _chain(seed, S, kind)
    if kind == "dtmc":
        assert np.all(np.abs(chain.P.sum(axis=1) - 1) <= 1e-12)
    else:
        assert np.all(np.abs(chain.Q.sum(axis=1)) <= 1e-12)
        emb = embedded_chain(chain)
        validate_chain(emb.P, "dtmc")


@SETTINGS
@given(seeds, st.integers(3, 5), st.data())
def test_strength_rotation_and_relabel(seed, S, data):
    chain = _chain(seed, S, "ctmc")
    states = data.draw(st.lists(st.integers(0, S - 1), min_size=2, max_size=S, unique=True))
    k = data.draw(st.integers(0, len(states) - 1))
    assert math.isclose(cycle_strength(chain, states), cycle_strength(chain, states[k:] + states[:k]), rel_tol=1e-14)
    perm = np.array(data.draw(st.permutations(range(S))))
    Q = chain.Q[np.ix_(perm, perm)]
    relabeled = validate_chain(Q, "ctmc")
    assert kolmogorov_reversible(relabeled).reversible == kolmogorov_reversible(chain).reversible


def test_kolmogorov_relabel_reversible_case():
    rng = np.random.default_rng(3)
    pi = rng.uniform(0.5, 2, 4)
    sym = rng.uniform(0.5, 2, (4, 4))
    sym = sym + sym.T
    Q = sym / pi[:, None]
    np.fill_diagonal(Q, 0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    chain = validate_chain(Q, "ctmc")
    assert kolmogorov_reversible(chain).reversible
    perm = [2, 0, 3, 1]
    assert kolmogorov_reversible(validate_chain(Q[np.ix_(perm, perm)], "ctmc")).reversible


# --- taboo identities -----------------------------------------------------------------

@SETTINGS
@given(seeds, st.integers(2, 5), st.integers(0, 12), st.data())
def test_taboo_invariants(seed, S, n, data):
    chain = _chain(seed, S)
    H = data.draw(st.sets(st.integers(0, S - 1), max_size=S - 1))
    T = taboo_table(chain, H, max(n, 1))
    assert np.array_equal(T[0], np.eye(S))
    assert np.array_equal(T[1], chain.P)
    assert np.all(T >= 0) and np.all(T <= 1 + 1e-12)
    assert np.all(T.sum(axis=2) <= 1 + 1e-12)
    free = [s for s in range(S) if s not in H]
    k = data.draw(st.sampled_from(free))
    i, j = data.draw(st.integers(0, S - 1)), data.draw(st.integers(0, S - 1))
    assert check_lemma_basic(chain, i, j, H, k, n) <= 1e-12


@SETTINGS
@given(seeds, st.integers(0, 8), st.data())
def test_g_functional_symmetric(seed, n, data):
    chain = _chain(seed, 5)
    states = data.draw(st.lists(st.integers(0, 4), min_size=1, max_size=4, unique=True))
    H = data.draw(st.sets(st.sampled_from([s for s in range(5) if s not in states]), max_size=1))
    values = [g_functional(chain, H, list(p), n) for p in itertools.permutations(states)]
    assert max(values) - min(values) <= 1e-13


# --- exact distributions ------------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(seeds, st.integers(2, 3), st.integers(1, 6))
def test_count_dp_matches_enumeration(seed, S, n):
    chain = _chain(seed, S)
    cycles = [Cycle((0, 1))] if S == 2 else [Cycle((0, 1, 2)), Cycle((0, 2, 1)), Cycle((0, 1))]
    dist = exact_count_dist(chain, cycles, n, caps=n)
    law = oracles.dtmc_count_brute(chain.P, 0, [c.states for c in cycles], n)
    J = dist.joint
    for cell, p in law.items():
        assert abs(J[cell] - p) <= 1e-12
    assert abs(dist.total + dist.eps_trunc - 1) <= 1e-10
    assert np.all(dist.mass >= 0)


@settings(max_examples=10, deadline=None)
@given(seeds, st.floats(0.1, 2.0), st.integers(1, 6))
def test_ctmc_mass_budget(seed, t, cap):
    chain = _chain(seed, 3, "ctmc")
    dist = exact_count_dist(chain, [Cycle((0, 1, 2)), Cycle((0, 2, 1))], t, caps=cap)
    assert abs(dist.total + dist.eps_trunc - 1) <= 1e-10
    assert np.all(dist.mass >= 0)


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_forming_buckets_factorize(seed):
    chain = _chain(seed, 4)
    family = [Cycle((0,) + p) for p in itertools.permutations((1, 2, 3))]
    g = np.array([cycle_strength(chain, c) for c in family])
    if np.any(g == 0):
        return
    fd = exact_forming_dist(chain, family, 30)
    scaled = fd.buckets / g[:, None]
    live = fd.first_time > 1e-12
    assert np.allclose(scaled[:, live], scaled[0, live], rtol=1e-10, atol=0)
    # conditional law of the forming time is the same for every cycle
    cond = fd.buckets / fd.buckets.sum(axis=1, keepdims=True)
    assert np.allclose(cond[:, live], cond[0, live], rtol=1e-10, atol=0)


# --- simulation --------------------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(seeds, st.sampled_from(["dtmc", "ctmc"]))
def test_event_log_invariants(seed, kind):
    chain = _chain(seed % 1000, 4, kind)
    horizon = 60 if kind == "dtmc" else 10.0
    traj = simulate(chain, 0, horizon, seed)
    log = extract_events(traj)
    times = [t for t, _ in log.events]
    assert times == sorted(times)
    assert all(t <= horizon for t in times)
    if kind == "ctmc":
        assert np.all(np.diff(traj.jump_times) > 0)
        assert np.all(traj.states[1:] != traj.states[:-1])


@settings(max_examples=5, deadline=None)
@given(seeds)
def test_net_circulation_antisymmetry(seed):
    chain = _chain(seed % 1000, 3, "ctmc")
    c = Cycle((0, 1, 2))
    a = batch_sample(chain, 0, 3.0, 20, seed, [c], workers=1)
    b = batch_sample(chain, 0, 3.0, 20, seed, [c.reversed()], workers=1)
    assert np.array_equal(a.K, -b.K)
    assert np.all(a.J >= 0)


# --- large deviations ----------------------------------------------------------------------

@SETTINGS
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=30, unique=True),
       st.floats(0.1, 3.0), st.floats(-1, 1))
def test_legendre_output_convex_nonnegative(lams, a, b):
    lam = np.sort(np.append(np.array(lams), 0.0))
    lam = np.unique(lam)
    f = a * lam ** 2 + b * lam  # convex with f(0) = 0
    xs = np.linspace(-2, 2, 15)
    I = legendre_fenchel(lam, f, xs)
    assert I.convex
    assert np.all(I.values >= -1e-12)


@settings(max_examples=5, deadline=None)
@given(seeds)
def test_scgf_zero_at_origin(seed):
    chain = _chain(seed % 1000, 3, "ctmc")
    batch = batch_sample(chain, 0, 2.0, 100, seed, [Cycle((0, 1, 2))], workers=1)
    est = scgf_estimate(batch, [[0.0], [0.3]], "J", warn=False)
    assert est.values[0] == 0.0 and est.stderr[0] == 0.0
