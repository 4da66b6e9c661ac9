"""Exact finite-chain computations used as oracles.

Everything here is deterministic linear algebra on finite state spaces:

* taboo transition probabilities and the permutation-invariant
  convolutions built from them,
* the *augmented* chain whose states are the reachable stacks of the
  derived chain, with transitions labelled by the cycle they pop,
* first-formation laws of a cycle family (step-by-step DP for a DTMC,
  uniformization for a CTMC),
* joint laws of cycle counts on a truncated lattice.

Truncation is never silent: every result that drops mass reports it.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.stats import poisson

from .chain_model import CtmcSpec, DtmcSpec, cycle_strength, embedded_chain
from .cycle_algebra import Cycle, CyclePopper
from .errors import DuplicateState, NoCommonState, Overflow, StateInTaboo, UnknownState

__all__ = [
    "taboo_table",
    "taboo_prob",
    "check_lemma_basic",
    "taboo_transposition_residual",
    "g_functional",
    "AugmentedChain",
    "build_augmented",
    "FormingDist",
    "exact_forming_dist",
    "absorption_probabilities",
    "FormingCdf",
    "exact_forming_cdf",
    "CountDistribution",
    "exact_count_dist",
    "exact_generating",
    "common_state",
    "uniformization_rate",
    "POISSON_TAIL",
]

POISSON_TAIL = 1e-12
UNIFORMIZATION_FACTOR = 1.05


def _transition_matrix(chain) -> np.ndarray:
    return chain.P if chain.kind == "dtmc" else embedded_chain(chain).P


# --- taboo probabilities -------------------------------------------------------

def taboo_table(chain: DtmcSpec, H: Iterable[int], n_max: int) -> np.ndarray:
    """``T[n, i, j] = p_ij^H(n)`` for ``0 <= n <= n_max``.

    Uses ``p^H(n)_{ij} = sum_{k not in H} p_ik p^H(n-1)_{kj}`` for ``n >= 2``
    with ``p^H(0) = I`` and ``p^H(1) = P``.
    """
    P = _transition_matrix(chain)
    S = P.shape[0]
    H = sorted(set(int(h) for h in H))
    for h in H:
        if not 0 <= h < S:
            raise UnknownState(h)
    out = np.zeros((n_max + 1, S, S))
    out[0] = np.eye(S)
    if n_max >= 1:
        out[1] = P
    PH = P.copy()
    PH[:, H] = 0.0  # the intermediate state k must avoid H
    for n in range(2, n_max + 1):
        out[n] = PH @ out[n - 1]
    return out


def taboo_prob(chain: DtmcSpec, i: int, j: int, H: Iterable[int], n: int) -> float:
    """``P_i(X_n = j, X_1, ..., X_{n-1} not in H)``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return float(taboo_table(chain, H, n)[n, i, j])


def check_lemma_basic(chain: DtmcSpec, i: int, j: int, H: Iterable[int], k: int, n: int) -> float:
    """Residual of the first-entrance decomposition through ``k``.

    ``p_ij^H(n) = p_ij^{H,k}(n) + sum_{m=1}^{n-1} p_ik^H(m) p_kj^{H,k}(n-m)``
    """
    H = set(int(h) for h in H)
    if k in H:
        raise StateInTaboo(f"state {k} is in the taboo set")
    TH = taboo_table(chain, H, n)
    THk = taboo_table(chain, H | {k}, n)
    rhs = math.fsum([THk[n, i, j]] + [TH[m, i, k] * THk[n - m, k, j] for m in range(1, n)])
    return abs(TH[n, i, j] - rhs)


def taboo_transposition_residual(chain: DtmcSpec, i: int, j: int, H: Iterable[int], n: int) -> float:
    """``|sum_m p_ii^H(m) p_jj^{H,i}(n-m) - sum_m p_jj^H(m) p_ii^{H,j}(n-m)|``."""
    H = set(int(h) for h in H)
    TH = taboo_table(chain, H, n)
    THi = taboo_table(chain, H | {i}, n)
    THj = taboo_table(chain, H | {j}, n)
    a = math.fsum(TH[m, i, i] * THi[n - m, j, j] for m in range(n + 1))
    b = math.fsum(TH[m, j, j] * THj[n - m, i, i] for m in range(n + 1))
    return abs(a - b)


def _convolve_exact(a: Sequence[float], b: Sequence[float], n_max: int) -> list[float]:
    # correctly rounded sums; long convolutions of probabilities otherwise
    # drift by more than the 1e-12 budget of the identity checks
    return [math.fsum(a[m] * b[n - m] for m in range(n + 1)) for n in range(n_max + 1)]


def g_functional(chain: DtmcSpec, H: Iterable[int], states: Sequence[int], n: int) -> float:
    """``G^H_n(i_1..i_s)``: convolution of taboo return probabilities.

    The ``m``-th factor is the return probability of ``i_m`` with taboo set
    ``H + {i_1, ..., i_{m-1}}``; the total number of steps is ``n``.
    """
    H = set(int(h) for h in H)
    states = [int(s) for s in states]
    if len(set(states)) != len(states):
        raise DuplicateState(f"states must be distinct: {states}")
    if H & set(states):
        raise StateInTaboo(f"states {sorted(H & set(states))} lie in the taboo set")
    acc = [1.0] + [0.0] * n
    taboo = set(H)
    for s in states:
        T = taboo_table(chain, taboo, n)
        acc = _convolve_exact(acc, T[:, s, s].tolist(), n)
        taboo.add(s)
    return acc[n]


# --- augmented derived chain --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AugmentedChain:
    """Reachable derived-chain stacks and their labelled transitions.

    ``weights`` are one-step probabilities (DTMC) or rates (CTMC).  For a
    CTMC ``exit_rates[v]`` is the total rate out of node ``v``.
    ``labels[e]`` is the index of the watched cycle popped by edge ``e``
    or ``-1``.
    """

    kind: str
    start: int
    nodes: tuple[tuple[int, ...], ...]
    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray
    popped: tuple
    labels: np.ndarray
    watched: tuple[Cycle, ...]
    exit_rates: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def free_matrix(self, scale: float = 1.0) -> sparse.csr_matrix:
        """Node-to-node weights of edges that pop no watched cycle."""
        m = self.labels < 0
        n = self.n_nodes
        return sparse.csr_matrix(
            (self.weights[m] * scale, (self.src[m], self.dst[m])), shape=(n, n)
        )

    def pop_matrix(self, k: int, scale: float = 1.0) -> sparse.csr_matrix:
        m = self.labels == k
        n = self.n_nodes
        return sparse.csr_matrix(
            (self.weights[m] * scale, (self.src[m], self.dst[m])), shape=(n, n)
        )

    def pop_vector(self, k: int, scale: float = 1.0) -> np.ndarray:
        out = np.zeros(self.n_nodes)
        m = self.labels == k
        np.add.at(out, self.src[m], self.weights[m] * scale)
        return out


def build_augmented(chain, start: int, watched: Sequence[Cycle] = ()) -> AugmentedChain:
    """Breadth-first enumeration of stacks reachable from ``[start]``.

    DTMC self-loops pop singleton cycles; CTMC edges are the off-diagonal
    rates, so no singleton is ever popped.
    """
    S = chain.n_states
    start = int(start)
    if not 0 <= start < S:
        raise UnknownState(start)
    watched = tuple(Cycle(tuple(c)) for c in watched)
    lookup = {c: k for k, c in enumerate(watched)}
    M = chain.matrix
    succ = []
    for x in range(S):
        row = [(j, float(M[x, j])) for j in range(S) if M[x, j] > 0 and (chain.kind == "dtmc" or j != x)]
        succ.append(row)

    index = {(start,): 0}
    nodes = [(start,)]
    src, dst, wts, popped = [], [], [], []
    head = 0
    while head < len(nodes):
        stack = nodes[head]
        for j, w in succ[stack[-1]]:
            if j in stack:
                k = stack.index(j)
                nxt = stack[: k + 1]
                cyc = Cycle(stack[k:])
            else:
                nxt = stack + (j,)
                cyc = None
            if nxt not in index:
                index[nxt] = len(nodes)
                nodes.append(nxt)
            src.append(head)
            dst.append(index[nxt])
            wts.append(w)
            popped.append(cyc)
        head += 1

    labels = np.array([lookup.get(c, -1) if c is not None else -1 for c in popped], dtype=np.int64)
    exit_rates = None
    if chain.kind == "ctmc":
        rates = chain.exit_rates
        exit_rates = np.array([rates[s[-1]] for s in nodes])
    return AugmentedChain(
        chain.kind,
        start,
        tuple(nodes),
        np.array(src, dtype=np.int64),
        np.array(dst, dtype=np.int64),
        np.array(wts, dtype=float),
        tuple(popped),
        labels,
        watched,
        exit_rates,
    )


def common_state(cycles: Sequence[Cycle], start: int | None = None) -> int:
    """The state every cycle passes through: ``start`` if given, else the smallest."""
    cycles = [Cycle(tuple(c)) for c in cycles]
    if not cycles:
        raise NoCommonState("empty cycle family")
    shared = frozenset.intersection(*(c.state_set for c in cycles))
    if start is not None:
        if int(start) not in shared:
            raise NoCommonState(f"state {start} is not on every cycle of the family")
        return int(start)
    if not shared:
        raise NoCommonState("the cycles share no state")
    return min(shared)


# --- first formation of a family -------------------------------------------------------

def _jump_augmented(chain, start, cycles) -> AugmentedChain:
    """Augmented chain of the (embedded) jump chain, weights are probabilities."""
    if chain.kind == "ctmc":
        return build_augmented(embedded_chain(chain), start, cycles)
    return build_augmented(chain, start, cycles)


def absorption_probabilities(chain, cycles: Sequence[Cycle], start: int) -> np.ndarray:
    """``P_start(T = T^{c_k})`` for each ``k``, by a linear solve.

    Only the sequence of visited states matters, so a CTMC is handled through
    its embedded chain.
    """
    cycles = [Cycle(tuple(c)) for c in cycles]
    aug = _jump_augmented(chain, start, cycles)
    r = len(cycles)
    if all(cycle_strength(chain, c) == 0 for c in cycles):
        return np.zeros(r)
    A = np.eye(aug.n_nodes) - aug.free_matrix().toarray()
    B = np.column_stack([aug.pop_vector(k) for k in range(r)])
    X = np.linalg.solve(A, B)
    return X[0]


@dataclass(frozen=True, eq=False)
class FormingDist:
    """``buckets[k, n] = P_i(T^{c_k} = n, T = T^{c_k})`` for ``n <= n_max``."""

    cycles: tuple[Cycle, ...]
    start: int
    buckets: np.ndarray
    tail: float
    absorption: np.ndarray

    @property
    def n_max(self) -> int:
        return self.buckets.shape[1] - 1

    @property
    def first_time(self) -> np.ndarray:
        """``P(T = n)``."""
        return self.buckets.sum(axis=0)


def exact_forming_dist(chain, cycles: Sequence[Cycle], n_max: int, start: int | None = None) -> FormingDist:
    """Exact joint law of the family forming time and the cycle formed.

    Forward DP over the augmented chain from ``[start]``: probability mass
    that pops a watched cycle at step ``n`` is absorbed into bucket
    ``(k, n)`` and never propagates further.  For a CTMC the step count is
    the number of jumps of the embedded chain.
    """
    cycles = tuple(Cycle(tuple(c)) for c in cycles)
    start = common_state(cycles, None) if start is None else int(start)
    aug = _jump_augmented(chain, start, cycles)
    r = len(cycles)
    MT = aug.free_matrix().T.tocsr()
    pops = np.vstack([aug.pop_vector(k) for k in range(r)]) if r else np.zeros((0, aug.n_nodes))
    buckets = np.zeros((r, n_max + 1))
    v = np.zeros(aug.n_nodes)
    v[0] = 1.0
    for n in range(1, n_max + 1):
        buckets[:, n] = pops @ v
        v = MT @ v
    return FormingDist(cycles, start, buckets, float(v.sum()), absorption_probabilities(chain, cycles, start))


def uniformization_rate(chain: CtmcSpec) -> float:
    return UNIFORMIZATION_FACTOR * float(np.max(chain.exit_rates))


def _poisson_weights(mu: float, tail: float = POISSON_TAIL) -> tuple[np.ndarray, float]:
    if mu == 0:
        return np.ones(1), 0.0
    K = int(poisson.isf(tail, mu)) + 1
    while poisson.sf(K, mu) > tail:
        K += 1
    return poisson.pmf(np.arange(K + 1), mu), float(poisson.sf(K, mu))


class _Kahan:
    """Compensated accumulation of array-valued terms."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, x):
        y = x - self.comp
        t = self.total + y
        self.comp = (t - self.total) - y
        self.total = t


@dataclass(frozen=True, eq=False)
class FormingCdf:
    """``cdf[k, m] = P_i(T^{c_k} <= times[m], T = T^{c_k})`` for a CTMC."""

    cycles: tuple[Cycle, ...]
    start: int
    times: np.ndarray
    cdf: np.ndarray
    truncation: np.ndarray
    absorption: np.ndarray


def exact_forming_cdf(chain: CtmcSpec, cycles: Sequence[Cycle], times: Sequence[float], start: int | None = None) -> FormingCdf:
    """Uniformization of the augmented generator with absorbing watched pops."""
    cycles = tuple(Cycle(tuple(c)) for c in cycles)
    start = common_state(cycles, None) if start is None else int(start)
    aug = build_augmented(chain, start, cycles)
    lam = uniformization_rate(chain)
    r = len(cycles)
    stay = sparse.diags(1.0 - aug.exit_rates / lam)
    UT = (stay + aug.free_matrix(1.0 / lam)).T.tocsr()
    pops = np.vstack([aug.pop_vector(k, 1.0 / lam) for k in range(r)])
    times = np.asarray(times, dtype=float)
    cdf = np.zeros((r, len(times)))
    trunc = np.zeros(len(times))
    for m, t in enumerate(times):
        w, tail = _poisson_weights(lam * t)
        # absorbed by time t <=> absorbed within the first N uniformized steps
        survive = 1.0 - np.cumsum(w)  # P(N > n)
        acc = _Kahan(r)
        v = np.zeros(aug.n_nodes)
        v[0] = 1.0
        for n in range(len(w)):
            acc.add((pops @ v) * (survive[n] + tail if n < len(w) - 1 else tail))
            v = UT @ v
        cdf[:, m] = acc.total
        trunc[m] = tail
    return FormingCdf(cycles, start, times, cdf, trunc, absorption_probabilities(chain, cycles, start))


# --- joint count distributions ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CountDistribution:
    """Joint law of ``(N^{c_1}, ..., N^{c_r})`` on ``prod_k [0, cap_k]``.

    ``mass[v, n_1, ..., n_r]`` also resolves the final augmented node ``v``.
    ``eps_trunc`` is the probability dropped by count caps and by cutting
    the Poisson series, so ``mass.sum() + eps_trunc == 1`` up to rounding.
    """

    cycles: tuple[Cycle, ...]
    caps: tuple[int, ...]
    horizon: float
    kind: str
    start: int
    nodes: tuple
    mass: np.ndarray
    eps_trunc: float
    cap_overflow: float = 0.0
    poisson_tail: float = 0.0
    uniformization_rate: float | None = None

    @property
    def joint(self) -> np.ndarray:
        return self.mass.sum(axis=0)

    @property
    def total(self) -> float:
        return float(math.fsum(self.mass.ravel()))

    def marginal(self, k: int) -> np.ndarray:
        axes = tuple(a for a in range(len(self.cycles)) if a != k)
        return self.joint.sum(axis=axes)

    def probability(self, counts: Sequence[int]) -> float:
        return float(self.joint[tuple(counts)])

    def net_law(self, pairs: Sequence[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
        """Law of ``N^{c_a} - N^{c_b}`` for each ``(a, b)`` in ``pairs``.

        Every cycle must appear in exactly one pair.  Returns ``(offsets,
        law)`` with ``law[m_1, ..., m_p]`` the probability of net counts
        ``m_q - offsets[q]``.
        """
        used = [a for p in pairs for a in p]
        if sorted(used) != list(range(len(self.cycles))):
            raise ValueError("pairs must partition the watched cycles")
        J = self.joint
        # move axes so that pair q occupies axes (2q, 2q+1)
        J = np.transpose(J, used)
        offsets = np.array([self.caps[b] for _, b in pairs])
        shape = tuple(self.caps[a] + self.caps[b] + 1 for a, b in pairs)
        law = np.zeros(shape)
        for idx in np.argwhere(J > 0):
            cell = tuple(int(idx[2 * q] - idx[2 * q + 1] + offsets[q]) for q in range(len(pairs)))
            law[cell] += J[tuple(idx)]
        return offsets, law

    def to_csv(self) -> str:
        """Oracle dump: one header comment line, then ``n_1,...,n_r,probability``."""
        buf = io.StringIO()
        buf.write(
            f"# t={float(self.horizon)!r} caps={','.join(map(str, self.caps))} "
            f"eps_trunc={float(self.eps_trunc)!r} kind={self.kind} start={self.start}\n"
        )
        buf.write(",".join(f"n_{k + 1}" for k in range(len(self.cycles))) + ",probability\n")
        J = self.joint
        for idx in np.ndindex(J.shape):
            buf.write(",".join(map(str, idx)) + f",{float(J[idx])!r}\n")
        return buf.getvalue()


def _count_step(MT, popsT, A, caps):
    """One step of the (node, counts) DP; returns new array and overflow mass."""
    n_nodes = A.shape[0]
    flat = A.reshape(n_nodes, -1)
    new = (MT @ flat).reshape(A.shape)
    lost = 0.0
    for k, PT in enumerate(popsT):
        if PT.nnz == 0:
            continue
        B = (PT @ flat).reshape(A.shape)
        axis = k + 1
        head = [slice(None)] * A.ndim
        tail = [slice(None)] * A.ndim
        head[axis] = slice(1, None)
        tail[axis] = slice(None, -1)
        new[tuple(head)] += B[tuple(tail)]
        last = [slice(None)] * A.ndim
        last[axis] = caps[k]
        lost += float(B[tuple(last)].sum())
    return new, lost


def exact_count_dist(chain, cycles: Sequence[Cycle], horizon, caps, start: int | None = None) -> CountDistribution:
    """Exact joint law of the cycle counts at a fixed horizon.

    DTMC: ``horizon`` steps of the DP over (augmented node, count vector).
    CTMC: uniformization at rate ``1.05 * max_i q_i``; the Poisson series is
    cut once its tail falls below ``1e-12`` and the cut is reported.
    """
    cycles = tuple(Cycle(tuple(c)) for c in cycles)
    start = common_state(cycles, start)
    r = len(cycles)
    if isinstance(caps, (int, np.integer)):
        caps = (int(caps),) * r
    caps = tuple(int(c) for c in caps)
    if len(caps) != r or min(caps) < 1:
        raise ValueError("need one cap >= 1 per cycle")
    aug = build_augmented(chain, start, cycles)
    shape = (aug.n_nodes,) + tuple(c + 1 for c in caps)
    A0 = np.zeros(shape)
    A0[(0,) + (0,) * r] = 1.0

    if chain.kind == "dtmc":
        n = int(horizon)
        MT = aug.free_matrix().T.tocsr()
        popsT = [aug.pop_matrix(k).T.tocsr() for k in range(r)]
        A, lost = A0, 0.0
        for _ in range(n):
            A, dl = _count_step(MT, popsT, A, caps)
            lost += dl
        return CountDistribution(cycles, caps, n, "dtmc", start, aug.nodes, A, float(lost), float(lost), 0.0, None)

    t = float(horizon)
    if t < 0:
        raise ValueError("horizon must be >= 0")
    lam = uniformization_rate(chain)
    stay = sparse.diags(1.0 - aug.exit_rates / lam)
    MT = (stay + aug.free_matrix(1.0 / lam)).T.tocsr()
    popsT = [aug.pop_matrix(k, 1.0 / lam).T.tocsr() for k in range(r)]
    w, tail = _poisson_weights(lam * t)
    acc = _Kahan(shape)
    A, lost = A0, 0.0
    overflow = 0.0
    for n in range(len(w)):
        acc.add(w[n] * A)
        overflow += w[n] * lost
        if n + 1 < len(w):
            A, dl = _count_step(MT, popsT, A, caps)
            lost += dl
    eps = overflow + tail
    return CountDistribution(cycles, caps, t, "ctmc", start, aug.nodes, acc.total, float(eps), float(overflow), float(tail), lam)


def exact_generating(dist: CountDistribution, lam: Sequence[float]) -> tuple[float, float]:
    """``E exp(sum_k lam_k N^{c_k})`` over the lattice, and a truncation estimate.

    The estimate charges the dropped mass ``eps_trunc`` at the largest
    weight reachable just beyond the caps.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (len(dist.cycles),) or not np.all(np.isfinite(lam)):
        raise ValueError("need one finite lambda per cycle")
    caps = np.asarray(dist.caps)
    edge = float(np.sum(np.maximum(lam, 0.0) * (caps + 1)))
    if edge > 700:  # negative exponents only underflow, harmlessly
        raise Overflow("exp(lambda * cap) is not representable; lower the caps or |lambda|")
    J = dist.joint
    grids = np.meshgrid(*[np.arange(c + 1) for c in dist.caps], indexing="ij")
    expo = sum(l * g for l, g in zip(lam, grids))
    terms = (J * np.exp(expo)).ravel()
    value = math.fsum(terms.tolist())
    return value, dist.eps_trunc * math.exp(edge)
