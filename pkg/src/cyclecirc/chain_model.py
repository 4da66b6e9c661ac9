"""Validated finite DTMC/CTMC specifications and per-cycle scalars."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .cycle_algebra import Cycle, reversed_cycle
from .errors import (
    BadDiagonal,
    ChainError,
    NegativeRate,
    NonStochasticRow,
    Reducible,
    UnknownState,
    ZeroForwardStrength,
)

__all__ = [
    "TOL",
    "StateSpace",
    "DtmcSpec",
    "CtmcSpec",
    "ChainSpec",
    "CycleScalar",
    "ReversibilityResult",
    "validate_chain",
    "cycle_strength",
    "cycle_affinity",
    "cycle_scalar",
    "kolmogorov_reversible",
    "embedded_chain",
    "stationary_distribution",
]

TOL = 1e-12


@dataclass(frozen=True)
class StateSpace:
    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        if not labels:
            raise ChainError("state space must be nonempty")
        if len(set(labels)) != len(labels):
            dupes = sorted({x for x in labels if labels.count(x) > 1})
            raise ChainError(f"state labels must be distinct, repeated: {dupes}")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def of_size(cls, n: int) -> "StateSpace":
        return cls(tuple(str(i) for i in range(n)))

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
            if 0 <= label < self.size:
                return int(label)
            raise UnknownState(label)
        try:
            return self.labels.index(str(label))
        except ValueError:
            raise UnknownState(label) from None

    def __len__(self) -> int:
        return self.size


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class _ChainBase:
    states: StateSpace
    matrix: np.ndarray = field(repr=False)

    kind = "?"

    @property
    def n_states(self) -> int:
        return self.states.size

    @property
    def labels(self) -> tuple[str, ...]:
        return self.states.labels

    def weight(self, i: int, j: int) -> float:
        """One-step weight entering cycle strengths: ``p_ij`` or ``q_ij``."""
        return float(self.matrix[i, j])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "states": list(self.labels),
            "matrix": [[float(v) for v in row] for row in self.matrix],
        }


@dataclass(frozen=True, eq=False)
class DtmcSpec(_ChainBase):
    kind = "dtmc"

    @property
    def P(self) -> np.ndarray:
        return self.matrix


@dataclass(frozen=True, eq=False)
class CtmcSpec(_ChainBase):
    kind = "ctmc"

    @property
    def Q(self) -> np.ndarray:
        return self.matrix

    @property
    def exit_rates(self) -> np.ndarray:
        """``q_i = -q_ii``."""
        return -np.diag(self.matrix)


ChainSpec = DtmcSpec | CtmcSpec


def _support_components(support: np.ndarray) -> list[list[int]]:
    n, labels = connected_components(support.astype(np.int8), directed=True, connection="strong")
    comps: list[list[int]] = [[] for _ in range(n)]
    for i, lab in enumerate(labels):
        comps[lab].append(i)
    return sorted(comps)


def validate_chain(
    raw,
    kind: str,
    labels: Sequence[str] | None = None,
    *,
    renormalize: bool = False,
) -> DtmcSpec | CtmcSpec:
    """Validate a square matrix as an irreducible DTMC or CTMC.

    Parameters
    ----------
    raw : (S, S) array_like
        Transition probabilities (``kind="dtmc"``) or rates (``kind="ctmc"``).
    kind : {"dtmc", "ctmc"}
    labels : sequence of str, optional
        State names, defaults to ``"0", "1", ...``.
    renormalize : bool
        DTMC: divide each row by its sum.  CTMC: recompute the diagonal from
        the off-diagonal rates.  Never applied unless requested.

    Raises
    ------
    NonStochasticRow, NegativeRate, BadDiagonal, Reducible
    """
    m = np.array(raw, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ChainError(f"matrix must be square, got shape {m.shape}")
    S = m.shape[0]
    if S < 2:
        raise ChainError("need at least 2 states")
    if not np.all(np.isfinite(m)):
        raise ChainError("matrix has non-finite entries")
    states = StateSpace(tuple(labels)) if labels is not None else StateSpace.of_size(S)
    if states.size != S:
        raise ChainError(f"{states.size} labels for a {S}x{S} matrix")

    if kind == "dtmc":
        neg = np.argwhere(m < 0)
        if len(neg):
            i, j = neg[0]
            raise NegativeRate(int(i), int(j), float(m[i, j]))
        sums = m.sum(axis=1)
        if renormalize:
            if np.any(sums <= 0):
                raise NonStochasticRow(int(np.argmin(sums)), float(sums.min()))
            m = m / sums[:, None]
            sums = m.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > TOL)
        if len(bad):
            raise NonStochasticRow(int(bad[0]), float(sums[bad[0]]))
        support = m > 0
        cls = DtmcSpec
    elif kind == "ctmc":
        off = m.copy()
        np.fill_diagonal(off, 0.0)
        neg = np.argwhere(off < 0)
        if len(neg):
            i, j = neg[0]
            raise NegativeRate(int(i), int(j), float(m[i, j]))
        expected = -off.sum(axis=1)
        if renormalize:
            np.fill_diagonal(m, expected)
        for i in range(S):
            if abs(m[i, i] - expected[i]) > TOL:
                raise BadDiagonal(i, float(m[i, i]), float(expected[i]))
        support = off > 0
        cls = CtmcSpec
    else:
        raise ChainError(f"kind must be 'dtmc' or 'ctmc', got {kind!r}")

    comps = _support_components(support)
    if len(comps) > 1:
        raise Reducible(comps)
    return cls(states, _frozen(m))


def embedded_chain(chain: CtmcSpec) -> DtmcSpec:
    """Jump chain ``p_ij = q_ij / q_i`` (``i != j``) of a CTMC."""
    Q = chain.Q
    rates = chain.exit_rates
    P = Q / rates[:, None]
    np.fill_diagonal(P, 0.0)
    return DtmcSpec(chain.states, _frozen(P))


def stationary_distribution(chain: DtmcSpec | CtmcSpec) -> np.ndarray:
    """Unique invariant law, from the null space of ``P^T - I`` or ``Q^T``."""
    S = chain.n_states
    A = chain.matrix.T - np.eye(S) if chain.kind == "dtmc" else chain.matrix.T.copy()
    # replace one balance equation by the normalization
    A = np.vstack([A[:-1], np.ones(S)])
    b = np.zeros(S)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


# --- cycle scalars ------------------------------------------------------------

def _as_circuit(chain, c) -> tuple[int, ...]:
    states = c.states if isinstance(c, Cycle) else tuple(int(s) for s in c)
    for s in states:
        if not 0 <= s < chain.n_states:
            raise UnknownState(s)
    return states


def cycle_strength(chain: DtmcSpec | CtmcSpec, c) -> float:
    """Product of one-step weights around ``c``.

    ``c`` may be a :class:`Cycle` or any rotation of a raw circuit.
    """
    states = _as_circuit(chain, c)
    M = chain.matrix
    s = len(states)
    prod = 1.0
    for k in range(s):
        prod *= M[states[k], states[(k + 1) % s]]
    return float(prod)


def _log_strength(chain, states: Sequence[int]) -> float:
    M = chain.matrix
    s = len(states)
    total = 0.0
    for k in range(s):
        w = M[states[k], states[(k + 1) % s]]
        if w <= 0:
            return -math.inf
        total += math.log(w)
    return total


def cycle_affinity(chain: DtmcSpec | CtmcSpec, c) -> float:
    """``log(gamma^c / gamma^{c-})``; ``math.inf`` when the reverse is impossible.

    Evaluated as a difference of log-strengths so long cycles cannot
    overflow or underflow.
    """
    states = _as_circuit(chain, c)
    fwd = _log_strength(chain, states)
    if fwd == -math.inf:
        raise ZeroForwardStrength(f"cycle {states} has zero strength")
    rev_states = (states[0],) + tuple(reversed(states[1:]))
    bwd = _log_strength(chain, rev_states)
    if bwd == -math.inf:
        return math.inf
    return fwd - bwd


@dataclass(frozen=True)
class CycleScalar:
    strength: float
    affinity: float  # may be +/- inf


def cycle_scalar(chain, c: Cycle) -> CycleScalar:
    g = cycle_strength(chain, c)
    g_rev = cycle_strength(chain, reversed_cycle(Cycle(tuple(c))))
    if g > 0:
        rho = cycle_affinity(chain, c)
    elif g_rev > 0:
        rho = -math.inf
    else:
        rho = math.nan
    return CycleScalar(g, rho)


@dataclass(frozen=True)
class ReversibilityResult:
    reversible: bool
    witness: Cycle | None = None

    def __bool__(self) -> bool:
        return self.reversible


def iter_cycles(n_states: int, max_len: int, min_len: int = 1):
    """All cycles on ``n_states`` states with ``min_len <= length <= max_len``.

    Each rotation class is produced once, as its canonical representative.
    """
    for length in range(min_len, max_len + 1):
        for first in range(n_states):
            rest = range(first + 1, n_states)
            for tail in itertools.permutations(rest, length - 1):
                yield Cycle((first,) + tail)


def kolmogorov_reversible(
    chain: DtmcSpec | CtmcSpec,
    max_cycle_len: int | None = None,
    rtol: float = 1e-10,
) -> ReversibilityResult:
    """Kolmogorov's cycle criterion.

    Checks ``gamma^c == gamma^{c-}`` for every cycle of length at most
    ``max_cycle_len`` (default: all states).  Cycles of length 1 and 2 are
    their own reversals and are skipped.  On failure the first offending
    cycle is returned as the witness.
    """
    S = chain.n_states
    L = S if max_cycle_len is None else min(int(max_cycle_len), S)
    support = chain.matrix > 0
    for c in iter_cycles(S, L, min_len=3):
        edges = c.edges()
        fwd_ok = all(support[i, j] for i, j in edges)
        bwd_ok = all(support[j, i] for i, j in edges)
        if not (fwd_ok or bwd_ok):
            continue
        if fwd_ok != bwd_ok:
            return ReversibilityResult(False, c if fwd_ok else reversed_cycle(c))
        g = cycle_strength(chain, c)
        g_rev = cycle_strength(chain, reversed_cycle(c))
        if not math.isclose(g, g_rev, rel_tol=rtol, abs_tol=0.0):
            return ReversibilityResult(False, c)
    return ReversibilityResult(True, None)
