"""Sample-path entropy production and its cycle decomposition.

Every transition of a trajectory either closes a cycle, and is then
accounted for by that cycle's affinity, or still sits on the derived-chain
stack at time ``t``.  Hence ``t * (W_t - cycle part)`` is the boundary term
plus the edge log-ratios along the final stack, which is bounded
independently of ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from ..chain_model import CtmcSpec, cycle_affinity, stationary_distribution
from ..cycle_algebra import Cycle, CyclePopper
from ..errors import InfiniteEntropyProduction
from ..simulator import Trajectory, make_rng, parallel_map_replicas, simulate
from .reports import input_digest, library_version

__all__ = [
    "EntropyDecomposition",
    "EntropyExperiment",
    "entropy_decomposition",
    "entropy_experiment",
    "entropy_production_rate",
    "max_edge_log_ratio",
]

# stream offset for the initial-state draws, disjoint from trajectory streams
_START_STREAM = 1 << 40


@dataclass(frozen=True)
class EntropyDecomposition:
    t: float
    W: float             # W_t
    cycle_part: float    # (1/2) sum_c K^c_t rho^c over popped cycles
    residual: float      # W^r_t = W_t - cycle_part
    boundary: float      # log p_0(X_0) - log p_t(X_t)
    stack_term: float    # sum of edge log-ratios along the final stack
    n_cycles: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _log_ratio(Q: np.ndarray, i: int, j: int) -> float:
    if Q[j, i] <= 0:
        raise InfiniteEntropyProduction(f"transition {i}->{j} has no reverse rate")
    return math.log(Q[i, j]) - math.log(Q[j, i])


def entropy_decomposition(traj: Trajectory, chain: CtmcSpec, p0=None, t: float | None = None) -> EntropyDecomposition:
    """``W_t``, its cycle part and the remainder ``W^r_t`` for one path.

    ``p0`` defaults to the stationary law; ``p_t = p0 exp(Q t)``.
    """
    if chain.kind != "ctmc":
        raise ValueError("entropy production is defined here for CTMCs")
    t = float(traj.horizon if t is None else t)
    if not 0 < t <= traj.horizon:
        raise ValueError("need 0 < t <= trajectory horizon")
    Q = chain.Q
    p0 = stationary_distribution(chain) if p0 is None else np.asarray(p0, dtype=float)
    if p0.shape != (chain.n_states,) or abs(p0.sum() - 1) > 1e-9 or np.any(p0 < 0):
        raise ValueError("p0 must be a probability vector over the states")
    pt = p0 @ expm(Q * t)
    n = int(np.searchsorted(traj.jump_times, t, side="right"))  # jumps within [0, t], incl. X_0
    states = traj.states[:n].tolist()
    x0, xt = states[0], states[-1]
    if p0[x0] <= 0 or pt[xt] <= 0:
        raise InfiniteEntropyProduction("zero probability at a trajectory endpoint")
    boundary = math.log(p0[x0]) - math.log(pt[xt])

    edge_terms = []
    cycle_terms = []
    walker = CyclePopper(chain.n_states, x0)
    rho_cache: dict[Cycle, float] = {}
    for a, b in zip(states[:-1], states[1:]):
        edge_terms.append(_log_ratio(Q, a, b))
        popped = walker.push(b)
        if popped is not None:
            c = Cycle(popped)
            if c not in rho_cache:
                rho_cache[c] = cycle_affinity(chain, c)
            cycle_terms.append(rho_cache[c])
    stack = walker.stack
    stack_term = math.fsum(_log_ratio(Q, a, b) for a, b in zip(stack[:-1], stack[1:]))
    W = (boundary + math.fsum(edge_terms)) / t
    cycle_part = math.fsum(cycle_terms) / t
    return EntropyDecomposition(t, W, cycle_part, W - cycle_part, boundary, stack_term, len(cycle_terms))


def entropy_production_rate(chain: CtmcSpec) -> float:
    """Stationary rate ``(1/2) sum_ij (pi_i q_ij - pi_j q_ji) log(q_ij / q_ji)``."""
    pi = stationary_distribution(chain)
    Q = chain.Q
    S = chain.n_states
    terms = []
    for i in range(S):
        for j in range(S):
            if i == j or (Q[i, j] == 0 and Q[j, i] == 0):
                continue
            if Q[i, j] == 0 or Q[j, i] == 0:
                return math.inf
            terms.append(0.5 * (pi[i] * Q[i, j] - pi[j] * Q[j, i]) * (math.log(Q[i, j]) - math.log(Q[j, i])))
    return math.fsum(terms)


def max_edge_log_ratio(chain: CtmcSpec) -> float:
    Q = chain.Q
    S = chain.n_states
    vals = [abs(math.log(Q[i, j]) - math.log(Q[j, i]))
            for i in range(S) for j in range(S) if i != j and Q[i, j] > 0 and Q[j, i] > 0]
    return max(vals, default=0.0)


@dataclass
class EntropyExperiment:
    """Replicated decomposition at several horizons from the stationary law."""

    times: np.ndarray
    W: np.ndarray            # (replicas, len(times))
    cycle_part: np.ndarray
    residual: np.ndarray
    fitted_C: float          # least squares of mean |W^r_t| against 1/t
    C_bound: float           # S * max |log q_ij / q_ji|
    W_mean: float            # at the largest horizon
    W_stderr: float
    cycle_mean: float
    ep_rate: float
    z_cycle: float           # (W_mean - cycle_mean) / W_stderr
    z_rate: float            # (W_mean - ep_rate) / W_stderr
    passed: bool
    seed: int
    digest: str = ""
    version: str = field(default_factory=library_version)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "times", "fitted_C", "C_bound", "W_mean", "W_stderr", "cycle_mean", "ep_rate",
            "z_cycle", "z_rate", "seed")}
        out.update(test="entropy_decomposition", replicas=int(self.W.shape[0]),
                   mean_abs_residual=np.abs(self.residual).mean(axis=0),
                   verdict="pass" if self.passed else "reject", input_digest=self.digest,
                   version=self.version)
        return out


def _entropy_range(chain, times, seed, lo, hi):
    pi = stationary_distribution(chain)
    rows = []
    for k in range(lo, hi):
        x0 = int(make_rng(seed, _START_STREAM + k).choice(chain.n_states, p=pi))
        traj = simulate(chain, x0, float(times[-1]), make_rng(seed, k))
        parts = [entropy_decomposition(traj, chain, pi, float(s)) for s in times]
        rows.append([(d.W, d.cycle_part, d.residual) for d in parts])
    return rows


def entropy_experiment(
    chain: CtmcSpec,
    times,
    replicas: int = 200,
    seed: int = 0,
    workers: int | None = None,
    n_sigma: float = 4.0,
) -> EntropyExperiment:
    """Long-run behaviour of ``W_t`` and of the remainder ``W^r_t``.

    Replicas start from the stationary law.  Passes when the fitted constant
    in ``|W^r_t| ~ C / t`` is at most ``S * max |log q_ij/q_ji|`` and the
    mean of ``W_t`` at the largest horizon lies within ``n_sigma`` standard
    errors of the mean cycle part.
    """
    times = np.sort(np.asarray(times, dtype=float))
    rows = parallel_map_replicas(_entropy_range, (chain, times, int(seed)), replicas, workers)
    arr = np.array(rows)  # (replicas, times, 3)
    W, cyc, res = arr[..., 0], arr[..., 1], arr[..., 2]
    mean_abs = np.abs(res).mean(axis=0)
    inv = 1.0 / times
    C = float(mean_abs @ inv / (inv @ inv))
    bound = chain.n_states * max_edge_log_ratio(chain)
    w_mean = float(W[:, -1].mean())
    w_se = float(W[:, -1].std(ddof=1) / math.sqrt(replicas))
    c_mean = float(cyc[:, -1].mean())
    ep = entropy_production_rate(chain)
    z_cycle = (w_mean - c_mean) / w_se
    z_rate = (w_mean - ep) / w_se
    passed = C <= bound and abs(z_cycle) <= n_sigma
    digest = input_digest(chain.to_dict(), times, replicas, seed)
    return EntropyExperiment(times, W, cyc, res, C, bound, w_mean, w_se, c_mean, ep, z_cycle, z_rate,
                             bool(passed), int(seed), digest)
