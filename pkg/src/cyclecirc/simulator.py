"""Trajectory sampling, cycle event extraction and empirical circulations.

Randomness comes from numpy's Philox counter-based generator.  Replica
``k`` of a batch keyed by master seed ``s`` always draws from the stream
``SeedSequence(s, spawn_key=(k,))``, so batches are bitwise reproducible
whatever the number of worker processes.
"""

from __future__ import annotations

import bisect
import math
import os
import weakref
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .chain_model import CtmcSpec, DtmcSpec, embedded_chain
from .cycle_algebra import Cycle, CyclePopper, reversed_cycle
from .errors import AbsorbingState, HorizonExceeded, UnknownState

__all__ = [
    "make_rng",
    "resolve_workers",
    "Trajectory",
    "CycleEventLog",
    "CirculationSample",
    "BatchResult",
    "FormationBatch",
    "simulate_dtmc",
    "simulate_ctmc",
    "simulate",
    "extract_events",
    "circulations",
    "first_formation",
    "batch_sample",
    "batch_first_formation",
    "parallel_map_replicas",
]

_BLOCK = 512


def make_rng(seed, replica: int | None = None) -> np.random.Generator:
    """Philox generator for ``(seed, replica)``; a Generator passes through."""
    if isinstance(seed, np.random.Generator):
        return seed
    spawn_key = () if replica is None else (int(replica),)
    ss = np.random.SeedSequence(int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        env = os.environ.get("CYCLECIRC_THREADS")
        workers = int(env) if env else 1
    return max(1, int(workers))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A sampled path.

    For a DTMC ``jump_times`` is ``None`` and ``horizon`` is the step count.
    For a CTMC ``states[k]`` is the ``k``-th embedded state, entered at
    ``jump_times[k]`` (``jump_times[0] == 0``), and the path is observed on
    ``[0, horizon]``.
    """

    kind: str
    states: np.ndarray
    jump_times: np.ndarray | None
    horizon: float

    def __len__(self) -> int:
        return len(self.states)

    def event_time(self, step: int):
        if self.jump_times is None:
            return int(step)
        return float(self.jump_times[step])

    @property
    def final_state(self) -> int:
        return int(self.states[-1])


def _cumulative_rows(P: np.ndarray) -> list[list[float]]:
    rows = []
    for row in P:
        cum = np.cumsum(row)
        last = int(np.flatnonzero(row > 0)[-1])
        cum[last:] = math.inf  # guard against rounding in the final bin
        rows.append(cum.tolist())
    return rows


_TABLES: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _tables(chain):
    """Cumulative jump tables (and exit rates) of ``chain``, cached per object."""
    try:
        return _TABLES[chain]
    except KeyError:
        pass
    if chain.kind == "dtmc":
        entry = (_cumulative_rows(chain.P), None)
    else:
        entry = (_cumulative_rows(embedded_chain(chain).P), chain.exit_rates.tolist())
    _TABLES[chain] = entry
    return entry


def _rotation_lookup(cycles) -> dict:
    """Every rotation of every cycle, mapped to the canonical cycle."""
    out = {}
    for c in cycles:
        for k in range(len(c)):
            out[c.states[k:] + c.states[:k]] = c
    return out


def _check_start(chain, start: int) -> int:
    start = int(start)
    if not 0 <= start < chain.n_states:
        raise UnknownState(start)
    return start


def simulate_dtmc(chain: DtmcSpec, start: int, n_steps: int, seed=0) -> Trajectory:
    start = _check_start(chain, start)
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    rng = make_rng(seed)
    cum, _ = _tables(chain)
    states = np.empty(n_steps + 1, dtype=np.int64)
    states[0] = x = start
    u = rng.random(n_steps).tolist()
    for n in range(n_steps):
        x = bisect.bisect_right(cum[x], u[n])
        states[n + 1] = x
    return Trajectory("dtmc", states, None, n_steps)


def simulate_ctmc(chain: CtmcSpec, start: int, t_max: float, seed=0) -> Trajectory:
    """Jump-by-jump simulation on ``[0, t_max]``.

    Holding time in ``i`` is exponential with rate ``q_i``; the next state is
    drawn from the embedded chain.  The final, censored holding interval is
    kept implicitly: the last state is occupied until ``t_max``.
    """
    start = _check_start(chain, start)
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    rng = make_rng(seed)
    cum, rates = _tables(chain)
    if any(r <= 0 for r in rates):
        raise AbsorbingState(f"state {rates.index(min(rates))} has zero exit rate")
    states = [start]
    times = [0.0]
    x, t = start, 0.0
    # first block sized to the expected number of jumps, later blocks fixed
    block = min(_BLOCK, int(t_max * max(rates) * 1.25) + 16)
    while True:
        holds = rng.standard_exponential(block).tolist()
        us = rng.random(block).tolist()
        block = _BLOCK
        for e, u in zip(holds, us):
            t += e / rates[x]
            if t > t_max:
                return Trajectory(
                    "ctmc", np.array(states, dtype=np.int64), np.array(times), float(t_max)
                )
            x = bisect.bisect_right(cum[x], u)
            states.append(x)
            times.append(t)


def simulate(chain, start: int, horizon, seed=0) -> Trajectory:
    if chain.kind == "dtmc":
        return simulate_dtmc(chain, start, int(horizon), seed)
    return simulate_ctmc(chain, start, float(horizon), seed)


# --- cycle events ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CycleEventLog:
    """Forming events ``(time, cycle)`` in time order.

    ``watched`` is ``None`` when every popped cycle was recorded.
    """

    events: list
    horizon: float
    watched: frozenset | None = None
    kind: str = "dtmc"

    def covers(self, c: Cycle) -> bool:
        return self.watched is None or c in self.watched

    def times_of(self, c: Cycle) -> list:
        return [t for t, cyc in self.events if cyc == c]


def _events_continuous(states, traj: Trajectory, watched):
    walker = CyclePopper(int(states.max()) + 1, int(states[0]))
    lookup = None if watched is None else _rotation_lookup(watched)
    times = traj.jump_times.tolist() if traj.jump_times is not None else None
    out = []
    push = walker.push
    for n, x in enumerate(states.tolist()[1:], start=1):
        popped = push(x)
        if popped is not None:
            if lookup is None:
                c = Cycle(popped)
            else:
                c = lookup.get(popped)
                if c is None:
                    continue
            out.append((n if times is None else times[n], c))
    return out


def _events_restarting(states, traj: Trajectory, c: Cycle):
    # m-th forming time of c: the derived chain restarts at the state where
    # the (m-1)-th copy of c was completed.
    walker = CyclePopper(max(int(states.max()), max(c.states)) + 1, int(states[0]))
    rots = _rotation_lookup([c])
    out = []
    for n in range(1, len(states)):
        x = int(states[n])
        popped = walker.push(x)
        if popped is not None and popped in rots:
            out.append((traj.event_time(n), c))
            walker.reset(x)
    return out


def extract_events(traj: Trajectory, watched: Sequence[Cycle] = (), semantics: str = "stream") -> CycleEventLog:
    """Cycle-forming events of ``traj``.

    The derived chain is run once over the (embedded) state sequence and
    every popped cycle that is watched is recorded; with an empty
    ``watched`` list all popped cycles are recorded.

    ``semantics="restart"`` instead computes the successive forming times of
    each watched cycle with the derived chain restarted, from a fresh stack,
    after each formation of that cycle.  Both agree whenever every watched
    cycle passes through the initial state.
    """
    states = np.asarray(traj.states)
    watched = [Cycle(tuple(c)) for c in watched]
    if semantics not in ("stream", "restart"):
        raise ValueError("semantics must be 'stream' or 'restart'")
    if not watched:
        events = _events_continuous(states, traj, None)
        return CycleEventLog(events, traj.horizon, None, traj.kind)
    wset = frozenset(watched)
    x0 = int(states[0])
    if semantics == "stream" or all(x0 in c for c in wset):
        events = _events_continuous(states, traj, wset)
    else:
        events = []
        for c in sorted(wset):
            events.extend(_events_restarting(states, traj, c))
        events.sort(key=lambda ev: ev[0])
    return CycleEventLog(events, traj.horizon, wset, traj.kind)


@dataclass(frozen=True, eq=False)
class CirculationSample:
    """Counts ``N^c_t`` of each cycle and of its reversal on ``[0, t]``."""

    cycles: tuple[Cycle, ...]
    counts: np.ndarray
    reverse_counts: np.ndarray
    t: float

    @property
    def J(self) -> np.ndarray:
        return self.counts / self.t

    @property
    def J_reverse(self) -> np.ndarray:
        return self.reverse_counts / self.t

    @property
    def K(self) -> np.ndarray:
        return (self.counts - self.reverse_counts) / self.t

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "cycles": [list(c.states) for c in self.cycles],
            "N": self.counts.tolist(),
            "N_reverse": self.reverse_counts.tolist(),
            "J": self.J.tolist(),
            "K": self.K.tolist(),
        }


def circulations(log: CycleEventLog, cycles: Sequence[Cycle], t=None) -> CirculationSample:
    """Empirical circulations ``J^c_t = N^c_t / t`` and ``K^c_t = J^c_t - J^{c-}_t``."""
    t = log.horizon if t is None else t
    if not t > 0:
        raise ValueError("t must be positive")
    if t > log.horizon:
        raise HorizonExceeded(f"t={t} exceeds the observed horizon {log.horizon}")
    cycles = tuple(Cycle(tuple(c)) for c in cycles)
    for c in cycles:
        for needed in (c, reversed_cycle(c)):
            if not log.covers(needed):
                raise ValueError(f"event log was not extracted for cycle {needed.states}")
    tally: dict[Cycle, int] = {}
    for time, c in log.events:
        if time <= t:
            tally[c] = tally.get(c, 0) + 1
    counts = np.array([tally.get(c, 0) for c in cycles], dtype=np.int64)
    rev = np.array([tally.get(reversed_cycle(c), 0) for c in cycles], dtype=np.int64)
    return CirculationSample(cycles, counts, rev, float(t))


# --- first formation of a family -------------------------------------------------

def first_formation(chain, start: int, family: Sequence[Cycle], seed=0, max_jumps: int = 10**7):
    """Run until one cycle of ``family`` is formed.

    Returns ``(T, k, n)``: forming time (step count for a DTMC, real time for
    a CTMC), index of the cycle formed and number of transitions taken.
    ``k == -1`` if nothing was formed within ``max_jumps`` transitions.
    """
    start = _check_start(chain, start)
    rng = make_rng(seed)
    family = [Cycle(tuple(c)) for c in family]
    index = {c: k for k, c in enumerate(family)}
    lookup = {rot: index[c] for rot, c in _rotation_lookup(family).items()}
    S = chain.n_states
    walker = CyclePopper(S, start)
    x = start
    cum, rates = _tables(chain)
    t = 0.0
    n = 0
    block = 64
    while n < max_jumps:
        us = rng.random(block).tolist()
        holds = rng.standard_exponential(block).tolist() if rates is not None else None
        for b in range(block):
            if rates is not None:
                t += holds[b] / rates[x]
            x = bisect.bisect_right(cum[x], us[b])
            n += 1
            popped = walker.push(x)
            if popped is not None:
                k = lookup.get(popped)
                if k is not None:
                    return (n if rates is None else t), k, n
            if n >= max_jumps:
                break
        block = _BLOCK
    return math.inf, -1, n


# --- batches -------------------------------------------------------------------------

def _chunks(n: int, workers: int) -> list[tuple[int, int]]:
    size = max(1, math.ceil(n / workers))
    return [(lo, min(n, lo + size)) for lo in range(0, n, size)]


def parallel_map_replicas(fn: Callable, args: tuple, replicas: int, workers: int | None = None):
    """Evaluate ``fn(*args, lo, hi)`` over contiguous replica ranges.

    Results are concatenated in replica order, so the output does not depend
    on ``workers``.
    """
    workers = resolve_workers(workers)
    ranges = _chunks(replicas, workers)
    if workers == 1 or len(ranges) == 1:
        parts = [fn(*args, lo, hi) for lo, hi in ranges]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(ranges))) as pool:
            futures = [pool.submit(fn, *args, lo, hi) for lo, hi in ranges]
            parts = [f.result() for f in futures]
    out = []
    for p in parts:
        out.extend(p)
    return out


@dataclass(frozen=True, eq=False)
class BatchResult:
    cycles: tuple[Cycle, ...]
    horizon: float
    counts: np.ndarray          # (replicas, r)
    reverse_counts: np.ndarray  # (replicas, r)
    n_transitions: np.ndarray   # (replicas,)
    seed: int
    kind: str

    @property
    def replicas(self) -> int:
        return self.counts.shape[0]

    @property
    def J(self) -> np.ndarray:
        return self.counts / self.horizon

    @property
    def J_reverse(self) -> np.ndarray:
        return self.reverse_counts / self.horizon

    @property
    def K(self) -> np.ndarray:
        return (self.counts - self.reverse_counts) / self.horizon

    def samples(self) -> list[CirculationSample]:
        return [
            CirculationSample(self.cycles, self.counts[k], self.reverse_counts[k], self.horizon)
            for k in range(self.replicas)
        ]


def _sample_range(chain, start, horizon, cycles, seed, lo, hi):
    watch = list(cycles) + [reversed_cycle(c) for c in cycles]
    out = []
    for k in range(lo, hi):
        traj = simulate(chain, start, horizon, make_rng(seed, k))
        log = extract_events(traj, watch)
        cs = circulations(log, cycles, horizon)
        out.append((cs.counts, cs.reverse_counts, len(traj) - 1))
    return out


def batch_sample(
    chain,
    start: int,
    horizon,
    replicas: int,
    seed: int,
    cycles: Sequence[Cycle],
    workers: int | None = None,
) -> BatchResult:
    """Independent replicas of ``simulate -> extract_events -> circulations``."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    cycles = tuple(Cycle(tuple(c)) for c in cycles)
    rows = parallel_map_replicas(
        _sample_range, (chain, int(start), horizon, cycles, int(seed)), replicas, workers
    )
    r = len(cycles)
    counts = np.array([row[0] for row in rows], dtype=np.int64).reshape(replicas, r)
    rev = np.array([row[1] for row in rows], dtype=np.int64).reshape(replicas, r)
    jumps = np.array([row[2] for row in rows], dtype=np.int64)
    return BatchResult(cycles, horizon, counts, rev, jumps, int(seed), chain.kind)


@dataclass(frozen=True, eq=False)
class FormationBatch:
    family: tuple[Cycle, ...]
    times: np.ndarray   # forming time T of the family, per replica
    which: np.ndarray   # index of the cycle formed at T (-1: none)
    seed: int


def _formation_range(chain, start, family, seed, max_jumps, lo, hi):
    return [first_formation(chain, start, family, make_rng(seed, k), max_jumps)[:2] for k in range(lo, hi)]


def batch_first_formation(
    chain,
    start: int,
    family: Sequence[Cycle],
    replicas: int,
    seed: int,
    workers: int | None = None,
    max_jumps: int = 10**6,
) -> FormationBatch:
    family = tuple(Cycle(tuple(c)) for c in family)
    rows = parallel_map_replicas(
        _formation_range, (chain, int(start), family, int(seed), max_jumps), replicas, workers
    )
    times = np.array([r[0] for r in rows], dtype=float)
    which = np.array([r[1] for r in rows], dtype=np.int64)
    return FormationBatch(family, times, which, int(seed))
