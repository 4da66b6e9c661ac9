"""Cycles as rotation classes of circuits, and the derived (cycle-popping) chain.

A trajectory of a Markov chain is read left to right while a stack of
distinct states is maintained.  Whenever the incoming state is already on
the stack, everything above it is discarded and the discarded circuit is
reported as a completed cycle::

    >>> run_derived([1, 2, 3, 2, 4, 5, 2, 3, 1])
    [(3, Cycle(states=(2, 3))), (6, Cycle(states=(2, 4, 5))), (8, Cycle(states=(1, 2, 3)))]
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import BadCycle, DuplicateState, EmptyCycle, UnknownState

__all__ = [
    "Cycle",
    "DerivedState",
    "PopResult",
    "canonicalize",
    "reversed_cycle",
    "is_similar",
    "derived_step",
    "run_derived",
    "derived_path",
    "CyclePopper",
    "parse_cycles",
    "format_cycle",
]


def _rotate_min_first(states: Sequence[int]) -> tuple[int, ...]:
    k = min(range(len(states)), key=states.__getitem__)
    return tuple(states[k:]) + tuple(states[:k])


@dataclass(frozen=True, order=True)
class Cycle:
    """A cycle ``(i_1, ..., i_s)`` stored with its smallest state first.

    Any rotation may be passed to the constructor; ``Cycle((2, 3, 1))`` and
    ``Cycle((1, 2, 3))`` compare and hash equal.
    """

    states: tuple[int, ...]

    def __post_init__(self):
        raw = tuple(int(s) for s in self.states)
        if not raw:
            raise EmptyCycle("a cycle needs at least one state")
        if len(set(raw)) != len(raw):
            raise DuplicateState(f"cycle states must be distinct, got {raw}")
        object.__setattr__(self, "states", _rotate_min_first(raw))

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    def __contains__(self, state) -> bool:
        return state in self.states

    def edges(self) -> list[tuple[int, int]]:
        """Directed edges ``i_1->i_2, ..., i_s->i_1`` of the circuit."""
        s = self.states
        return [(s[k], s[(k + 1) % len(s)]) for k in range(len(s))]

    def reversed(self) -> "Cycle":
        return reversed_cycle(self)

    def rotated_to(self, state: int) -> tuple[int, ...]:
        """The circuit written so that it starts at ``state``."""
        k = self.states.index(state)
        return self.states[k:] + self.states[:k]

    @property
    def state_set(self) -> frozenset[int]:
        return frozenset(self.states)


def canonicalize(states: Iterable[int]) -> Cycle:
    return Cycle(tuple(states))


def reversed_cycle(c: Cycle) -> Cycle:
    """``(i_1, i_2, ..., i_s) -> (i_1, i_s, ..., i_2)``."""
    s = c.states
    return Cycle((s[0],) + tuple(reversed(s[1:])))


def is_similar(a: Cycle, b: Cycle) -> bool:
    """Same length and same set of states."""
    return len(a) == len(b) and a.state_set == b.state_set


# --- derived chain ------------------------------------------------------------

@dataclass(frozen=True)
class DerivedState:
    """Stack of distinct states; ``mask`` has bit ``i`` set iff ``i`` is on it."""

    stack: tuple[int, ...]
    mask: int = field(default=-1, compare=False, repr=False)

    def __post_init__(self):
        stack = tuple(int(s) for s in self.stack)
        if not stack:
            raise EmptyCycle("derived state must hold at least one state")
        mask = 0
        for s in stack:
            if s < 0:
                raise UnknownState(s)
            if mask >> s & 1:
                raise DuplicateState(f"derived stack repeats state {s}: {stack}")
            mask |= 1 << s
        object.__setattr__(self, "stack", stack)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def initial(cls, state: int) -> "DerivedState":
        return cls((state,))

    @property
    def top(self) -> int:
        return self.stack[-1]

    def __contains__(self, state: int) -> bool:
        return state >= 0 and bool(self.mask >> state & 1)

    def __len__(self) -> int:
        return len(self.stack)


@dataclass(frozen=True)
class PopResult:
    next: DerivedState
    popped: Cycle | None


def derived_step(y: DerivedState, next_state: int, n_states: int | None = None) -> PopResult:
    """Push ``next_state`` onto ``y``; pop a cycle if it is already present."""
    next_state = int(next_state)
    if next_state < 0 or (n_states is not None and next_state >= n_states):
        raise UnknownState(next_state)
    if next_state not in y:
        return PopResult(DerivedState(y.stack + (next_state,)), None)
    k = y.stack.index(next_state)
    return PopResult(DerivedState(y.stack[: k + 1]), Cycle(y.stack[k:]))


class CyclePopper:
    """Mutable derived-chain walker used on hot simulation paths.

    ``push`` returns the popped circuit as a tuple (in trajectory order,
    not canonicalized) or ``None``.  ``pos[i]`` is the stack position of
    state ``i`` or ``-1``.
    """

    __slots__ = ("stack", "pos")

    def __init__(self, n_states: int, start: int):
        self.pos = [-1] * n_states
        self.stack = [start]
        self.pos[start] = 0

    def reset(self, state: int) -> None:
        for s in self.stack:
            self.pos[s] = -1
        self.stack = [state]
        self.pos[state] = 0

    def push(self, state: int):
        k = self.pos[state]
        if k < 0:
            self.pos[state] = len(self.stack)
            self.stack.append(state)
            return None
        popped = tuple(self.stack[k:])
        for s in self.stack[k + 1:]:
            self.pos[s] = -1
        del self.stack[k + 1:]
        return popped


def run_derived(trajectory: Sequence[int]) -> list[tuple[int, Cycle]]:
    """Every cycle popped along ``trajectory`` with the step at which it formed."""
    if len(trajectory) == 0:
        raise ValueError("trajectory must be nonempty")
    traj = [int(x) for x in trajectory]
    if min(traj) < 0:
        raise UnknownState(min(traj))
    walker = CyclePopper(max(traj) + 1, traj[0])
    events = []
    for n in range(1, len(traj)):
        popped = walker.push(traj[n])
        if popped is not None:
            events.append((n, Cycle(popped)))
    return events


def derived_path(trajectory: Sequence[int]) -> list[tuple[int, ...]]:
    """Stacks ``Y_0, Y_1, ...`` of the derived chain along ``trajectory``."""
    y = DerivedState.initial(int(trajectory[0]))
    stacks = [y.stack]
    for x in trajectory[1:]:
        y = derived_step(y, x).next
        stacks.append(y.stack)
    return stacks


# --- text syntax ----------------------------------------------------------------

_CYCLE_RE = re.compile(r"\(([^()]*)\)")


def parse_cycles(text: str, labels: Mapping[str, int] | Sequence[str]) -> list[Cycle]:
    """Parse ``"(E,ES,EP),(E,EP,ES)"`` into canonical cycles.

    ``labels`` is either the ordered label list of the chain or a
    label -> index mapping.
    """
    index = labels if isinstance(labels, Mapping) else {lab: i for i, lab in enumerate(labels)}
    text = text.strip()
    if not text:
        return []
    leftover = _CYCLE_RE.sub("", text).replace(",", "").strip()
    if leftover:
        raise BadCycle(f"cannot parse cycle list {text!r}: stray text {leftover!r}")
    cycles = []
    for body in _CYCLE_RE.findall(text):
        names = [tok.strip() for tok in body.split(",") if tok.strip()]
        if not names:
            raise BadCycle(f"empty cycle in {text!r}")
        try:
            idx = [index[name] for name in names]
        except KeyError as exc:
            raise UnknownState(exc.args[0], where=f"cycle ({body})") from None
        try:
            cycles.append(Cycle(tuple(idx)))
        except DuplicateState:
            raise BadCycle(f"cycle ({body}) repeats a state") from None
    return cycles


def format_cycle(c: Cycle, labels: Sequence[str] | None = None) -> str:
    names = [labels[s] if labels is not None else str(s) for s in c.states]
    return "(" + ",".join(names) + ")"
