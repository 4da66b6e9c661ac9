"""Exception hierarchy shared by all cyclecirc modules."""

from __future__ import annotations


class CycleCircError(Exception):
    """Base class for every error raised by this package."""


# --- chain validation -------------------------------------------------------

class ChainError(CycleCircError, ValueError):
    """A transition matrix failed validation."""


class NonStochasticRow(ChainError):
    def __init__(self, row: int, total: float):
        self.row = row
        self.total = total
        super().__init__(f"row {row} sums to {total!r}, expected 1")


class NegativeRate(ChainError):
    def __init__(self, row: int, col: int, value: float):
        self.row = row
        self.col = col
        self.value = value
        super().__init__(f"entry ({row}, {col}) is negative: {value!r}")


class BadDiagonal(ChainError):
    def __init__(self, row: int, value: float, expected: float):
        self.row = row
        self.value = value
        self.expected = expected
        super().__init__(
            f"diagonal entry ({row}, {row}) is {value!r}, expected {expected!r}"
        )


class Reducible(ChainError):
    def __init__(self, components: list[list[int]]):
        self.components = components
        super().__init__(
            f"chain is reducible: {len(components)} strongly connected "
            f"components {components}"
        )


class UnknownState(CycleCircError, KeyError):
    def __init__(self, state, where: str | None = None):
        self.state = state
        self.where = where
        msg = f"unknown state {state!r}"
        if where:
            msg = f"{where}: {msg}"
        super().__init__(msg)

    def __str__(self) -> str:  # KeyError would repr() the message
        return self.args[0]


class ZeroForwardStrength(CycleCircError, ValueError):
    """Affinity requested for a cycle that can never be formed."""


# --- cycles -----------------------------------------------------------------

class CycleError(CycleCircError, ValueError):
    pass


class DuplicateState(CycleError):
    pass


class EmptyCycle(CycleError):
    pass


# --- simulation / exact engine ----------------------------------------------

class AbsorbingState(CycleCircError, RuntimeError):
    pass


class HorizonExceeded(CycleCircError, ValueError):
    pass


class NoCommonState(CycleCircError, ValueError):
    pass


class StateInTaboo(CycleCircError, ValueError):
    pass


class Overflow(CycleCircError, OverflowError):
    pass


# --- fluctuation checks -----------------------------------------------------

class NotSimilar(CycleCircError, ValueError):
    pass


class InfiniteAffinity(CycleCircError, ValueError):
    pass


class InfiniteEntropyProduction(CycleCircError, ValueError):
    pass


class EmptyGrid(CycleCircError, ValueError):
    pass


class DegenerateTail(UserWarning):
    """Exponential-mean estimate dominated by a handful of replicas."""


# --- config parsing ---------------------------------------------------------

class ParseError(CycleCircError, ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(loc + message)


class BadCycle(ParseError):
    pass
