"""Haldane-type checks on first formation of a cycle family.

For a family of similar cycles the probability of forming ``c_k`` first is
proportional to its strength, and the forming time is independent of which
cycle wins.  ``exact`` mode checks this on the oracle tables of
:mod:`cyclecirc.exact_engine`; ``mc`` mode turns it into calibrated tests
on simulated replicas.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from ..chain_model import cycle_strength
from ..cycle_algebra import Cycle, is_similar
from ..exact_engine import (
    absorption_probabilities,
    common_state,
    exact_forming_cdf,
    exact_forming_dist,
)
from ..errors import NotSimilar
from ..simulator import FormationBatch, batch_first_formation
from .reports import input_digest, library_version

__all__ = [
    "HaldaneReport",
    "IndependenceResult",
    "haldane_test",
    "independence_test",
    "EXACT_RTOL",
    "MASS_FLOOR",
]

EXACT_RTOL = 1e-10
MASS_FLOOR = 1e-12


@dataclass
class IndependenceResult:
    mode: str
    statistic: float      # max |joint - product| (exact) or chi-square (mc)
    p_value: float | None
    dof: int | None
    passed: bool
    note: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class HaldaneReport:
    kind: str
    mode: str
    family: tuple[Cycle, ...]
    start: int
    strengths: list[float]
    pairs: list[dict]
    conditional: list[dict]
    independence: IndependenceResult | None
    passed: bool
    params: dict = field(default_factory=dict)
    digest: str = ""
    version: str = field(default_factory=library_version)

    def to_dict(self) -> dict:
        return {
            "test": "haldane",
            "kind": self.kind,
            "mode": self.mode,
            "family": [list(c.states) for c in self.family],
            "start": self.start,
            "strengths": self.strengths,
            "pairs": self.pairs,
            "conditional": self.conditional,
            "independence": None if self.independence is None else self.independence.to_dict(),
            "verdict": "pass" if self.passed else "reject",
            "params": self.params,
            "input_digest": self.digest,
            "version": self.version,
        }


def _prepare(family, start, require):
    family = tuple(Cycle(tuple(c)) for c in family)
    if not family:
        raise ValueError("empty cycle family")
    if require == "similar":
        for a, b in itertools.combinations(family, 2):
            if not is_similar(a, b):
                raise NotSimilar(f"cycles {a.states} and {b.states} are not similar")
        if start is None:
            start = common_state(family)
        start = int(start)
    elif require == "common":
        start = common_state(family, start)
    else:
        raise ValueError("require must be 'similar' or 'common'")
    pairs = [(k, l) for k, l in itertools.combinations(range(len(family)), 2) if is_similar(family[k], family[l])]
    return family, start, pairs


def _rel(a: float, b: float) -> float:
    if a == b:
        return 0.0
    return abs(a - b) / max(abs(b), 1e-300)


def _default_times(chain) -> np.ndarray:
    scale = 1.0 / float(np.min(chain.exit_rates))
    return np.round(scale * np.array([0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]), 12)


def _exact(chain, family, start, pairs, n_max, times):
    gam = [cycle_strength(chain, c) for c in family]
    pair_rows, cond_rows = [], []
    if chain.kind == "dtmc":
        n_max = n_max or max(200, 4 * chain.n_states)
        fd = exact_forming_dist(chain, family, n_max, start)
        absorb, table, grid = fd.absorption, fd.buckets, np.arange(n_max + 1)
        extra = {"tail_mass": fd.tail, "n_max": n_max}
    else:
        times = _default_times(chain) if times is None else np.asarray(times, dtype=float)
        fc = exact_forming_cdf(chain, family, times, start)
        absorb, table, grid = fc.absorption, fc.cdf, times
        extra = {"times": times.tolist(), "poisson_tail": fc.truncation.tolist()}
    ok = True
    for k, l in pairs:
        row = {"pair": [k, l], "cycles": [list(family[k].states), list(family[l].states)]}
        if gam[l] == 0 or absorb[l] == 0:
            row.update(skipped=True, note="reference cycle has zero strength")
            pair_rows.append(row)
            continue
        target = gam[k] / gam[l]
        est = absorb[k] / absorb[l]
        mask = (table[k] > MASS_FLOOR) & (table[l] > MASS_FLOOR)
        dev = max((_rel(a / b, target) for a, b in zip(table[k][mask], table[l][mask])), default=0.0)
        err = _rel(est, target)
        good = err <= EXACT_RTOL and dev <= EXACT_RTOL
        ok &= good
        row.update(target=target, estimate=est, rel_error=err, max_rel_dev_over_time=dev, passed=good)
        pair_rows.append(row)
        ck = table[k] / absorb[k] if absorb[k] > 0 else np.zeros_like(table[k])
        cl = table[l] / absorb[l]
        diff = float(np.max(np.abs(ck - cl)))
        good = diff <= EXACT_RTOL
        ok &= good
        cond_rows.append({"pair": [k, l], "max_abs_diff": diff, "passed": good})
    return ok, pair_rows, cond_rows, (absorb, table), extra


def _exact_independence(absorb, table) -> IndependenceResult:
    if table.shape[0] == 1:
        return IndependenceResult("exact", 0.0, None, None, True, "single cycle: trivially independent")
    first = table.sum(axis=0)
    res = float(np.max(np.abs(table - first[None, :] * absorb[:, None])))
    return IndependenceResult("exact", res, None, None, res <= EXACT_RTOL)


def _chi_square_independence(batch: FormationBatch, alpha: float) -> IndependenceResult:
    r = len(batch.family)
    ok = batch.which >= 0
    times, which = batch.times[ok], batch.which[ok]
    present = [k for k in range(r) if np.any(which == k)]
    if len(present) < 2:
        return IndependenceResult("mc", 0.0, 1.0, 0, True, "fewer than two cycles observed")
    for bins in range(10, 1, -1):
        edges = np.unique(np.quantile(times, np.linspace(0, 1, bins + 1)[1:-1]))
        cls = np.searchsorted(edges, times, side="right")
        table = np.array([[np.sum((which == k) & (cls == b)) for b in range(len(edges) + 1)] for k in present])
        table = table[:, table.sum(axis=0) > 0]
        if table.shape[1] < 2:
            continue
        expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
        if expected.min() >= 5 or bins == 2:
            break
    if table.shape[1] < 2:
        return IndependenceResult("mc", 0.0, 1.0, 0, True, "forming time is degenerate")
    chi2, p, dof, _ = stats.chi2_contingency(table)
    return IndependenceResult("mc", float(chi2), float(p), int(dof), bool(p >= alpha))


def _mc(chain, family, start, pairs, batch: FormationBatch, alpha):
    gam = [cycle_strength(chain, c) for c in family]
    R = len(batch.which)
    counts = np.array([np.sum(batch.which == k) for k in range(len(family))])
    oracle = absorption_probabilities(chain, family, start)
    n_ks = sum(1 for k, l in pairs if counts[k] >= 2 and counts[l] >= 2)
    n_tests = max(1, len([p for p in pairs if gam[p[0]] > 0 and gam[p[1]] > 0]) + n_ks)
    z_crit = stats.norm.isf(alpha / (2 * n_tests))
    ok = True
    per_cycle = []
    for k in range(len(family)):
        p_hat = counts[k] / R
        sigma = math.sqrt(max(oracle[k] * (1 - oracle[k]), 1e-300) / R)
        per_cycle.append(
            {"cycle": list(family[k].states), "count": int(counts[k]), "estimate": p_hat,
             "oracle": float(oracle[k]), "sigma": sigma, "z": (p_hat - oracle[k]) / sigma}
        )
    pair_rows, cond_rows = [], []
    for k, l in pairs:
        row = {"pair": [k, l], "cycles": [list(family[k].states), list(family[l].states)]}
        if gam[k] == 0 or gam[l] == 0 or counts[k] == 0 or counts[l] == 0:
            row.update(skipped=True, note="a cycle of the pair was never formed or has zero strength")
            pair_rows.append(row)
            continue
        target = math.log(gam[k] / gam[l])
        est = math.log(counts[k] / counts[l])
        se = math.sqrt(1.0 / counts[k] + 1.0 / counts[l])  # delta method, multinomial counts
        z = (est - target) / se
        good = abs(z) <= z_crit
        ok &= good
        row.update(
            target=math.exp(target), estimate=math.exp(est),
            ci=[math.exp(est - z_crit * se), math.exp(est + z_crit * se)], z=z, passed=bool(good),
        )
        pair_rows.append(row)
        tk = batch.times[batch.which == k]
        tl = batch.times[batch.which == l]
        if len(tk) >= 2 and len(tl) >= 2:
            res = stats.ks_2samp(tk, tl)
            good = res.pvalue >= alpha / n_tests
            ok &= good
            cond_rows.append({"pair": [k, l], "ks_statistic": float(res.statistic),
                              "p_value": float(res.pvalue), "n": [len(tk), len(tl)], "passed": bool(good)})
        else:
            cond_rows.append({"pair": [k, l], "skipped": True, "note": "fewer than 2 samples"})
    extra = {"per_cycle": per_cycle, "unformed": int(np.sum(batch.which < 0)),
             "bonferroni_tests": n_tests, "z_critical": z_crit}
    return ok, pair_rows, cond_rows, extra


def haldane_test(
    chain,
    family: Sequence[Cycle],
    start: int | None = None,
    mode: str = "exact",
    *,
    require: str = "similar",
    n_max: int | None = None,
    times: Sequence[float] | None = None,
    replicas: int = 10_000,
    seed: int = 0,
    workers: int | None = None,
    alpha: float = 0.01,
    max_jumps: int = 10**6,
) -> HaldaneReport:
    """Compare first-formation statistics of ``family`` with strength ratios.

    ``require="similar"`` demands pairwise similar cycles (any start);
    ``require="common"`` only needs a state shared by all cycles and then
    compares the similar pairs within the family, starting from that state.
    """
    family, start, pairs = _prepare(family, start, require)
    gam = [cycle_strength(chain, c) for c in family]
    params = {"require": require, "alpha": alpha}
    if mode == "exact":
        ok, pair_rows, cond_rows, (absorb, table), extra = _exact(chain, family, start, pairs, n_max, times)
        indep = _exact_independence(absorb, table) if require == "similar" else None
        params.update(extra)
    elif mode == "mc":
        batch = batch_first_formation(chain, start, family, replicas, seed, workers, max_jumps)
        ok, pair_rows, cond_rows, extra = _mc(chain, family, start, pairs, batch, alpha)
        indep = _chi_square_independence(batch, alpha) if require == "similar" else None
        params.update(extra, replicas=replicas, seed=seed)
    else:
        raise ValueError("mode must be 'exact' or 'mc'")
    if indep is not None:
        ok &= indep.passed
    digest = input_digest(chain.to_dict(), family, start, mode, {k: v for k, v in params.items() if k in ("replicas", "seed", "n_max", "times", "require")})
    return HaldaneReport(chain.kind, mode, family, start, gam, pair_rows, cond_rows, indep, bool(ok), params, digest)


def independence_test(
    chain,
    family: Sequence[Cycle],
    start: int | None = None,
    mode: str = "exact",
    *,
    n_max: int | None = None,
    times: Sequence[float] | None = None,
    replicas: int = 10_000,
    seed: int = 0,
    workers: int | None = None,
    alpha: float = 0.01,
) -> IndependenceResult:
    """Independence of the family forming time and the identity of the winner."""
    family, start, pairs = _prepare(family, start, "similar")
    if mode == "exact":
        _, _, _, (absorb, table), _ = _exact(chain, family, start, pairs, n_max, times)
        return _exact_independence(absorb, table)
    if mode == "mc":
        if len(family) == 1:
            return IndependenceResult("mc", 0.0, 1.0, 0, True, "single cycle: trivially independent")
        batch = batch_first_formation(chain, start, family, replicas, seed, workers)
        return _chi_square_independence(batch, alpha)
    raise ValueError("mode must be 'exact' or 'mc'")
