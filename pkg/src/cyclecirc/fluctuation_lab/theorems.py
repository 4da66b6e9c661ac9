"""Finite-time fluctuation identities for cycle circulations.

All checks start the chain at a state shared by the watched cycles and
look at the net counts ``N^c_t - N^{c-}_t`` of each cycle against its
reversal.  In ``exact`` mode the joint law comes from
:func:`cyclecirc.exact_engine.exact_count_dist` with equal caps for ``c``
and ``c-``; the lattice is then closed under swapping the two counts, so
the identities hold on it exactly and only rounding and the dropped mass
``eps_trunc`` separate the two sides.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from ..chain_model import cycle_affinity, cycle_strength
from ..cycle_algebra import Cycle, is_similar, reversed_cycle
from ..exact_engine import common_state, exact_count_dist, exact_generating
from ..errors import DegenerateTail, InfiniteAffinity, NotSimilar, Overflow
from ..simulator import batch_sample
from .reports import input_digest, library_version

__all__ = [
    "FtSection",
    "FtReport",
    "affinities",
    "transient_ft",
    "integral_ft",
    "klsp_check",
    "generating_symmetry_check",
    "ft_report",
    "ROUNDING_FLOOR",
]

# relative rounding allowance for quantities assembled from ~1e2 positive
# uniformization terms; far below any truncation bound that matters
ROUNDING_FLOOR = 1e-12
EXP_LIMIT = 700.0


@dataclass
class FtSection:
    name: str
    mode: str
    passed: bool
    summary: dict
    cells: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "verdict": "pass" if self.passed else "reject",
            "summary": self.summary,
            "cells": self.cells,
            "skipped": self.skipped,
        }


@dataclass
class FtReport:
    kind: str
    mode: str
    cycles: tuple[Cycle, ...]
    start: int
    t: float
    sections: list[FtSection]
    params: dict = field(default_factory=dict)
    digest: str = ""
    version: str = field(default_factory=library_version)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.sections)

    def to_dict(self) -> dict:
        return {
            "test": "fluctuation_theorems",
            "kind": self.kind,
            "mode": self.mode,
            "cycles": [list(c.states) for c in self.cycles],
            "start": self.start,
            "t": self.t,
            "sections": [s.to_dict() for s in self.sections],
            "verdict": "pass" if self.passed else "reject",
            "params": self.params,
            "input_digest": self.digest,
            "version": self.version,
        }


def affinities(chain, cycles: Sequence[Cycle]) -> tuple[list[int], list[float], list[dict]]:
    """Split ``cycles`` into those with finite affinity and skipped ones."""
    active, rhos, skipped = [], [], []
    for k, c in enumerate(cycles):
        g, gr = cycle_strength(chain, c), cycle_strength(chain, reversed_cycle(c))
        if g > 0 and gr > 0:
            active.append(k)
            rhos.append(cycle_affinity(chain, c))
        else:
            skipped.append({"cycle": list(c.states), "reason": "infinite affinity: one direction has zero strength"})
    return active, rhos, skipped


def _setup(chain, cycles, start):
    cycles = tuple(Cycle(tuple(c)) for c in cycles)
    if not cycles:
        raise ValueError("empty cycle family")
    start = common_state(cycles, start)
    active, rhos, skipped = affinities(chain, cycles)
    return cycles, start, active, np.array(rhos), skipped


def _net_law(chain, cycles, active, start, t, caps):
    watch = [cycles[k] for k in active] + [reversed_cycle(cycles[k]) for k in active]
    r = len(active)
    dist = exact_count_dist(chain, watch, t, (int(caps),) * (2 * r), start)
    offsets, law = dist.net_law([(q, r + q) for q in range(r)])
    return dist, offsets, law


def _net_grid(offsets, shape):
    return np.meshgrid(*[np.arange(s) - o for s, o in zip(shape, offsets)], indexing="ij")


def _require_active(active, skipped):
    if not active:
        raise InfiniteAffinity("every watched cycle has infinite affinity: " + str(skipped))


# --- transient FT -------------------------------------------------------------------

def transient_ft(
    chain,
    cycles: Sequence[Cycle],
    t,
    start: int | None = None,
    mode: str = "exact",
    *,
    caps: int = 20,
    replicas: int = 10_000,
    seed: int = 0,
    workers: int | None = None,
    alpha: float = 0.01,
    slope_tol: float = 1e-8,
) -> FtSection:
    """``P(K^{c_k} = n/t, ...) / P(K^{c_k} = -n/t, ...) = exp(n rho^{c_k})``.

    Exact mode compares every lattice cell with its mirror image in
    coordinate ``k`` and fits the slope of the log-ratio against ``n``.
    """
    cycles, start, active, rhos, skipped = _setup(chain, cycles, start)
    _require_active(active, skipped)
    if mode == "exact":
        dist, offsets, law = _net_law(chain, cycles, active, start, t, caps)
        eps = dist.eps_trunc
        grids = _net_grid(offsets, law.shape)
        cells, ok, slopes = [], True, []
        for q, k in enumerate(active):
            ns, lrs = [], []
            for idx in zip(*np.nonzero(law > 0)):
                n = int(grids[q][idx])
                if n <= 0:
                    continue
                mirror = list(idx)
                mirror[q] = 2 * offsets[q] - idx[q]
                mirror = tuple(mirror)
                if not 0 <= mirror[q] < law.shape[q] or law[mirror] <= 0:
                    continue
                a, b = law[idx], law[mirror]
                lr = math.log(a) - math.log(b)
                target = n * rhos[q]
                bound = 10 * eps * (1 / a + 1 / b) + ROUNDING_FLOOR * max(1.0, abs(target))
                res = abs(lr - target)
                good = res <= bound
                ok &= good
                ns.append(n)
                lrs.append(lr)
                cells.append({"cycle": list(cycles[k].states),
                              "net": [int(grids[p][idx]) for p in range(len(active))],
                              "log_ratio": lr, "target": target, "residual": res, "bound": bound,
                              "passed": bool(good)})
            ns_a, lr_a = np.array(ns, float), np.array(lrs)
            slope = float(ns_a @ lr_a / (ns_a @ ns_a)) if len(ns) else math.nan
            intercept = float(np.polyfit(ns_a, lr_a, 1)[1]) if len(set(ns)) > 1 else math.nan
            good = len(ns) == 0 or abs(slope - rhos[q]) <= slope_tol
            ok &= good
            slopes.append({"cycle": list(cycles[k].states), "rho": rhos[q], "slope": slope,
                           "intercept": intercept, "n_cells": len(ns), "passed": bool(good)})
        max_res = max((c["residual"] for c in cells), default=0.0)
        summary = {"eps_trunc": eps, "caps": caps, "max_residual": max_res, "slopes": slopes}
        return FtSection("transient", "exact", bool(ok), summary, cells, skipped)

    if mode != "mc":
        raise ValueError("mode must be 'exact' or 'mc'")
    batch = batch_sample(chain, start, t, replicas, seed, [cycles[k] for k in active], workers)
    net = batch.counts - batch.reverse_counts
    rows = []
    for q, k in enumerate(active):
        vals, cnt = np.unique(net[:, q], return_counts=True)
        freq = dict(zip(vals.tolist(), cnt.tolist()))
        for n in sorted(v for v in freq if v > 0):
            a, b = freq.get(n, 0), freq.get(-n, 0)
            if a >= 5 and b >= 5:
                lr = math.log(a / b)
                se = math.sqrt(1 / a + 1 / b)
                rows.append({"cycle": list(cycles[k].states), "net": n, "counts": [a, b], "log_ratio": lr,
                             "target": n * rhos[q], "z": (lr - n * rhos[q]) / se})
    z_crit = stats.norm.isf(alpha / (2 * max(1, len(rows))))
    for row in rows:
        row["passed"] = bool(abs(row["z"]) <= z_crit)
    ok = all(r["passed"] for r in rows)
    summary = {"replicas": replicas, "seed": seed, "tested_cells": len(rows), "z_critical": z_crit}
    return FtSection("transient", "mc", ok, summary, rows, skipped)


# --- integral FT ---------------------------------------------------------------------

def integral_ft(
    chain,
    cycles: Sequence[Cycle],
    t,
    start: int | None = None,
    mode: str = "exact",
    *,
    caps: int = 20,
    replicas: int = 10_000,
    seed: int = 0,
    workers: int | None = None,
    alpha: float = 0.01,
) -> FtSection:
    """``E exp(-t sum_k K^{c_k}_t rho^{c_k}) = 1``."""
    cycles, start, active, rhos, skipped = _setup(chain, cycles, start)
    if not active:
        return FtSection("integral", mode, True, {"estimate": 1.0, "note": "no finite-affinity cycle"}, [], skipped)
    if mode == "exact":
        dist, offsets, law = _net_law(chain, cycles, active, start, t, caps)
        grids = _net_grid(offsets, law.shape)
        expo = -sum(rho * g for rho, g in zip(rhos, grids))
        if float(np.max(expo)) > EXP_LIMIT:
            raise Overflow("exp(-rho * n) overflows on this lattice; lower the caps")
        value = math.fsum((law * np.exp(expo)).ravel().tolist())
        eps = dist.eps_trunc
        bound = 10 * eps
        ok = abs(value - 1.0) <= bound
        summary = {"estimate": value, "deviation": value - 1.0, "bound": bound, "eps_trunc": eps,
                   "caps": caps, "t": float(t)}
        return FtSection("integral", "exact", bool(ok), summary, [], skipped)
    if mode != "mc":
        raise ValueError("mode must be 'exact' or 'mc'")
    batch = batch_sample(chain, start, t, replicas, seed, [cycles[k] for k in active], workers)
    net = (batch.counts - batch.reverse_counts).astype(float)
    w = np.exp(-(net @ rhos))
    mean = math.fsum(w.tolist()) / len(w)
    se = float(np.std(w, ddof=1) / math.sqrt(len(w)))
    z = stats.norm.isf(alpha / 2)
    ess = float(w.sum() ** 2 / (w @ w))
    if ess < 10:
        warnings.warn(f"integral estimate dominated by {ess:.1f} effective replicas", DegenerateTail, stacklevel=2)
    ci = [mean - z * se, mean + z * se]
    ok = ci[0] <= 1.0 <= ci[1]
    summary = {"estimate": mean, "stderr": se, "ci": ci, "confidence": 1 - alpha, "ess": ess,
               "replicas": replicas, "seed": seed, "t": float(t)}
    return FtSection("integral", "mc", bool(ok), summary, [], skipped)


# --- KLS symmetry of the net-count generating function -------------------------------

def _lambda_vectors(lambdas, r):
    lam = np.asarray(lambdas, dtype=float)
    if lam.ndim == 1:
        lam = lam[:, None] * np.ones((1, r))
    if lam.ndim != 2 or lam.shape[1] != r or lam.shape[0] == 0:
        raise ValueError(f"lambda grid must be 1-D or have {r} columns")
    return lam


def _h(law, grids, lam) -> float:
    expo = sum(l * g for l, g in zip(lam, grids))
    if float(np.max(expo[law > 0])) > EXP_LIMIT:
        raise Overflow("exp(lambda * n) overflows on this lattice; lower the caps or |lambda|")
    return math.fsum((law * np.exp(expo)).ravel().tolist())


def klsp_check(
    chain,
    cycles: Sequence[Cycle],
    t,
    lambdas,
    start: int | None = None,
    *,
    caps: int = 20,
) -> FtSection:
    """``h_t(..., lambda_k, ...) = h_t(..., -(lambda_k + rho^{c_k}), ...)`` exactly.

    ``h_t`` is the generating function of the net counts.  A 1-D grid is
    applied to every coordinate at once; the map is then checked one
    coordinate at a time.
    """
    cycles, start, active, rhos, skipped = _setup(chain, cycles, start)
    _require_active(active, skipped)
    dist, offsets, law = _net_law(chain, cycles, active, start, t, caps)
    grids = _net_grid(offsets, law.shape)
    lam = _lambda_vectors(lambdas, len(active))
    eps = dist.eps_trunc
    bound = 10 * eps
    rows, ok = [], True
    for vec in lam:
        h0 = _h(law, grids, vec)
        for q, k in enumerate(active):
            mapped = vec.copy()
            mapped[q] = -(vec[q] + rhos[q])
            h1 = _h(law, grids, mapped)
            res = abs(h0 - h1) / max(abs(h0), abs(h1))
            good = res <= bound + ROUNDING_FLOOR
            ok &= good
            rows.append({"lambda": vec.tolist(), "cycle": list(cycles[k].states), "mapped": mapped.tolist(),
                         "h": h0, "h_mapped": h1, "rel_residual": res, "passed": bool(good)})
    summary = {"eps_trunc": eps, "bound": bound, "rounding_floor": ROUNDING_FLOOR,
               "max_rel_residual": max(r["rel_residual"] for r in rows), "caps": caps}
    return FtSection("klsp", "exact", bool(ok), summary, rows, skipped)


def generating_symmetry_check(
    chain,
    cycles: Sequence[Cycle],
    pair: tuple[int, int],
    t,
    lambdas,
    start: int | None = None,
    *,
    caps: int = 20,
) -> FtSection:
    """``g_t(.., l_k, .., l_l, ..) = g_t(.., l_l - L, .., l_k + L, ..)``, ``L = log(gamma_k/gamma_l)``.

    ``lambdas`` has one column per watched cycle.
    """
    cycles = tuple(Cycle(tuple(c)) for c in cycles)
    start = common_state(cycles, start)
    k, l = pair
    if not is_similar(cycles[k], cycles[l]):
        raise NotSimilar(f"cycles {cycles[k].states} and {cycles[l].states} are not similar")
    gk, gl = cycle_strength(chain, cycles[k]), cycle_strength(chain, cycles[l])
    if gk <= 0 or gl <= 0:
        raise InfiniteAffinity("both cycles of the pair need positive strength")
    shift = math.log(gk) - math.log(gl)
    dist = exact_count_dist(chain, cycles, t, caps, start)
    lam = _lambda_vectors(lambdas, len(cycles))
    eps = dist.eps_trunc
    rows, ok = [], True
    for vec in lam:
        mapped = vec.copy()
        mapped[k], mapped[l] = vec[l] - shift, vec[k] + shift
        g0, _ = exact_generating(dist, vec)
        g1, _ = exact_generating(dist, mapped)
        res = abs(g0 - g1) / max(abs(g0), abs(g1))
        good = res <= 10 * eps + ROUNDING_FLOOR
        ok &= good
        rows.append({"lambda": vec.tolist(), "mapped": mapped.tolist(), "g": g0, "g_mapped": g1,
                     "rel_residual": res, "passed": bool(good)})
    summary = {"eps_trunc": eps, "bound": 10 * eps, "rounding_floor": ROUNDING_FLOOR, "shift": shift,
               "max_rel_residual": max(r["rel_residual"] for r in rows), "caps": caps}
    return FtSection("generating_symmetry", "exact", bool(ok), summary, rows, [])


def ft_report(
    chain,
    cycles: Sequence[Cycle],
    t,
    start: int | None = None,
    mode: str = "exact",
    *,
    caps: int = 20,
    lambdas=(-1.0, -0.5, 0.0, 0.5, 1.0),
    replicas: int = 10_000,
    seed: int = 0,
    workers: int | None = None,
    alpha: float = 0.01,
) -> FtReport:
    """Transient, integral and (exact mode only) KLS checks in one report."""
    cycles = tuple(Cycle(tuple(c)) for c in cycles)
    start = common_state(cycles, start)
    active, _, skipped = affinities(chain, cycles)
    kw = dict(caps=caps, replicas=replicas, seed=seed, workers=workers, alpha=alpha)
    sections = []
    if active:
        sections.append(transient_ft(chain, cycles, t, start, mode, **kw))
    sections.append(integral_ft(chain, cycles, t, start, mode, **kw))
    if active and mode == "exact":
        sections.append(klsp_check(chain, cycles, t, lambdas, start, caps=caps))
    if not active:
        sections.insert(0, FtSection("transient", mode, True, {"note": "no finite-affinity cycle"}, [], skipped))
    params = {"caps": caps, "lambdas": list(np.asarray(lambdas, float).ravel()), "alpha": alpha}
    if mode == "mc":
        params.update(replicas=replicas, seed=seed)
    digest = input_digest(chain.to_dict(), cycles, start, float(t), mode, params)
    return FtReport(chain.kind, mode, cycles, start, float(t), sections, params, digest)
