"""SCGF estimation, grid Legendre-Fenchel transforms and rate-function symmetry.

The rate function of the empirical circulations is estimated as the
discrete Legendre-Fenchel transform of a Monte Carlo estimate of the
scaled cumulant generating function ``(1/t) log E exp(t lambda . J_t)``.
Its symmetries are asymptotic statements, so the check in
:func:`rate_symmetry_check` is statistical: residuals are compared with
bootstrap error bars, not with zero.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ..chain_model import cycle_affinity, cycle_strength
from ..cycle_algebra import Cycle, is_similar, reversed_cycle
from ..errors import DegenerateTail, EmptyGrid, InfiniteAffinity, NotSimilar
from ..exact_engine import common_state
from ..simulator import BatchResult, batch_sample, make_rng
from .reports import input_digest, library_version

__all__ = [
    "ScgfEstimate",
    "RateFunctionEstimate",
    "RateSymmetryReport",
    "observable_matrix",
    "scgf_estimate",
    "legendre_fenchel",
    "convexity_certificate",
    "rate_symmetry_check",
    "MIN_ESS",
]

MIN_ESS = 10.0
BOOTSTRAP_STREAM = 2**31 - 1  # RNG stream key kept apart from replica streams


@dataclass
class ScgfEstimate:
    lambdas: np.ndarray   # (G, d)
    values: np.ndarray    # (G,)
    stderr: np.ndarray    # (G,)
    ess: np.ndarray       # (G,) effective number of replicas behind each value
    t: float
    replicas: int
    observable: str

    @property
    def degenerate(self) -> np.ndarray:
        return self.ess < MIN_ESS

    def to_dict(self) -> dict:
        return {"lambdas": self.lambdas, "values": self.values, "stderr": self.stderr, "ess": self.ess,
                "t": self.t, "replicas": self.replicas, "observable": self.observable}


@dataclass
class RateFunctionEstimate:
    x: np.ndarray          # (M, d)
    values: np.ndarray     # (M,)
    maximizer: np.ndarray  # (M, d) grid lambda attaining the max
    min_second_difference: float | None
    convex: bool | None

    def to_dict(self) -> dict:
        return {"x": self.x, "values": self.values, "maximizer": self.maximizer,
                "min_second_difference": self.min_second_difference, "convex": self.convex}


def _as_points(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise EmptyGrid(f"{name} grid is empty")
    return a


def observable_matrix(samples, observable: str = "J") -> tuple[np.ndarray, float]:
    """Per-replica counts ``t * J_t`` (or ``t * K_t``) and the horizon."""
    if isinstance(samples, BatchResult):
        counts, rev, t = samples.counts, samples.reverse_counts, float(samples.horizon)
    else:
        samples = list(samples)
        if not samples:
            raise ValueError("no samples")
        t = float(samples[0].t)
        if any(s.t != t for s in samples):
            raise ValueError("samples must share the horizon t")
        counts = np.array([s.counts for s in samples])
        rev = np.array([s.reverse_counts for s in samples])
    if observable == "J":
        return counts.astype(float), t
    if observable == "K":
        return (counts - rev).astype(float), t
    raise ValueError("observable must be 'J' or 'K'")


def _scgf_from_matrix(X: np.ndarray, lam: np.ndarray, t: float):
    A = X @ lam.T                     # (R, G) exponents lambda . N
    R = X.shape[0]
    values = (logsumexp(A, axis=0) - math.log(R)) / t
    w = np.exp(A - A.max(axis=0, keepdims=True))
    s1, s2 = w.sum(axis=0), (w * w).sum(axis=0)
    ess = s1 * s1 / s2
    mean = s1 / R
    sd = np.sqrt(np.maximum(s2 / R - mean * mean, 0.0) * R / max(R - 1, 1))
    stderr = sd / (mean * math.sqrt(R)) / t   # delta method for log of a mean
    zero = np.all(lam == 0, axis=1)
    values[zero] = 0.0
    stderr[zero] = 0.0
    return values, stderr, ess


def scgf_estimate(samples, lambdas, observable: str = "J", *, warn: bool = True) -> ScgfEstimate:
    """``(1/t) log mean_replicas exp(lambda . N_t)`` on a grid of ``lambda``.

    ``N_t = t J_t`` (or ``t K_t``).  Emits :class:`DegenerateTail` when fewer
    than ten effective replicas carry the exponential mean.
    """
    X, t = observable_matrix(samples, observable)
    lam = _as_points(lambdas, "lambda")
    if lam.shape[1] != X.shape[1]:
        raise ValueError(f"lambda has {lam.shape[1]} components, observable has {X.shape[1]}")
    if X.shape[0] < 100:
        warnings.warn("fewer than 100 replicas; SCGF estimates will be crude", DegenerateTail, stacklevel=2)
    values, stderr, ess = _scgf_from_matrix(X, lam, t)
    if warn and np.any(ess < MIN_ESS):
        bad = int(np.sum(ess < MIN_ESS))
        warnings.warn(f"{bad} grid points rest on fewer than {MIN_ESS:g} effective replicas",
                      DegenerateTail, stacklevel=2)
    return ScgfEstimate(lam, values, stderr, ess, t, X.shape[0], observable)


def convexity_certificate(x: np.ndarray, values: np.ndarray, shape: Sequence[int] | None = None) -> float | None:
    """Smallest divided second difference along every grid axis.

    ``x`` must be a 1-D sorted grid, or a tensor grid with ``shape``.
    Returns ``None`` when the layout is not a regular grid.
    """
    x = _as_points(x, "x")
    if x.shape[1] == 1:
        order = np.argsort(x[:, 0], kind="stable")
        xs, vs = x[order, 0], values[order]
        if len(xs) < 3:
            return math.inf
        slopes = np.diff(vs) / np.diff(xs)
        return float(np.min(np.diff(slopes) / (0.5 * (xs[2:] - xs[:-2]))))
    if shape is None:
        return None
    V = values.reshape(shape)
    P = x.reshape(tuple(shape) + (x.shape[1],))
    worst = math.inf
    for axis in range(len(shape)):
        if shape[axis] < 3:
            continue
        coord = np.take(P, axis, axis=-1)
        dx = np.diff(coord, axis=axis)
        slopes = np.diff(V, axis=axis) / dx
        lo = [slice(None)] * len(shape)
        hi = [slice(None)] * len(shape)
        lo[axis], hi[axis] = slice(None, -1), slice(1, None)
        mid = 0.5 * (dx[tuple(lo)] + dx[tuple(hi)])
        worst = min(worst, float(np.min(np.diff(slopes, axis=axis) / mid)))
    return worst


def legendre_fenchel(lambdas, f, xs, *, x_shape: Sequence[int] | None = None, tol: float = 1e-12) -> RateFunctionEstimate:
    """``I(x) = max_g (lambda_g . x - f(lambda_g))`` over a finite grid.

    The result is a maximum of affine functions, hence convex; the returned
    certificate checks this numerically on the ``x`` grid.
    """
    lam = _as_points(lambdas, "lambda")
    x = _as_points(xs, "x")
    f = np.asarray(f, dtype=float).ravel()
    if f.shape[0] != lam.shape[0]:
        raise ValueError("f must have one value per lambda grid point")
    if not np.all(np.isfinite(f)):
        raise ValueError("f must be finite on the grid")
    if lam.shape[1] != x.shape[1]:
        raise ValueError("lambda and x grids have different dimensions")
    A = x @ lam.T - f[None, :]
    best = np.argmax(A, axis=1)
    values = A[np.arange(len(x)), best]
    cert = convexity_certificate(x, values, x_shape)
    if cert is None:
        return RateFunctionEstimate(x, values, lam[best], cert, None)
    # a divided second difference turns rounding of size delta into ~4 delta / h^2
    scale = float(np.max(np.abs(x)) * np.max(np.abs(lam)) * lam.shape[1] + np.max(np.abs(f)))
    noise = 8 * np.finfo(float).eps * scale / _min_spacing(x) ** 2
    return RateFunctionEstimate(x, values, lam[best], cert, bool(cert >= -(tol + noise)))


def _min_spacing(x: np.ndarray) -> float:
    gaps = [np.diff(np.unique(x[:, d])) for d in range(x.shape[1])]
    gaps = np.concatenate([g[g > 0] for g in gaps]) if gaps else np.array([])
    return float(np.min(gaps)) if gaps.size else 1.0


# --- rate-function symmetry ---------------------------------------------------------------

@dataclass
class RateSymmetryReport:
    mode: str
    cycles: tuple[Cycle, ...]
    start: int
    t: float
    replicas: int
    correction: float        # rho (net mode) or log(gamma_k / gamma_l) (pair mode)
    x: np.ndarray
    mirrored: np.ndarray
    rate: np.ndarray
    rate_mirrored: np.ndarray
    residual: np.ndarray
    error_bar: np.ndarray      # bootstrap sd of I(x) and I(mirror x), in quadrature
    residual_sd: np.ndarray    # bootstrap sd of the residual itself
    trivial: np.ndarray      # points where the identity holds by construction
    masked_lambdas: int
    median_abs_residual: float
    median_error_bar: float
    factor: float
    passed: bool
    params: dict = field(default_factory=dict)
    digest: str = ""
    version: str = field(default_factory=library_version)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "mode", "start", "t", "replicas", "correction", "x", "mirrored", "rate", "rate_mirrored",
            "residual", "error_bar", "residual_sd", "trivial", "masked_lambdas", "median_abs_residual",
            "median_error_bar", "factor", "params")}
        out.update(test="rate_symmetry", cycles=[list(c.states) for c in self.cycles],
                   verdict="pass" if self.passed else "reject", input_digest=self.digest,
                   version=self.version, kind="statistical")
        return out

    def csv_rows(self):
        for q in range(len(self.x)):
            yield (*self.x[q], *self.mirrored[q], self.rate[q], self.rate_mirrored[q],
                   self.residual[q], self.error_bar[q])


def _default_width(corr: float) -> float:
    # half the symmetry shift; a balanced cycle still needs a nondegenerate grid
    return abs(corr) / 2 if corr != 0 else 0.5


def _net_setup(chain, c: Cycle, lam_width, n_lambda):
    rho = cycle_affinity(chain, c)
    if not math.isfinite(rho):
        raise InfiniteAffinity(f"cycle {c.states} has infinite affinity")
    # grid symmetric under lambda -> -(lambda + rho): centred on -rho/2
    lam = np.linspace(-rho - lam_width, lam_width, n_lambda)[:, None]
    return rho, lam


def _pair_setup(ell, lam_width, n_lambda):
    # (a, b) -> (b - ell, a + ell) keeps u = a + b and sends v = a - b to -v - 2 ell
    v = np.linspace(-2 * ell - lam_width, lam_width, n_lambda)
    u = np.linspace(-lam_width, lam_width, max(3, n_lambda // 4) | 1)
    U, V = np.meshgrid(u, v, indexing="ij")
    return np.column_stack([(U + V).ravel() / 2, (U - V).ravel() / 2])


def _mirror_mask(lam, ok, mapping):
    """Keep a grid point only if its image under the symmetry is kept too."""
    keep = ok.copy()
    for g in range(len(lam)):
        target = mapping(lam[g])
        d = np.max(np.abs(lam - target), axis=1)
        h = int(np.argmin(d))
        if d[h] > 1e-9 or not ok[h]:
            keep[g] = False
    return keep


def rate_symmetry_check(
    chain,
    cycles: Sequence[Cycle],
    t: float = 200.0,
    start: int | None = None,
    *,
    mode: str = "net",
    pair: tuple[int, int] | None = None,
    replicas: int = 10_000,
    seed: int = 0,
    workers: int | None = None,
    lam_width: float | None = None,
    n_lambda: int = 41,
    x_grid=None,
    n_x: int = 9,
    bootstrap: int = 200,
    factor: float = 2.0,
    batch: BatchResult | None = None,
) -> RateSymmetryReport:
    """Statistical check of the large-deviation symmetry of circulations.

    ``mode="net"``: ``I_K(-x) - rho x = I_K(x)`` for the net circulation
    of ``cycles[0]``.  ``mode="pair"``: ``I(x_l, x_k) - L (x_k - x_l) =
    I(x_k, x_l)`` for a similar pair, ``L = log(gamma_k / gamma_l)``; the
    default pair is a cycle and its reversal.

    The SCGF is estimated at horizon ``t`` on a lambda grid closed under the
    symmetry; grid points with fewer than ten effective replicas are
    dropped together with their mirror image.  Error bars are bootstrap
    standard deviations of the two sides of the identity, combined in
    quadrature.  The check passes when the median absolute residual is at
    most ``factor`` times the median error bar, ignoring points where the
    identity holds by construction.
    """
    cycles = tuple(Cycle(tuple(c)) for c in cycles)
    if mode == "net":
        c = cycles[0]
        watch = (c,)
        start = common_state(watch, start)
        width = _default_width(cycle_affinity(chain, c)) if lam_width is None else lam_width
        corr, lam = _net_setup(chain, c, width, n_lambda)
        mapping = lambda v: -(v + corr)  # noqa: E731
        observable = "K"
    elif mode == "pair":
        if pair is None:
            watch = (cycles[0], reversed_cycle(cycles[0]))
        else:
            watch = (cycles[pair[0]], cycles[pair[1]])
        if not is_similar(*watch):
            raise NotSimilar(f"cycles {watch[0].states} and {watch[1].states} are not similar")
        start = common_state(watch, start)
        gk, gl = cycle_strength(chain, watch[0]), cycle_strength(chain, watch[1])
        if gk <= 0 or gl <= 0:
            raise InfiniteAffinity("both cycles of the pair need positive strength")
        corr = math.log(gk) - math.log(gl)
        width = _default_width(corr) if lam_width is None else lam_width
        lam = _pair_setup(corr, width, n_lambda)
        mapping = lambda v: np.array([v[1] - corr, v[0] + corr])  # noqa: E731
        observable = "J"
    else:
        raise ValueError("mode must be 'net' or 'pair'")

    if batch is None:
        batch = batch_sample(chain, start, t, replicas, seed, watch, workers)
    elif tuple(batch.cycles) != watch:
        raise ValueError("batch was sampled for a different set of cycles")
    X, t = observable_matrix(batch, observable)
    R = X.shape[0]
    f, _, ess = _scgf_from_matrix(X, lam, t)
    keep = _mirror_mask(lam, ess >= MIN_ESS, mapping)
    if keep.sum() < 3:
        raise EmptyGrid("fewer than three lambda points with enough effective replicas")
    lam_k = lam[keep]

    # x grid: closed under the mirror map and inside the slope range of f
    if x_grid is None:
        if mode == "net":
            order = np.argsort(lam_k[:, 0])
            fk = f[keep][order]
            ls = lam_k[order, 0]
            s = min(abs((fk[1] - fk[0]) / (ls[1] - ls[0])), abs((fk[-1] - fk[-2]) / (ls[-1] - ls[-2])))
            xs = np.linspace(-0.8 * s, 0.8 * s, n_x)[:, None]
        else:
            mean = X.mean(axis=0) / t
            sd = X.std(axis=0) / t
            d = np.maximum(sd, 1e-3)
            side = int(round(math.sqrt(n_x)))
            offs = np.linspace(-1, 1, side)
            xs = np.array([[mean[0] + a * d[0], mean[1] + b * d[1]] for a in offs for b in offs])
    else:
        xs = _as_points(x_grid, "x")

    def mirror_x(P):
        return -P if mode == "net" else P[:, ::-1]

    def correction(P):
        return corr * (P[:, 0] if mode == "net" else P[:, 0] - P[:, 1])

    xm = mirror_x(xs)

    def residuals(fv):
        Ix = legendre_fenchel(lam_k, fv, xs).values
        Im = legendre_fenchel(lam_k, fv, xm).values
        # net: I(-x) - rho x = I(x);  pair: I(x_l, x_k) - L (x_k - x_l) = I(x_k, x_l)
        return Ix, Im, Im - correction(xs) - Ix

    Ix, Im, res = residuals(f[keep])
    rng = make_rng(seed, BOOTSTRAP_STREAM)
    boot = np.empty((3, bootstrap, len(xs)))
    for b in range(bootstrap):
        idx = rng.integers(0, R, R)
        fb, _, _ = _scgf_from_matrix(X[idx], lam_k, t)
        boot[:, b] = residuals(fb)
    if bootstrap > 1:
        sd = boot.std(axis=1, ddof=1)
    else:
        sd = np.zeros((3, len(xs)))
    # error bars of the two sides of the identity, combined in quadrature
    err = np.hypot(sd[0], sd[1])
    residual_sd = sd[2]
    trivial = np.all(np.isclose(xm, xs, atol=1e-15), axis=1)
    live = ~trivial
    med_res = float(np.median(np.abs(res[live]))) if live.any() else 0.0
    med_err = float(np.median(err[live])) if live.any() else 0.0
    passed = med_res <= factor * med_err if live.any() else True
    params = {"lam_width": width, "n_lambda": n_lambda, "bootstrap": bootstrap, "seed": seed,
              "observable": observable, "lambda_points_used": int(keep.sum())}
    digest = input_digest(chain.to_dict(), watch, start, t, mode, replicas, seed, params)
    return RateSymmetryReport(
        mode, watch, start, float(t), R, corr, xs, xm, Ix, Im, res, err, residual_sd, trivial,
        int((~keep).sum()), med_res, med_err, factor, bool(passed), params, digest,
    )

