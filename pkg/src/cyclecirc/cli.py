"""Command-line entry point ``cyclecirc``.

Chain files
-----------
A chain file is a list of ``key: value`` lines; ``#`` starts a comment.
``matrix:`` and ``edges:`` open a block of indented lines::

    kind: ctmc                 # or dtmc
    states: E, ES, EP
    matrix:                    # one row per state; '*' on the diagonal
        *    2.0  0.2          # is filled in (rates: minus the row sum,
        1.0  *    1.5          # probabilities: one minus the row sum)
        3.0  0.5  *
    # or instead of matrix:
    # edges:
    #     E -> ES 2.0

Optional experiment keys, overridden by command-line flags: ``cycles``,
``start``, ``t``, ``steps``, ``replicas``, ``seed``, ``mode``,
``lambda_grid``, ``x_grid`` (``a:b:step`` or comma lists), ``caps``,
``workers``, ``require``.  A JSON object with the same keys (``matrix`` as
a list of rows, ``edges`` as ``[from, to, value]`` triples) is accepted too.

Exit status: 0 when every check passes, 2 when a test ran and rejected,
1 on any error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .chain_model import (
    cycle_affinity,
    cycle_strength,
    kolmogorov_reversible,
    stationary_distribution,
    validate_chain,
)
from .cycle_algebra import Cycle, format_cycle, parse_cycles, reversed_cycle
from .errors import BadCycle, ChainError, CycleCircError, ParseError, UnknownState
from .exact_engine import exact_count_dist
from .fluctuation_lab import (
    entropy_decomposition,
    ft_report,
    haldane_test,
    rate_symmetry_check,
    scgf_estimate,
)
from .fluctuation_lab.reports import csv_text, dumps, input_digest
from .simulator import batch_sample, extract_events, make_rng, simulate

__all__ = ["ExperimentSpec", "parse_spec", "load_chain_text", "run", "main", "COMMANDS"]

COMMANDS = ("validate", "simulate", "haldane", "ft", "scgf", "rate", "exact", "entropy")
EXIT_OK, EXIT_ERROR, EXIT_REJECT = 0, 1, 2

_SCALAR_KEYS = {
    "kind", "states", "cycles", "start", "t", "steps", "replicas", "seed", "mode",
    "lambda_grid", "x_grid", "caps", "workers", "require",
}
_BLOCK_KEYS = {"matrix", "edges"}


@dataclass
class ExperimentSpec:
    """A validated chain plus the experiment to run on it."""

    path: str
    chain: object
    source_digest: str
    command: str | None = None
    cycles: list[Cycle] = field(default_factory=list)
    start: int | None = None
    t: float | None = None
    steps: int | None = None
    replicas: int = 1000
    seed: int = 0
    mode: str = "exact"
    lambda_grid: np.ndarray | None = None
    x_grid: np.ndarray | None = None
    caps: int = 20
    workers: int | None = None
    require: str = "similar"
    out: str | None = None

    @property
    def labels(self) -> tuple[str, ...]:
        return self.chain.labels

    @property
    def horizon(self):
        if self.chain.kind == "dtmc":
            if self.steps is None:
                if self.t is None:
                    raise ParseError("missing horizon: give steps (or t)", self.path)
                return int(self.t)
            return int(self.steps)
        if self.t is None:
            raise ParseError("missing horizon: give t", self.path)
        return float(self.t)


# --- parsing ------------------------------------------------------------------------

def _grid(text: str, path, line, key) -> np.ndarray:
    text = str(text).strip()
    try:
        if ":" in text:
            a, b, step = (float(v) for v in text.split(":"))
            if step <= 0 or b < a:
                raise ValueError
            n = int(math.floor((b - a) / step + 1e-9)) + 1
            return np.round(a + step * np.arange(n), 12)
        vals = np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise ParseError(f"{key}: expected 'a:b:step' or a comma list, got {text!r}", path, line) from None
    if vals.size == 0:
        raise ParseError(f"{key}: empty grid", path, line)
    return vals


def _number(text, path, line, key, kind=float):
    try:
        v = kind(str(text).strip())
    except ValueError:
        raise ParseError(f"{key}: expected a number, got {text!r}", path, line) from None
    if kind is float and not math.isfinite(v):
        raise ParseError(f"{key}: value must be finite", path, line)
    return v


def _read_text_format(text: str, path: str):
    entries: dict[str, tuple[object, int]] = {}
    block = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if line[0].isspace():
            if block is None:
                raise ParseError("indented line outside a matrix/edges block", path, lineno)
            entries[block][0].append((line.strip(), lineno))
            continue
        if ":" not in line:
            raise ParseError(f"expected 'key: value', got {line.strip()!r}", path, lineno)
        key, value = (s.strip() for s in line.split(":", 1))
        key = key.replace("-", "_")
        if key in entries:
            raise ParseError(f"duplicate key {key!r}", path, lineno)
        if key in _BLOCK_KEYS:
            if value:
                raise ParseError(f"{key}: block rows go on the following indented lines", path, lineno)
            entries[key] = ([], lineno)
            block = key
        elif key in _SCALAR_KEYS:
            entries[key] = (value, lineno)
            block = None
        else:
            raise ParseError(f"unknown key {key!r}", path, lineno)
    return entries


def _read_json_format(text: str, path: str):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("JSON chain file must hold an object", path)
    entries = {}
    for key, value in obj.items():
        key = key.replace("-", "_")
        if key == "matrix":
            rows = [(" ".join("*" if v == "*" else repr(float(v)) for v in row), None) for row in value]
            entries[key] = (rows, None)
        elif key == "edges":
            entries[key] = ([(f"{a} -> {b} {float(v)!r}", None) for a, b, v in value], None)
        elif key in _SCALAR_KEYS:
            if key == "states" and isinstance(value, list):
                value = ",".join(value)
            elif key in ("lambda_grid", "x_grid") and isinstance(value, list):
                value = ",".join(map(str, value))
            entries[key] = (value, None)
        else:
            raise ParseError(f"unknown key {key!r}", path)
    return entries


def _build_matrix(entries, kind, labels, path):
    S = len(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    if ("matrix" in entries) == ("edges" in entries):
        raise ParseError("give exactly one of 'matrix' or 'edges'", path)
    M = np.zeros((S, S))
    fill = []
    if "matrix" in entries:
        rows, key_line = entries["matrix"]
        if len(rows) != S:
            raise ParseError(f"matrix: expected {S} rows, got {len(rows)}", path, key_line)
        for i, (row, lineno) in enumerate(rows):
            toks = row.replace(",", " ").split()
            if len(toks) != S:
                raise ParseError(f"matrix: row {i} has {len(toks)} entries, expected {S}", path, lineno)
            for j, tok in enumerate(toks):
                if tok == "*":
                    if i != j:
                        raise ParseError("matrix: '*' is only allowed on the diagonal", path, lineno)
                    fill.append(i)
                else:
                    M[i, j] = _number(tok, path, lineno, "matrix")
        line = key_line
    else:
        rows, line = entries["edges"]
        seen = set()
        for row, lineno in rows:
            parts = row.replace("->", " -> ").split()
            if len(parts) != 4 or parts[1] != "->":
                raise ParseError(f"edges: expected 'FROM -> TO value', got {row!r}", path, lineno)
            a, _, b, v = parts
            for lab in (a, b):
                if lab not in index:
                    loc = f"{path}:{lineno}: edges" if lineno else f"{path}: edges"
                    raise UnknownState(lab, where=loc)
            if (a, b) in seen:
                raise ParseError(f"edges: duplicate edge {a} -> {b}", path, lineno)
            seen.add((a, b))
            M[index[a], index[b]] = _number(v, path, lineno, "edges")
        if kind == "ctmc":
            fill = list(range(S))
    for i in fill:
        off = M[i].sum() - M[i, i]
        M[i, i] = -off if kind == "ctmc" else 1.0 - off
    return M, line


def load_chain_text(text: str, path: str = "<string>"):
    """Parse chain-file text; returns ``(chain, entries)``."""
    is_json = text.lstrip().startswith("{")
    entries = _read_json_format(text, path) if is_json else _read_text_format(text, path)
    if "kind" not in entries:
        raise ParseError("missing key 'kind'", path)
    kind, kline = entries["kind"]
    kind = str(kind).strip().lower()
    if kind not in ("dtmc", "ctmc"):
        raise ParseError(f"kind: expected 'dtmc' or 'ctmc', got {kind!r}", path, kline)
    if "states" not in entries:
        raise ParseError("missing key 'states'", path)
    raw_states, sline = entries["states"]
    labels = [s.strip() for s in str(raw_states).split(",") if s.strip()]
    if len(labels) < 2:
        raise ParseError("states: need at least two states", path, sline)
    if len(set(labels)) != len(labels):
        raise ParseError("states: labels must be distinct", path, sline)
    for lab in labels:
        if any(ch in lab for ch in "(), ") or lab == "*":
            raise ParseError(f"states: invalid label {lab!r}", path, sline)
    M, mline = _build_matrix(entries, kind, labels, path)
    try:
        chain = validate_chain(M, kind, labels)
    except ChainError as exc:
        raise ParseError(f"{'matrix' if 'matrix' in entries else 'edges'}: {exc}", path, mline) from exc
    return chain, entries


def _resolve_path(path: str) -> tuple[str, str]:
    """Read ``path``; fall back to the bundled chain of the same file name."""
    p = Path(path)
    if p.exists():
        return str(p), p.read_text()
    bundled = resources.files("cyclecirc") / "chains" / p.name
    if bundled.is_file():
        return str(path), bundled.read_text()
    raise ParseError("no such file", str(path))


def parse_spec(path: str, overrides: dict | None = None, command: str | None = None) -> ExperimentSpec:
    """Read a chain file, merge command-line overrides and validate everything.

    Values from ``overrides`` (flag name -> string or number) win over keys in
    the file; errors name the file and line, or the flag.
    """
    path, text = _resolve_path(path)
    chain, entries = load_chain_text(text, path)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    index = {lab: i for i, lab in enumerate(chain.labels)}

    def get(key):
        if key in overrides:
            return overrides[key], f"--{key.replace('_', '-')}", None
        if key in entries:
            return entries[key][0], path, entries[key][1]
        return None, path, None

    spec = ExperimentSpec(path=path, chain=chain, source_digest=input_digest(text), command=command)
    spec.out = overrides.get("out")

    value, where, line = get("cycles")
    if value is not None:
        try:
            spec.cycles = parse_cycles(str(value), index)
        except UnknownState as exc:
            loc = f"{where}:{line}: {exc.where}" if line else f"{where}: {exc.where}"
            raise UnknownState(exc.state, where=loc) from None
        except BadCycle as exc:
            raise BadCycle(str(exc), where, line) from None
    value, where, line = get("start")
    if value is not None:
        name = str(value).strip()
        if name not in index:
            raise UnknownState(name, where=f"{where}:{line}: start" if line else f"{where}: start")
        spec.start = index[name]
    for key, kind in (("t", float), ("steps", int), ("replicas", int), ("seed", int), ("caps", int), ("workers", int)):
        value, where, line = get(key)
        if value is not None:
            v = _number(value, where, line, key, kind)
            if (key in ("t", "replicas", "caps", "workers") and v <= 0) or (key in ("steps", "seed") and v < 0):
                raise ParseError(f"{key}: out of range: {value!r}", where, line)
            setattr(spec, key, v)
    for key in ("lambda_grid", "x_grid"):
        value, where, line = get(key)
        if value is not None:
            setattr(spec, key, _grid(value, where, line, key))
    value, where, line = get("mode")
    if value is not None:
        mode = str(value).strip()
        if mode not in ("exact", "mc"):
            raise ParseError(f"mode: expected 'exact' or 'mc', got {mode!r}", where, line)
        spec.mode = mode
    value, where, line = get("require")
    if value is not None:
        req = str(value).strip()
        if req not in ("similar", "common"):
            raise ParseError(f"require: expected 'similar' or 'common', got {req!r}", where, line)
        spec.require = req
    if spec.workers is None and os.environ.get("CYCLECIRC_THREADS"):
        spec.workers = int(os.environ["CYCLECIRC_THREADS"])
    if command in ("haldane", "ft", "scgf", "rate", "exact") and not spec.cycles:
        raise ParseError(f"command {command!r} needs a cycle family (--cycles or 'cycles:')", path)
    if command == "scgf" and spec.lambda_grid is None:
        raise ParseError("command 'scgf' needs a lambda grid (--lambda-grid)", path)
    return spec


# --- commands -----------------------------------------------------------------------------

def _emit(spec: ExperimentSpec, text: str) -> None:
    if spec.out:
        with open(spec.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _provenance(spec: ExperimentSpec, report: dict) -> dict:
    report = dict(report)
    report["chain_file_digest"] = spec.source_digest
    report["version"] = __version__
    return report


def _cmd_validate(spec):
    chain = spec.chain
    rev = kolmogorov_reversible(chain)
    cycles = []
    for c in spec.cycles:
        g = cycle_strength(chain, c)
        gr = cycle_strength(chain, reversed_cycle(c))
        rho = cycle_affinity(chain, c) if g > 0 else (-math.inf if gr > 0 else math.nan)
        cycles.append({"cycle": format_cycle(c, chain.labels), "strength": g, "reverse_strength": gr, "affinity": rho,
                       "self_loop": len(c) == 1})
    report = {
        "command": "validate", "kind": chain.kind, "states": list(chain.labels),
        "reversible": rev.reversible,
        "witness": None if rev.witness is None else format_cycle(rev.witness, chain.labels),
        "stationary": stationary_distribution(chain).tolist(), "cycles": cycles,
        # DTMC self-loops pop singleton cycles, which carry no circulation
        "self_loops": [chain.labels[i] for i in range(chain.n_states) if chain.kind == "dtmc" and chain.P[i, i] > 0],
    }
    _emit(spec, dumps(_provenance(spec, report)))
    return EXIT_OK


def _cmd_simulate(spec):
    chain = spec.chain
    start = 0 if spec.start is None else spec.start
    rows = []
    for k in range(spec.replicas):
        traj = simulate(chain, start, spec.horizon, make_rng(spec.seed, k))
        log = extract_events(traj, spec.cycles)
        for time, c in log.events:
            rows.append((k, time, format_cycle(c, chain.labels)))
    _emit(spec, csv_text(["replica", "time", "cycle"], rows))
    return EXIT_OK


def _cmd_haldane(spec):
    report = haldane_test(
        spec.chain, spec.cycles, spec.start, spec.mode, require=spec.require,
        n_max=spec.steps if spec.chain.kind == "dtmc" else None,
        replicas=spec.replicas, seed=spec.seed, workers=spec.workers,
    )
    _emit(spec, dumps(_provenance(spec, report.to_dict())))
    return EXIT_OK if report.passed else EXIT_REJECT


def _cmd_ft(spec):
    lambdas = spec.lambda_grid if spec.lambda_grid is not None else (-1.0, -0.5, 0.0, 0.5, 1.0)
    report = ft_report(
        spec.chain, spec.cycles, spec.horizon, spec.start, spec.mode, caps=spec.caps, lambdas=lambdas,
        replicas=spec.replicas, seed=spec.seed, workers=spec.workers,
    )
    _emit(spec, dumps(_provenance(spec, report.to_dict())))
    return EXIT_OK if report.passed else EXIT_REJECT


def _cmd_scgf(spec):
    start = spec.start if spec.start is not None else 0
    batch = batch_sample(spec.chain, start, spec.horizon, spec.replicas, spec.seed, spec.cycles, spec.workers)
    r = len(spec.cycles)
    grids = np.meshgrid(*([spec.lambda_grid] * r), indexing="ij")
    lam = np.column_stack([g.ravel() for g in grids])
    est = scgf_estimate(batch, lam, "J", warn=False)
    header = [f"lambda_{k + 1}" for k in range(r)] + ["scgf", "stderr", "ess"]
    rows = [(*lam[g], est.values[g], est.stderr[g], est.ess[g]) for g in range(len(lam))]
    _emit(spec, csv_text(header, rows))
    return EXIT_OK


def _cmd_rate(spec):
    mode = "net" if len(spec.cycles) == 1 else "pair"
    pair = None if mode == "net" else (0, 1)
    report = rate_symmetry_check(
        spec.chain, spec.cycles, spec.horizon, spec.start, mode=mode, pair=pair, replicas=spec.replicas,
        seed=spec.seed, workers=spec.workers, x_grid=spec.x_grid,
    )
    d = report.x.shape[1]
    header = [f"x_{k + 1}" for k in range(d)] + [f"mirror_x_{k + 1}" for k in range(d)] + [
        "rate", "rate_mirrored", "residual", "error_bar"]
    _emit(spec, csv_text(header, report.csv_rows()))
    summary = {k: v for k, v in report.to_dict().items() if k in (
        "mode", "verdict", "median_abs_residual", "median_error_bar", "correction", "t", "replicas")}
    sys.stderr.write(dumps(summary))
    return EXIT_OK if report.passed else EXIT_REJECT


def _cmd_exact(spec):
    dist = exact_count_dist(spec.chain, spec.cycles, spec.horizon, spec.caps, spec.start)
    _emit(spec, dist.to_csv())
    return EXIT_OK


def _cmd_entropy(spec):
    chain = spec.chain
    if chain.kind != "ctmc":
        raise ParseError("command 'entropy' needs a ctmc chain", spec.path)
    start = 0 if spec.start is None else spec.start
    t = spec.horizon
    p0 = np.zeros(chain.n_states)
    p0[start] = 1.0
    times = spec.x_grid if spec.x_grid is not None else np.linspace(t / 10, t, 10)
    rows = []
    for k in range(spec.replicas):
        traj = simulate(chain, start, t, make_rng(spec.seed, k))
        for s in times:
            d = entropy_decomposition(traj, chain, p0, float(s))
            rows.append((k, float(s), d.W, d.cycle_part, d.residual))
    _emit(spec, csv_text(["replica", "t", "W", "cycle_part", "W_residual"], rows))
    return EXIT_OK


_HANDLERS = {
    "validate": _cmd_validate,
    "simulate": _cmd_simulate,
    "haldane": _cmd_haldane,
    "ft": _cmd_ft,
    "scgf": _cmd_scgf,
    "rate": _cmd_rate,
    "exact": _cmd_exact,
    "entropy": _cmd_entropy,
}


def run(spec: ExperimentSpec) -> int:
    """Execute ``spec.command``; returns the process exit status."""
    if spec.command not in _HANDLERS:
        raise ParseError(f"unknown command {spec.command!r}", spec.path)
    return _HANDLERS[spec.command](spec)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are operational failures, not rejections
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cyclecirc", description="Cycle statistics of finite Markov chains.")
    parser.add_argument("--version", action="version", version=f"cyclecirc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("chain", help="chain file (text or JSON)")
        p.add_argument("--cycles", help='cycle family, e.g. "(E,ES,EP),(E,EP,ES)"')
        p.add_argument("--start", help="start state label")
        p.add_argument("--t", help="time horizon (ctmc)")
        p.add_argument("--steps", help="step horizon (dtmc)")
        p.add_argument("--replicas")
        p.add_argument("--seed")
        p.add_argument("--mode", choices=("exact", "mc"))
        p.add_argument("--require", choices=("similar", "common"))
        p.add_argument("--lambda-grid", dest="lambda_grid", help="a:b:step or comma list")
        p.add_argument("--x-grid", dest="x_grid", help="a:b:step or comma list")
        p.add_argument("--caps")
        p.add_argument("--workers")
        p.add_argument("--out", help="output file (default: stdout)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "chain")}
    try:
        spec = parse_spec(args.chain, overrides, args.command)
        return run(spec)
    except (CycleCircError, OSError) as exc:
        sys.stderr.write(f"cyclecirc {args.command}: error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
