"""Configuration parsing, experiment dispatch, report emission and the CLI.

Configs are TOML documents::

    mode = "sweep"            # theory | simulate-sgd | simulate-ula | verify | sweep | sigma-opt
    seed = 7
    spectrum = [1.0, 0.5]     # or: spectrum = { power_law = { d = 4, exponent = 1.0, scale = 1.0 } }

    [params]
    sigma = 1.0
    tau = 1e-3
    gamma = 1e-2
    N = 10000

    [chain]
    n_steps = 20000
    thinning = 1
    replicas = 32
    source = "empirical"      # simulate-sgd only: exact | empirical

    [sweep]
    sigma = [0.5, 1.0, 2.0]   # any of sigma, tau, gamma, N; cartesian product

Every stochastic task draws from a stream derived from the master seed
and a task path (see ``seeding``), so a (config, seed) pair fixes every
emitted number.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import tomli
import tomli_w

from . import __version__
from .errors import DomainError, InvalidN, StabilityViolation
from .estimation import MIN_RECORDS, ChainConfig
from .langevin import run_ula_chain, ula_stationary
from .pipeline import PipelineParams, expected_pipeline_error, sigma_tradeoff_scan
from .score_theory import TAU_N_CONVENTIONS, optimal_score, sgd_full_moments
from .sgd_sim import EmpiricalData, ExactData, run_sgd_chain
from .verification import SUITES

SCHEMA_VERSION = 1
MODES = ("theory", "simulate-sgd", "simulate-ula", "verify", "sweep", "sigma-opt")
FORMATS = ("csv", "json")
SWEEP_AXES = ("sigma", "tau", "gamma", "N")
SWEEP_COLUMNS = ("sigma", "tau", "gamma", "N", "term0", "term_tau", "term_tauN", "term_N", "total")
MOMENT_COLUMNS = ("quantity", "estimate", "se", "theory", "z")
VERIFY_COLUMNS = ("suite", "passed", "statistic", "tolerance")
TAU_BOUND_NAME = "2/max(max_k λ_k + σ², 1)"

DEFAULT_PARAMS = {"sigma": 1.0, "tau": 1e-3, "gamma": 1e-2, "N": 10_000}
DEFAULT_CHAIN = {"n_steps": 20_000, "thinning": 1, "replicas": 32, "source": "empirical"}
DEFAULT_SIGMA_GRID = [float(s) for s in np.geomspace(0.05, 5.0, 41)]

TOP_KEYS = {"mode", "seed", "spectrum", "params", "chain", "sweep", "sigma_opt", "verify", "output", "format",
            "tau_n_term"}
SECTION_KEYS = {
    "params": set(DEFAULT_PARAMS),
    "chain": {"n_steps", "burn_in", "thinning", "replicas", "source"},
    "sweep": set(SWEEP_AXES),
    "sigma_opt": {"grid"},
    "verify": {"suites", "budget"},
    "spectrum": {"values", "power_law"},
    "power_law": {"d", "exponent", "scale"},
}


class ParseError(ValueError):
    """Malformed config text; carries the 1-based line and column when known."""

    def __init__(self, message, line=None, column=None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


class ValidationError(ValueError):
    """A config that parses but violates invariants; lists every violation."""

    def __init__(self, violations):
        super().__init__("invalid config:\n  - " + "\n  - ".join(violations))
        self.violations = list(violations)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "theory"
    seed: int = 0
    spectrum: tuple = (1.0,)
    spectrum_spec: object = (1.0,)
    params: dict = field(default_factory=lambda: dict(DEFAULT_PARAMS))
    chain: dict = field(default_factory=lambda: dict(DEFAULT_CHAIN))
    sweep: dict = field(default_factory=dict)
    sigma_grid: tuple = tuple(DEFAULT_SIGMA_GRID)
    suites: tuple = tuple(SUITES)
    budget: str = "quick"
    tau_n_term: str = "minus"
    output: str | None = None
    format: str = "csv"

    def pipeline_params(self):
        p = self.params
        return PipelineParams(p["sigma"], p["tau"], p["gamma"], p["N"])

    def chain_config(self):
        c = self.chain
        return ChainConfig(n_steps=c["n_steps"], burn_in=c.get("burn_in"), thinning=c["thinning"],
                           seed=self.seed, replicas=c["replicas"])


@dataclass
class Report:
    mode: str
    config: dict
    columns: tuple
    rows: list
    suites: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    seed: int = 0
    schema_version: int = SCHEMA_VERSION
    package_version: str = __version__
    wall_clock_s: float | None = None

    @property
    def ok(self):
        return all(s["passed"] for s in self.suites)


# parsing

def _key_position(text, key):
    m = re.search(rf"^\s*{re.escape(key)}\s*=", text, flags=re.MULTILINE)
    if m is None:
        m = re.search(rf"^\s*\[{re.escape(key)}\]", text, flags=re.MULTILINE)
    if m is None:
        return None, None
    line = text.count("\n", 0, m.start()) + 1
    col = m.start() - (text.rfind("\n", 0, m.start()) + 1) + len(m.group(0)) - len(m.group(0).lstrip()) + 1
    return line, col


def _check_keys(text, table, allowed, where):
    for key in table:
        if key not in allowed:
            line, col = _key_position(text, key)
            raise ParseError(f"unknown key {key!r} in {where}", line, col)


def _expand_spectrum(spec, violations):
    if isinstance(spec, list):
        values = spec
    elif isinstance(spec, dict) and "values" in spec:
        values = spec["values"]
    elif isinstance(spec, dict) and "power_law" in spec:
        pl = spec["power_law"]
        d, expo, scale = pl.get("d"), pl.get("exponent", 1.0), pl.get("scale", 1.0)
        if not isinstance(d, int) or d < 1:
            violations.append("spectrum.power_law.d must be a positive integer")
            return ()
        values = [scale * (k + 1) ** (-expo) for k in range(d)]
    else:
        violations.append("spectrum must be a list or a table with 'values' or 'power_law'")
        return ()
    if not values or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        violations.append("spectrum must be a nonempty list of numbers")
        return ()
    values = tuple(float(v) for v in values)
    if not all(math.isfinite(v) and v > 0 for v in values):
        violations.append("spectrum entries must be finite and > 0")
    return values


def parse_config(text):
    """Parse and validate TOML config text into an :class:`ExperimentConfig`."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        if m:
            line, col = int(m.group(1)), int(m.group(2))
        else:  # error at end of document
            line, col = text.count("\n") + 1, len(text) - text.rfind("\n")
        raise ParseError(f"malformed TOML: {str(exc).split(' (at')[0]}", line, col) from None
    _check_keys(text, raw, TOP_KEYS, "top level")
    for sec in ("params", "chain", "sweep", "sigma_opt", "verify"):
        if sec in raw:
            if not isinstance(raw[sec], dict):
                line, col = _key_position(text, sec)
                raise ParseError(f"{sec!r} must be a table", line, col)
            _check_keys(text, raw[sec], SECTION_KEYS[sec], f"[{sec}]")
    spec = raw.get("spectrum", [1.0])
    if isinstance(spec, dict):
        _check_keys(text, spec, SECTION_KEYS["spectrum"], "spectrum")
        if isinstance(spec.get("power_law"), dict):
            _check_keys(text, spec["power_law"], SECTION_KEYS["power_law"], "spectrum.power_law")
    return _build(raw, spec)


def _build(raw, spec):
    v = []
    spectrum = _expand_spectrum(spec, v)
    mode = raw.get("mode", "theory")
    if mode not in MODES:
        v.append(f"mode must be one of {', '.join(MODES)}; got {mode!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        v.append("seed must be an unsigned 64-bit integer")
    params = {**DEFAULT_PARAMS, **raw.get("params", {})}
    chain = {**DEFAULT_CHAIN, **raw.get("chain", {})}
    sweep = {k: list(g) if isinstance(g, list) else g for k, g in raw.get("sweep", {}).items()}
    sigma_grid = raw.get("sigma_opt", {}).get("grid", DEFAULT_SIGMA_GRID)
    vraw = raw.get("verify", {})
    suites = vraw.get("suites", list(SUITES))
    budget = vraw.get("budget", "quick")
    fmt = raw.get("format", "csv")
    tnt = raw.get("tau_n_term", "minus")
    output = raw.get("output")
    _validate_params(params, spectrum, v, "params")
    _validate_chain(chain, v)
    for axis, grid in sweep.items():
        if not isinstance(grid, list) or not grid:
            v.append(f"sweep.{axis} must be a nonempty list")
        elif not all(isinstance(g, (int, float)) and not isinstance(g, bool) for g in grid):
            v.append(f"sweep.{axis} must contain numbers")
    if mode == "sweep" and not sweep:
        v.append("sweep mode needs at least one axis in [sweep]")
    if not isinstance(sigma_grid, list) or len(sigma_grid) < 3 or not all(
            isinstance(g, (int, float)) and g > 0 for g in sigma_grid):
        v.append("sigma_opt.grid must list at least 3 positive numbers")
    if not isinstance(suites, list) or not suites or any(s not in SUITES for s in suites):
        v.append(f"verify.suites must be a nonempty subset of {', '.join(SUITES)}")
    if budget not in ("quick", "full"):
        v.append("verify.budget must be 'quick' or 'full'")
    if fmt not in FORMATS:
        v.append("format must be 'csv' or 'json'")
    if tnt not in TAU_N_CONVENTIONS:
        v.append(f"tau_n_term must be one of {', '.join(TAU_N_CONVENTIONS)}")
    if output is not None and not isinstance(output, str):
        v.append("output must be a path string")
    if v:
        raise ValidationError(v)
    params["N"] = int(params["N"])
    return ExperimentConfig(
        mode=mode, seed=seed, spectrum=spectrum, spectrum_spec=_freeze(spec), params=params, chain=chain,
        sweep={k: tuple(g) for k, g in sweep.items()}, sigma_grid=tuple(float(s) for s in sigma_grid),
        suites=tuple(suites), budget=budget, tau_n_term=tnt, output=output, format=fmt,
    )


def _freeze(spec):
    if isinstance(spec, list):
        return tuple(spec)
    return json.loads(json.dumps(spec))


def _num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _validate_params(p, spectrum, v, where):
    for key in ("sigma", "tau", "gamma", "N"):
        if not _num(p[key]) or not math.isfinite(p[key]):
            v.append(f"{where}.{key} must be a finite number")
            return
    if p["sigma"] <= 0:
        v.append(f"{where}.sigma must be > 0")
    if p["tau"] <= 0:
        v.append(f"{where}.tau must be > 0")
    if p["gamma"] <= 0:
        v.append(f"{where}.gamma must be > 0")
    if p["N"] < 2 or int(p["N"]) != p["N"]:
        v.append(f"{where}.N must be an integer >= 2")
    if spectrum and p["sigma"] > 0:
        bound = 2.0 / max(max(spectrum) + p["sigma"] ** 2, 1.0)
        if p["tau"] >= bound:
            v.append(f"{where}.tau = {p['tau']!r} violates the SGD stability bound tau < {TAU_BOUND_NAME} = {bound!r}")
        gmax = min(spectrum) + p["sigma"] ** 2
        if p["gamma"] >= gmax:
            v.append(f"{where}.gamma = {p['gamma']!r} must be < min_k(λ_k + σ²) = {gmax!r}")


def _validate_chain(c, v):
    for key in ("n_steps", "thinning", "replicas"):
        if not isinstance(c[key], int) or isinstance(c[key], bool) or c[key] < 1:
            v.append(f"chain.{key} must be a positive integer")
            return
    if c.get("burn_in") is not None and (not isinstance(c["burn_in"], int) or c["burn_in"] < 0):
        v.append("chain.burn_in must be a nonnegative integer")
    if c["n_steps"] // c["thinning"] < MIN_RECORDS:
        v.append(f"chain.n_steps / chain.thinning must be >= {MIN_RECORDS}")
    if c["source"] not in ("exact", "empirical"):
        v.append("chain.source must be 'exact' or 'empirical'")


def emit_config(config):
    """TOML text that parses back to ``config``."""
    doc = {"mode": config.mode, "seed": config.seed, "format": config.format, "tau_n_term": config.tau_n_term}
    if config.output is not None:
        doc["output"] = config.output
    spec = config.spectrum_spec
    doc["spectrum"] = list(spec) if isinstance(spec, tuple) else spec
    doc["params"] = dict(config.params)
    doc["chain"] = {k: val for k, val in config.chain.items() if val is not None}
    if config.sweep:
        doc["sweep"] = {k: list(g) for k, g in config.sweep.items()}
    doc["sigma_opt"] = {"grid": list(config.sigma_grid)}
    doc["verify"] = {"suites": list(config.suites), "budget": config.budget}
    return tomli_w.dumps(doc)


# running

def _theory_row(spectrum, p, tau_n_term):
    row = {"sigma": p["sigma"], "tau": p["tau"], "gamma": p["gamma"], "N": p["N"]}
    try:
        eb = expected_pipeline_error(spectrum, PipelineParams(p["sigma"], p["tau"], p["gamma"], p["N"]), tau_n_term)
        row.update(eb.as_dict())
    except (DomainError, StabilityViolation, InvalidN, ValueError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _moment_rows(names, est_vec, se_vec, theory_vec):
    rows = []
    for name, e, s, t in zip(names, est_vec, se_vec, theory_vec):
        z = (e - t) / s if s > 0 else 0.0
        rows.append({"quantity": name, "estimate": float(e), "se": float(s), "theory": float(t), "z": float(z)})
    return rows


def _run_simulate_sgd(config):
    C = np.diag(config.spectrum)
    d = C.shape[0]
    p = config.params
    src = ExactData() if config.chain["source"] == "exact" else EmpiricalData(int(p["N"]), config.seed, per_replica=True)
    est = run_sgd_chain(C, p["sigma"], p["tau"], src, config.chain_config(), path="simulate-sgd")
    N = math.inf if config.chain["source"] == "exact" else p["N"]
    th = sgd_full_moments(C, p["sigma"], p["tau"], N, config.tau_n_term)
    k = d * d
    names, e, s, t = [], [], [], []
    mean_theory = np.concatenate([th.mean_A.reshape(-1, order="F"), th.mean_b])
    labels = [f"A[{i},{j}]" for j in range(d) for i in range(d)] + [f"b[{i}]" for i in range(d)]
    for a in range(k + d):
        names.append(f"mean {labels[a]}")
        e.append(est.mean[a]); s.append(est.se_mean[a]); t.append(mean_theory[a])
    cov_theory = np.zeros((k + d, k + d))
    cov_theory[:k, :k] = th.cov_A
    cov_theory[k:, k:] = th.cov_b
    for a in range(k + d):
        for c in range(a, k + d):
            names.append(f"cov {labels[a]},{labels[c]}")
            e.append(est.cov[a, c]); s.append(est.se_cov[a, c]); t.append(cov_theory[a, c])
    rows = _moment_rows(names, e, s, t)
    return rows, {"n_effective": est.n_effective, "tau_n_term": config.tau_n_term}


def _run_simulate_ula(config):
    p = config.params
    C = np.diag(config.spectrum)
    score = optimal_score(C, p["sigma"])
    est = run_ula_chain(score, p["gamma"], config.chain_config(), path="simulate-ula")
    law = ula_stationary(score, p["gamma"])
    d = score.dim
    names, e, s, t = [], [], [], []
    for a in range(d):
        names.append(f"mean y[{a}]")
        e.append(est.mean[a]); s.append(est.se_mean[a]); t.append(law.mean[a])
    for a in range(d):
        for c in range(a, d):
            names.append(f"cov y[{a}],y[{c}]")
            e.append(est.cov[a, c]); s.append(est.se_cov[a, c]); t.append(law.cov.entries[a, c])
    return _moment_rows(names, e, s, t), {"n_effective": est.n_effective}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return x


def _run_verify(config, threads):
    names = list(config.suites)
    results = _map(lambda n: SUITES[n](config.seed, config.budget), names, threads)
    suites = [{"name": r.name, "passed": bool(r.passed), "statistic": float(r.statistic), "tolerance": r.tolerance,
               "detail": _jsonable(r.detail)} for r in results]
    rows = [{"suite": r["name"], "passed": r["passed"], "statistic": r["statistic"], "tolerance": r["tolerance"]}
            for r in suites]
    return rows, suites


def run(config, threads=1):
    """Dispatch ``config`` to the matching experiment and build a :class:`Report`."""
    t0 = time.perf_counter()
    echo = tomli.loads(emit_config(replace(config, output=None)))  # destination is not part of the result
    suites, summary = [], {}
    if config.mode == "theory":
        columns, rows = SWEEP_COLUMNS, [_theory_row(config.spectrum, config.params, config.tau_n_term)]
    elif config.mode == "sweep":
        axes = [a for a in SWEEP_AXES if a in config.sweep]
        cells = [dict(config.params, **dict(zip(axes, vals)))
                 for vals in itertools.product(*(config.sweep[a] for a in axes))]
        columns = SWEEP_COLUMNS
        rows = _map(lambda p: _theory_row(config.spectrum, p, config.tau_n_term), cells, threads)
    elif config.mode == "sigma-opt":
        p = config.params
        scan = sigma_tradeoff_scan(config.spectrum, p["tau"], p["gamma"], p["N"], config.sigma_grid,
                                   config.tau_n_term)
        columns = SWEEP_COLUMNS + ("kind",)
        rows = []
        for s, r, err in zip(scan.sigmas, scan.rows, scan.errors):
            row = {"sigma": float(s), "tau": p["tau"], "gamma": p["gamma"], "N": p["N"], "kind": "grid"}
            if r is None:
                row["error"] = err
            else:
                row.update(r.as_dict())
            rows.append(row)
        best = _theory_row(config.spectrum, dict(p, sigma=scan.sigma_star), config.tau_n_term)
        best["kind"] = "optimum" if scan.interior else "boundary"
        rows.append(best)
        summary = {"sigma_star": scan.sigma_star, "total_star": scan.total_star, "interior": scan.interior}
    elif config.mode == "simulate-sgd":
        columns = MOMENT_COLUMNS
        rows, summary = _run_simulate_sgd(config)
    elif config.mode == "simulate-ula":
        columns = MOMENT_COLUMNS
        rows, summary = _run_simulate_ula(config)
    else:
        columns = VERIFY_COLUMNS
        rows, suites = _run_verify(config, threads)
        summary = {"all_passed": all(s["passed"] for s in suites)}
    if any("error" in r for r in rows):
        columns = tuple(columns) + ("error",)
    return Report(config.mode, echo, tuple(columns), rows, suites, _jsonable(summary), config.seed,
                  wall_clock_s=time.perf_counter() - t0)


# emission

def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ValueError("non-finite value in report output")
        return repr(x)
    return str(x)


def csv_text(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report.columns)
    for row in report.rows:
        failed = "error" in row
        w.writerow(["" if failed and c not in SWEEP_AXES + ("error", "kind") else _fmt(row.get(c))
                    for c in report.columns])
    return buf.getvalue()


def json_text(report, include_timing=False):
    doc = {
        "schema_version": report.schema_version,
        "package_version": report.package_version,
        "mode": report.mode,
        "seed": report.seed,
        "config": report.config,
        "columns": list(report.columns),
        "rows": _jsonable(report.rows),
        "suites": report.suites,
        "summary": report.summary,
    }
    if include_timing:
        doc["wall_clock_s"] = report.wall_clock_s
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_csv(report, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(report))


def emit_json(report, path, include_timing=False):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json_text(report, include_timing))


# command line

def build_parser():
    ap = argparse.ArgumentParser(prog="dsm-langevin", description="Error theory and simulation of DSM-trained ULA samplers.")
    sub = ap.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        sp = sub.add_parser(mode)
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--format", choices=FORMATS)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--spectrum", help="comma-separated eigenvalues")
        for key in ("sigma", "tau", "gamma"):
            sp.add_argument(f"--{key}", type=float)
        sp.add_argument("--N", type=int)
        sp.add_argument("--tau-n-term", choices=TAU_N_CONVENTIONS)
        sp.add_argument("--timing", action="store_true", help="include wall-clock time in JSON output")
        if mode == "verify":
            sp.add_argument("--budget", choices=("quick", "full"))
            sp.add_argument("--suites", help="comma-separated suite names")
    return ap


def _merge_cli(args, text):
    raw = tomli.loads(text) if text else {}
    raw["mode"] = args.mode
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.format:
        raw["format"] = args.format
    if args.out:
        raw["output"] = args.out
    if args.spectrum:
        raw["spectrum"] = [float(x) for x in args.spectrum.split(",")]
    if args.tau_n_term:
        raw["tau_n_term"] = args.tau_n_term
    params = dict(raw.get("params", {}))
    for key in ("sigma", "tau", "gamma", "N"):
        val = getattr(args, key)
        if val is not None:
            params[key] = val
    if params:
        raw["params"] = params
    if args.mode == "verify":
        ver = dict(raw.get("verify", {}))
        if args.budget:
            ver["budget"] = args.budget
        if args.suites:
            ver["suites"] = args.suites.split(",")
        if ver:
            raw["verify"] = ver
    return tomli_w.dumps(raw)


def main(argv=None):
    args = build_parser().parse_args(argv)
    text = ""
    try:
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
            parse_config(text)  # report errors against the file's own line numbers
        config = parse_config(_merge_cli(args, text))
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    report = run(config, threads=max(1, args.threads))
    out = json_text(report, args.timing) if config.format == "json" else csv_text(report)
    try:
        if config.output:
            with open(config.output, "w", encoding="utf-8", newline="") as fh:
                fh.write(out)
        else:
            sys.stdout.write(out)
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return 2
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
