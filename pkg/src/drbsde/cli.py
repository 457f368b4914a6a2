"""Command-line harness: ``drbsde <command> --config <file> [--override key=value ...]``.

Exit codes: 0 success, 1 configuration error, 2 precondition violation,
3 numerical failure, 4 oracle-check failure.

The number of BLAS/OpenMP threads used by numpy can be capped with the
``DRBSDE_NUM_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata

import numpy as np

from .diagnostics import (apriori_sums, invariant_suite, layer_gaps, n0_threshold)
from .exceptions import ConfigError, NumericalFailure, PreconditionError
from .lattice import layer_state, sample_path
from .problems import (REGISTRY, ItoConstant, ItoPathwise, Problem, build_problem, eval_barrier,
                       lipschitz_probe, theta_probe, validate_problem)
from .lattice import NodeIndex
from .schemes import (EXPLICIT_PENALIZED, IMPLICIT_PENALIZED, IMPLICIT_REFLECTED, SCHEME_TAGS,
                      SchemeKind, SolveConfig, path_cumulative, path_values, solve)
from .tree import (MAX_TREE_DEPTH, check_constraint_equivalence, check_fine_bounds,
                   lattice_counterpart, solve_full_tree, tree_vs_lattice)

log = logging.getLogger("drbsde")

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_NUMERICAL, EXIT_ORACLE = 0, 1, 2, 3, 4
THREADS_ENV = "DRBSDE_NUM_THREADS"
ORACLE_MAX_N = 6
ORACLE_TOL = {"lattice_vs_tree": 1e-12, "constraint_equivalence": 1e-10, "push_bounds": 1e-12}

COMMANDS = ("solve", "table", "psweep", "path", "oracle-check", "diagnose")


@dataclass
class RunConfig:
    problem: str = "benchmark"
    T: float = 1.0
    lam: float = 5.0
    n: int | list[int] = 100
    scheme: str = "explicit_reflected"
    p: float | list[float] | None = None
    root_tol: float = 1e-12
    max_iter: int = 200
    seed: int = 0
    mc_paths: int = 0
    output_path: str | None = None


# config file key -> RunConfig attribute
CONFIG_KEYS = {"problem": "problem", "T": "T", "lambda": "lam", "n": "n", "scheme": "scheme",
               "p": "p", "root_tol": "root_tol", "max_iter": "max_iter", "seed": "seed",
               "mc_paths": "mc_paths", "output_path": "output_path"}


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _as_number(key, value, kind):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    return float(value)


def _one_or_list(key, value, kind):
    if isinstance(value, list):
        if not value:
            raise ConfigError(f"{key} list is empty")
        return [_as_number(key, v, kind) for v in value]
    return _as_number(key, value, kind)


def load_config(path: str | None, overrides=()) -> RunConfig:
    """Read a flat JSON config, apply ``key=value`` overrides and validate."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    for text in overrides:
        key, value = _parse_override(text)
        raw[key] = value
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg = RunConfig()
    for key, value in raw.items():
        setattr(cfg, CONFIG_KEYS[key], value)

    if cfg.problem not in REGISTRY:
        raise ConfigError(f"unknown problem {cfg.problem!r}; choose from {sorted(REGISTRY)}")
    cfg.T = _as_number("T", cfg.T, float)
    cfg.lam = _as_number("lambda", cfg.lam, float)
    if not (cfg.T > 0 and cfg.lam > 0):
        raise ConfigError("T and lambda must be positive")
    cfg.n = _one_or_list("n", cfg.n, int)
    if any(v < 1 for v in np.atleast_1d(cfg.n)):
        raise ConfigError("n must be >= 1")
    if cfg.scheme.replace("-", "_").lower() not in SCHEME_TAGS:
        raise ConfigError(f"unknown scheme {cfg.scheme!r}; choose from {SCHEME_TAGS}")
    cfg.scheme = cfg.scheme.replace("-", "_").lower()
    penalized = cfg.scheme in (EXPLICIT_PENALIZED, IMPLICIT_PENALIZED)
    if penalized and cfg.p is None:
        raise ConfigError("penalized schemes need p")
    if not penalized and cfg.p is not None:
        raise ConfigError("p is only allowed with a penalized scheme")
    if cfg.p is not None:
        cfg.p = _one_or_list("p", cfg.p, float)
        if any(v < 0 for v in np.atleast_1d(cfg.p)):
            raise ConfigError("p must be >= 0")
    cfg.root_tol = _as_number("root_tol", cfg.root_tol, float)
    cfg.max_iter = _as_number("max_iter", cfg.max_iter, int)
    cfg.seed = _as_number("seed", cfg.seed, int)
    cfg.mc_paths = _as_number("mc_paths", cfg.mc_paths, int)
    if cfg.root_tol <= 0 or cfg.max_iter < 1 or cfg.mc_paths < 0:
        raise ConfigError("root_tol must be positive, max_iter >= 1, mc_paths >= 0")
    if cfg.output_path is not None and not isinstance(cfg.output_path, str):
        raise ConfigError("output_path must be a string")
    return cfg


def _single(cfg: RunConfig, name: str):
    value = getattr(cfg, name)
    if isinstance(value, list):
        raise ConfigError(f"this command takes a single {name}, got a list")
    return value


def _list(value):
    return value if isinstance(value, list) else [value]


def _problem(cfg: RunConfig) -> Problem:
    return build_problem(cfg.problem, T=cfg.T, lam=cfg.lam)


def _solve_cfg(cfg: RunConfig) -> SolveConfig:
    return SolveConfig(root_tol=cfg.root_tol, max_iter=cfg.max_iter)


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _emit(cfg: RunConfig, body: str, meta: dict):
    """Write the deterministic body, plus a ``.meta.json`` sidecar for files."""
    if cfg.output_path is None:
        sys.stdout.write(body)
        return
    with open(cfg.output_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(body)
    with open(cfg.output_path + ".meta.json", "w", encoding="utf-8") as fh:
        fh.write(_json_text(meta))


# -- commands -----------------------------------------------------------------

def cmd_solve(cfg: RunConfig):
    problem = _problem(cfg)
    n = _single(cfg, "n")
    kind = SchemeKind(cfg.scheme, _single(cfg, "p"))
    sol = solve(problem, problem.params(n), kind, _solve_cfg(cfg), retain=False)
    report = invariant_suite(sol, problem)
    body = {"problem": problem.name, "scheme": str(kind), "n": n, "T": problem.T,
            "lambda": problem.lam, "y0": sol.y0, "invariants": report.rows,
            "invariants_ok": report.ok}
    return _json_text(body), {"cpu_seconds": sol.cpu_seconds}


def cmd_table(cfg: RunConfig):
    problem = _problem(cfg)
    kind = SchemeKind(cfg.scheme, _single(cfg, "p"))
    rows = []
    for n in _list(cfg.n):
        sol = solve(problem, problem.params(n), kind, _solve_cfg(cfg), retain=False)
        log.info("n=%d y0=%.6f cpu=%.3fs", n, sol.y0, sol.cpu_seconds)
        rows.append((n, sol.y0, sol.cpu_seconds))
    return _csv_text(("n", "y0", "cpu_seconds"), rows), {}


REFLECTED_OF = {EXPLICIT_PENALIZED: "explicit_reflected", IMPLICIT_PENALIZED: "implicit_reflected"}


def cmd_psweep(cfg: RunConfig):
    if cfg.scheme not in REFLECTED_OF:
        raise ConfigError("psweep needs a penalized scheme")
    problem = _problem(cfg)
    n = _single(cfg, "n")
    params = problem.params(n)
    scfg = _solve_cfg(cfg)
    ref = solve(problem, params, SchemeKind(REFLECTED_OF[cfg.scheme]), scfg, retain=("y",))
    rows = []
    for p in _list(cfg.p):
        pen = solve(problem, params, SchemeKind(cfg.scheme, p), scfg, retain=("y",))
        rows.append((p, pen.y0, max(layer_gaps(ref, pen, "y"))))
        del pen
    return (_csv_text(("p", "y0", "sup_y_gap_vs_reflected"), rows),
            {"reflected_y0": ref.y0, "reflected_scheme": REFLECTED_OF[cfg.scheme]})


def cmd_path(cfg: RunConfig):
    problem = _problem(cfg)
    n = _single(cfg, "n")
    params = problem.params(n)
    kind = SchemeKind(cfg.scheme, _single(cfg, "p"))
    sol = solve(problem, params, kind, _solve_cfg(cfg), retain=("y", "a", "k"))
    path = sample_path(params, cfg.seed)
    y = path_values(sol, path, "y")
    A, K, _ = path_cumulative(sol, path)
    w = np.concatenate([[0.0], np.cumsum(path[:, 0])]) * params.sqrt_delta
    nt = np.concatenate([[0.0], np.cumsum(path[:, 1])])
    ups = np.concatenate([[0], np.cumsum(path[:, 0] > 0)])
    jumps = np.concatenate([[0], np.cumsum(path[:, 1] > 0)])
    rows = []
    for j in range(n + 1):
        idx = NodeIndex(j, int(ups[j]), int(jumps[j]))
        rows.append((params.time(j), w[j], nt[j], eval_barrier(problem.lower, params, idx),
                     eval_barrier(problem.upper, params, idx), y[j], A[j], K[j]))
    return _csv_text(("t", "W", "Ntilde", "xi", "zeta", "y", "A", "K"), rows), {"y0": sol.y0}


def _oracle_rows(problem: Problem, params, scfg: SolveConfig):
    rows = []
    contraction = params.delta * problem.driver.lipschitz_const < 1
    report = validate_problem(problem, params) if problem.recombining else None
    for tag in SCHEME_TAGS:
        kind = SchemeKind(tag, 100.0 if "penalized" in tag else None)
        if kind.implicit and not contraction:
            rows.append(("lattice_vs_tree", str(kind), "", ORACLE_TOL["lattice_vs_tree"],
                         "skipped: precondition"))
            continue
        if kind.reflected and report is not None and not report.ok and any(
                f.split(":")[0] in ("ordered", "terminal") for f in report.failures):
            raise PreconditionError("; ".join(report.failures))
        tree = solve_full_tree(problem, params, kind, scfg, validate=kind.implicit)
        lattice = solve(lattice_counterpart(problem, params), params, kind, scfg,
                        validate=kind.implicit)
        gap = tree_vs_lattice(tree, lattice)
        tol = ORACLE_TOL["lattice_vs_tree"]
        if problem.recombining:
            status = "pass" if gap <= tol else "FAIL"
        else:
            status = "expected-mismatch" if gap > tol else "unexpected-match"
        rows.append(("lattice_vs_tree", str(kind), gap, tol, status))
        if kind.tag == IMPLICIT_REFLECTED:
            eq = check_constraint_equivalence(tree, problem, params).max_residual
            tol = ORACLE_TOL["constraint_equivalence"]
            rows.append(("constraint_equivalence", str(kind), eq, tol,
                         "pass" if eq <= tol else "FAIL"))
            if isinstance(problem.lower, (ItoConstant, ItoPathwise)) and isinstance(
                    problem.upper, (ItoConstant, ItoPathwise)):
                fb = check_fine_bounds(tree, problem, params)
                worst = max(fb.max_violation_a, fb.max_violation_k, 0.0)
                tol = ORACLE_TOL["push_bounds"]
                rows.append(("push_bounds", str(kind), worst, tol,
                             "pass" if worst <= tol else "FAIL"))
            else:
                rows.append(("push_bounds", str(kind), "", ORACLE_TOL["push_bounds"],
                             "not-applicable"))
    return rows


def cmd_oracle_check(cfg: RunConfig):
    n = _single(cfg, "n")
    if n > ORACLE_MAX_N:
        raise PreconditionError(f"oracle check is capped at n <= {ORACLE_MAX_N} (got {n})")
    problem = _problem(cfg)
    rows = _oracle_rows(problem, problem.params(n), _solve_cfg(cfg))
    body = _csv_text(("check", "scheme", "value", "tolerance", "status"), rows)
    failed = any(r[-1] in ("FAIL", "unexpected-match") for r in rows)
    return body, {"failed": failed}


def cmd_diagnose(cfg: RunConfig):
    problem = _problem(cfg)
    n = _single(cfg, "n")
    params = problem.params(n)
    kind = SchemeKind(cfg.scheme, _single(cfg, "p"))
    sol = solve(problem, params, kind, _solve_cfg(cfg), retain=False)
    n0 = n0_threshold(problem)
    lo, hi = theta_probe(problem.driver, seed=cfg.seed)
    warnings = []
    if n < n0:
        warnings.append(f"n={n} is below the step-count threshold N0={n0:.6g}; "
                        "the quantitative error estimates are not guaranteed")
    body = {
        "problem": problem.name, "scheme": str(kind), "n": n, "y0": sol.y0,
        "apriori_sums": apriori_sums(sol, problem).as_dict(),
        "n0": n0, "n_below_n0": n < n0, "warnings": warnings,
        "lipschitz_constant": problem.driver.lipschitz_const,
        "lipschitz_probe_excess": lipschitz_probe(problem.driver, seed=cfg.seed),
        "theta_probe_range": [lo, hi],
        "invariants": invariant_suite(sol, problem).rows,
    }
    for w in warnings:
        log.warning(w)
    return _json_text(body), {"cpu_seconds": sol.cpu_seconds}


HANDLERS = {"solve": cmd_solve, "table": cmd_table, "psweep": cmd_psweep, "path": cmd_path,
            "oracle-check": cmd_oracle_check, "diagnose": cmd_diagnose}


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        count = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=count)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drbsde", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON file with flat run settings")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (value parsed as JSON when possible)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    wall = time.perf_counter()
    try:
        limiter = _limit_threads()
        cfg = load_config(args.config, args.override)
        body, extra = HANDLERS[args.command](cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except PreconditionError as exc:
        log.error("precondition violated: %s", exc)
        return EXIT_PRECONDITION
    except NumericalFailure as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    meta = {"command": args.command, "config": asdict(cfg), "started_at": started,
            "finished_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "wall_seconds": time.perf_counter() - wall, "version": _version(),
            "python": platform.python_version(), "numpy": np.__version__,
            "threads_env": os.environ.get(THREADS_ENV), **extra}
    _emit(cfg, body, meta)
    if limiter is not None:
        limiter.restore_original_limits()
    if args.command == "oracle-check" and extra.get("failed"):
        log.error("oracle check failed")
        return EXIT_ORACLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
