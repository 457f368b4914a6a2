"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line (printed in the terminal summary
and to stdout) and then asserts the criterion at its stated tolerance.
Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""

import copy
import itertools
import time
from functools import lru_cache
from statistics import median

import numpy as np

from drbsde.diagnostics import (apriori_sums, invariant_suite, layer_gaps, rate_fit,
                                scheme_gap, INVARIANT_TOLERANCES)
from drbsde.lattice import BRANCH_E, branch_eta, child_weights, make_params
from drbsde.problems import ito_example, benchmark_example
from drbsde.schemes import SchemeKind, solve
from drbsde.tree import check_constraint_equivalence, compare_lattice_vs_tree, solve_full_tree

RESULTS: list[str] = []

BENCHMARK = benchmark_example()  # T = 1, lambda = 5
TABLE_N = (10, 20, 50, 100, 200, 300, 400)
TABLE_Y0 = (1.2191, 1.3238, 1.3953, 1.4167, 1.4293, 1.4332, 1.4352)
HEADLINE_Y0 = 1.4353

EXPLICIT = SchemeKind("explicit_reflected")
IMPLICIT = SchemeKind("implicit_reflected")
ALL_KINDS = (EXPLICIT, IMPLICIT, SchemeKind("explicit_penalized", 100.0),
             SchemeKind("implicit_penalized", 100.0))


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)


@lru_cache(maxsize=None)
def benchmark_solve(tag: str, n: int, p: float | None = None, retain: tuple = ()):
    kind = SchemeKind(tag, p)
    start = time.perf_counter()
    sol = solve(BENCHMARK, BENCHMARK.params(n), kind, retain=retain or False)
    return sol, time.perf_counter() - start


def test_table_reproduction():
    rows, worst, slowest = [], 0.0, 0.0
    for n, ref in zip(TABLE_N, TABLE_Y0):
        sol, wall = benchmark_solve("explicit_reflected", n)
        err = abs(sol.y0 - ref)
        worst = max(worst, err)
        slowest = max(slowest, wall)
        rows.append(f"n={n} y0={sol.y0:.4f} (ref {ref:.4f}, err {err:.1e})")
    ok = worst <= 5e-3 and slowest < 60
    record("Table reproduction (explicit reflected, 7 grid sizes, +-5e-3)", ok,
           f"worst error {worst:.3e}, slowest solve {slowest:.1f}s; " + "; ".join(rows))
    assert ok


def test_penalized_headline():
    pen, _ = benchmark_solve("explicit_penalized", 400, 20000.0)
    ref, _ = benchmark_solve("explicit_reflected", 400)
    err = abs(pen.y0 - HEADLINE_Y0)
    gap = abs(pen.y0 - ref.y0)
    ok = err <= 5e-3 and gap <= 2e-3
    record("Penalized headline (n=400, p=20000)", ok,
           f"y0={pen.y0:.6f} vs {HEADLINE_Y0} (err {err:.3e}, tol 5e-3); "
           f"|penalized - reflected| = {gap:.3e} (tol 2e-3)")
    assert ok


def test_oracle_equivalence():
    # the benchmark example runs on T = 0.1 so that delta * C_g < 1 for n >= 1
    problems = (benchmark_example(T=0.1), ito_example())
    worst = 0.0
    for prob, n, kind in itertools.product(problems, (2, 3, 4, 5), ALL_KINDS):
        worst = max(worst, compare_lattice_vs_tree(prob, prob.params(n), kind))
    ok = worst <= 1e-12
    record("Oracle equivalence (lattice vs full tree, n=2..5, 4 schemes, 2 problems)", ok,
           f"max discrepancy {worst:.3e} (tol 1e-12)")
    assert ok


def test_constraint_equivalence_both_directions():
    worst_fwd = worst_bwd = 0.0
    detected = []
    for prob in (benchmark_example(T=0.1), ito_example()):
        for n in (2, 3, 4, 5):  # n = 1 violates delta * C_g < 1 on the unit horizon
            prm = prob.params(n)
            tree = solve_full_tree(prob, prm, IMPLICIT)
            rep = check_constraint_equivalence(tree, prob, prm)
            worst_fwd = max(worst_fwd, max(rep.forward.values()))
            worst_bwd = max(worst_bwd, max(rep.backward.values()))
            for j in range(n):
                for field in ("y", "a", "k"):
                    bad = copy.deepcopy(tree)
                    values = getattr(bad.depths[j].sol, field)
                    values[int(np.argmax(values))] += 1e-3
                    detected.append(check_constraint_equivalence(bad, prob, prm).max_residual
                                    >= 1e-4)
    ok = worst_fwd <= 1e-10 and worst_bwd <= 1e-10 and all(detected)
    record("Constraint equivalence, both directions (n=2..5) + fault detection", ok,
           f"forward {worst_fwd:.3e}, backward {worst_bwd:.3e} (tol 1e-10); "
           f"{sum(detected)}/{len(detected)} injected 1e-3 faults detected")
    assert ok


def test_invariant_suite_reflected():
    worst = dict.fromkeys(INVARIANT_TOLERANCES, 0.0)
    for tag, n in itertools.product(("explicit_reflected", "implicit_reflected"), TABLE_N):
        sol, _ = benchmark_solve(tag, n)
        for key, value in invariant_suite(sol, BENCHMARK).rows.items():
            if value is not None:
                worst[key] = max(worst[key], value)
    ok = all(worst[k] <= INVARIANT_TOLERANCES[k] for k in worst)
    record("Invariant suite on reflected solves (n up to 400)", ok,
           ", ".join(f"{k} {v:.2e}" for k, v in worst.items() if k != "penalty"))
    assert ok


def test_explicit_implicit_gap_rate():
    points = []
    for n in (10, 20, 40, 80, 160):
        ex, _ = benchmark_solve("explicit_reflected", n, retain=("y",))
        im, _ = benchmark_solve("implicit_reflected", n, retain=("y",))
        points.append((BENCHMARK.T / n, max(layer_gaps(ex, im, "y"))))
    slope = rate_fit(points)
    ok = 1.5 <= slope <= 2.5
    record("Explicit-implicit gap rate (n=10..160)", ok,
           f"slope {slope:.3f} in [1.5, 2.5]; gaps "
           + ", ".join(f"{g:.2e}" for _, g in points))
    assert ok


def test_penalization_trend():
    ps = (10.0, 100.0, 1000.0, 10000.0)
    ref, _ = benchmark_solve("implicit_reflected", 100, retain=("y", "z", "u", "a", "k"))
    gaps = [scheme_gap(ref, benchmark_solve("implicit_penalized", 100, p,
                                        retain=("y", "z", "u", "a", "k"))[0],
                       mc_paths=100_000, seed=2024) for p in ps]
    metrics = {
        "sup_y": [g.sup_y_gap for g in gaps],
        "int_z": [g.int_z_gap for g in gaps],
        "int_u": [g.int_u_gap for g in gaps],
        "alpha_T": [g.alpha_gap_at[-1][1] for g in gaps],
    }
    parts, ok = [], True
    for name, vals in metrics.items():
        monotone = all(b <= 1.1 * a for a, b in zip(vals, vals[1:]))
        slope = rate_fit(zip(ps, vals))
        ok &= monotone and slope <= -0.4
        parts.append(f"{name} slope {slope:.2f}{'' if monotone else ' (not monotone)'}")
    record("Penalization trend (n=100, p=10..1e4)", ok, "; ".join(parts))
    assert ok


def test_increment_law_exactness():
    worst = 0.0
    for n, T, lam in itertools.product((1, 10, 100, 400), (0.1, 1.0, 3.0), (0.5, 5.0, 20.0)):
        prm = make_params(n, T, lam)
        w = np.array(child_weights(prm))
        e, eta = BRANCH_E, branch_eta(prm)
        mu = e * eta
        var = prm.kappa * (1 - prm.kappa)
        errs = [abs(np.dot(w, x)) for x in (e, eta, mu)]
        errs += [abs(np.dot(w, e * e) - 1), abs(np.dot(w, eta * eta) - var),
                 abs(np.dot(w, mu * mu) - var)]
        errs += [abs(np.dot(w, a * b)) for a, b in itertools.combinations((e, eta, mu), 2)]
        worst = max(worst, max(errs))
    ok = worst <= 1e-14
    record("Increment-law exactness", ok, f"max moment error {worst:.3e} (tol 1e-14)")
    assert ok


def test_apriori_boundedness():
    schemes = (("explicit_reflected", None), ("implicit_reflected", None),
               ("implicit_penalized", 1000.0))
    parts, ok = [], True
    for tag, p in schemes:
        sums = [apriori_sums(benchmark_solve(tag, n, p)[0]).as_dict() for n in TABLE_N]
        for key in sums[0]:
            vals = [s[key] for s in sums]
            bounded = all(np.isfinite(vals)) and max(vals) <= 2 * median(vals)
            ok &= bounded
            if not bounded:
                parts.append(f"{tag}:{key} max/median {max(vals) / median(vals):.2f}")
        worst = max(max(s[k] for s in sums) / median(s[k] for s in sums) for k in sums[0]
                    if median(s[k] for s in sums) > 0)
        parts.append(f"{tag}{'' if p is None else f'(p={p:g})'} worst max/median {worst:.2f}")
    record("A-priori boundedness over n=10..400", ok, "; ".join(parts))
    assert ok
