"""Full-history tree oracle, lattice agreement, constraint equivalence and push bounds."""

import copy

import numpy as np
import pytest

from conftest import flat_problem
from drbsde.exceptions import PreconditionError
from drbsde.lattice import child_weights, cond_exp, sample_path
from drbsde.problems import ItoConstant, Problem, pathwise_example, zero_driver
from drbsde.schemes import SchemeKind, path_cumulative, solve
from drbsde.tree import (build_histories, check_constraint_equivalence, check_fine_bounds,
                         compare_lattice_vs_tree, solve_full_tree)

ALL_KINDS = [SchemeKind("explicit_reflected"), SchemeKind("implicit_reflected"),
             SchemeKind("explicit_penalized", 100.0), SchemeKind("implicit_penalized", 100.0)]
IMPLICIT = SchemeKind("implicit_reflected")


def test_history_probabilities_sum_to_one(benchmark):
    depths = build_histories(benchmark, benchmark.params(6))
    for j, d in enumerate(depths):
        assert d.prob.size == 4 ** j
        assert abs(d.prob.sum() - 1) <= 1e-14


def test_depth_cap(benchmark):
    with pytest.raises(PreconditionError):
        build_histories(benchmark, benchmark.params(9))
    with pytest.raises(PreconditionError):
        compare_lattice_vs_tree(benchmark, benchmark.params(7), SchemeKind("explicit_penalized", 1.0))


def test_tower_property_over_random_histories(benchmark):
    prm = benchmark.params(5)
    rng = np.random.default_rng(0)
    f = rng.standard_normal(4 ** 5)
    w = np.array(child_weights(prm))
    # two successive one-step expectations from depth 5 down to depth 3
    one = cond_exp(tuple(f.reshape(-1, 4).T), prm)
    two = cond_exp(tuple(one.reshape(-1, 4).T), prm)
    direct = (f.reshape(-1, 16) * np.kron(w, w)).sum(axis=1)
    assert np.allclose(two, direct, atol=1e-14)


def test_constant_problem_on_tree(constant):
    tree = solve_full_tree(constant, constant.params(4), IMPLICIT)
    assert all(np.all(d.sol.y == 1.7) for d in tree.depths)


@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
@pytest.mark.parametrize("which", ["benchmark_short", "ito"])
def test_lattice_matches_tree(which, kind, request):
    prob = request.getfixturevalue(which)
    assert compare_lattice_vs_tree(prob, prob.params(3), kind) <= 1e-12


def test_path_dependent_negative_control():
    prob = pathwise_example()
    assert compare_lattice_vs_tree(prob, prob.params(3), SchemeKind("explicit_reflected")) > 1e-3


def test_tree_moments_match_lattice(benchmark_short):
    prm = benchmark_short.params(4)
    tree = solve_full_tree(benchmark_short, prm, IMPLICIT)
    lat = solve(benchmark_short, prm, IMPLICIT)
    for tm, lm in zip(tree.moments, lat.moments):
        for key in tm:
            assert tm[key] == pytest.approx(lm[key], abs=1e-12)


def test_cumulative_pushes_match_tree_history_sums(benchmark_short):
    prm = benchmark_short.params(4)
    kind = SchemeKind("explicit_reflected")
    tree = solve_full_tree(benchmark_short, prm, kind)
    lat = solve(benchmark_short, prm, kind)
    for seed in range(5):
        path = sample_path(prm, seed)
        A, K, _ = path_cumulative(lat, path)
        branch = (path[:, 0] < 0).astype(int) + 2 * (path[:, 1] > 0)
        h, a_sum, k_sum = 0, 0.0, 0.0
        for j in range(prm.n + 1):
            a_sum += tree.depths[j].sol.a[h]
            k_sum += tree.depths[j].sol.k[h]
            assert A[j] == pytest.approx(a_sum, abs=1e-12)
            assert K[j] == pytest.approx(k_sum, abs=1e-12)
            if j < prm.n:
                h = 4 * h + branch[j]


# -- constrained / closed-form equivalence ---------------------------------------

def test_equivalence_trivial_problem():
    prob = flat_problem(-5.0, 5.0, driver=zero_driver())
    tree = solve_full_tree(prob, prob.params(3), IMPLICIT, validate=False)
    report = check_constraint_equivalence(tree, prob, prob.params(3))
    assert report.max_residual == 0.0


@pytest.mark.parametrize("which", ["benchmark_short", "ito"])
def test_equivalence_holds(which, request):
    prob = request.getfixturevalue(which)
    tree = solve_full_tree(prob, prob.params(4), IMPLICIT)
    assert check_constraint_equivalence(tree, prob, prob.params(4)).max_residual <= 1e-10


def test_equivalence_detects_fault(ito):
    prm = ito.params(4)
    tree = solve_full_tree(ito, prm, IMPLICIT)
    bad = copy.deepcopy(tree)
    bad.depths[2].sol.y[5] += 1e-3
    assert check_constraint_equivalence(bad, ito, prm).max_residual >= 1e-4


def test_equivalence_rejects_other_schemes(ito):
    tree = solve_full_tree(ito, ito.params(2), SchemeKind("explicit_reflected"))
    with pytest.raises(ValueError):
        check_constraint_equivalence(tree, ito, ito.params(2))


# -- push bounds -----------------------------------------------------------------

def test_nonnegative_drift_forbids_lower_push():
    prob = Problem(driver=zero_driver(), lower=ItoConstant(0.0, 0.5, 0.3, 0.2),
                   upper=ItoConstant(1.0, 0.0, 0.3, 0.2), T=1.0, lam=2.0)
    tree = solve_full_tree(prob, prob.params(4), IMPLICIT, validate=False)
    report = check_fine_bounds(tree, prob, prob.params(4))
    assert report.ok
    assert all(np.all(d.sol.a == 0) for d in tree.depths)


def test_bounds_hold_with_slack():
    lower = ItoConstant(0.0, -1.0, 0.1, 0.0)
    prob = Problem(driver=zero_driver(), lower=lower, upper=ItoConstant(1.0, -1.0, 0.1, 0.0),
                   T=1.0, lam=1.0)
    prm = prob.params(4)
    tree = solve_full_tree(prob, prm, IMPLICIT, validate=False)
    report = check_fine_bounds(tree, prob, prm)
    assert report.ok
    # with the lower barrier active the bound is attained, up to rounding
    assert report.min_slack_a >= -1e-12 and report.min_slack_k >= -1e-12
    assert report.active_a > 0


def test_bounds_detect_fault(ito):
    prm = ito.params(4)
    tree = solve_full_tree(ito, prm, IMPLICIT)
    assert check_fine_bounds(tree, ito, prm).ok
    bad = copy.deepcopy(tree)
    bad.depths[1].sol.a[2] += 1e-3
    assert not check_fine_bounds(bad, ito, prm).ok


def test_bounds_on_lattice_and_pathwise(ito):
    prm = ito.params(60)
    report = check_fine_bounds(solve(ito, prm, IMPLICIT), ito, prm)
    assert report.ok and report.active_a > 0 and report.active_k > 0
    pw = pathwise_example()
    tree = solve_full_tree(pw, pw.params(5), IMPLICIT)
    assert check_fine_bounds(tree, pw, pw.params(5)).ok


def test_bounds_need_ito_barriers(benchmark_short):
    tree = solve_full_tree(benchmark_short, benchmark_short.params(2), IMPLICIT)
    with pytest.raises(TypeError):
        check_fine_bounds(tree, benchmark_short, benchmark_short.params(2))
