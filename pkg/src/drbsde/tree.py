"""Brute-force solver on the full, non-recombining tree of histories.

Depth ``j`` holds all ``4**j`` histories; the children of history ``h`` are
``4h .. 4h+3`` in branch order.  Barriers are accumulated along each history,
so path-dependent barriers are handled exactly.  This is the ground truth for
the lattice solver and for the equivalence checks of the implicit scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import PreconditionError
from .lattice import (BRANCH_E, BRANCH_JUMP, BranchValues, LatticeParams, NodeState,
                      branch_eta, child_weights, cond_exp, layer_state, martingale_coeffs)
from .problems import (ORDER_RTOL, ClosedForm, ItoConstant, ItoPathwise, Problem, advance_barrier,
                       canonical_projection, eval_barrier_layer, initial_barrier)
from .schemes import (IMPLICIT_REFLECTED, PRECONDITIONS, LatticeSolution, NodeSolution,
                      SchemeKind, SolveConfig, layer_moments, solve, step)

MAX_TREE_DEPTH = 8


@dataclass
class TreeDepth:
    """All histories of one depth: states, barrier values, weights and solution."""

    t: float
    w: np.ndarray
    ntilde: np.ndarray
    k: np.ndarray
    m: np.ndarray
    xi: np.ndarray
    zeta: np.ndarray
    prob: np.ndarray
    sol: NodeSolution | None = None

    @property
    def node(self) -> NodeState:
        return NodeState(self.t, self.w, self.ntilde)


@dataclass
class TreeSolution:
    params: LatticeParams
    kind: SchemeKind
    depths: list[TreeDepth]
    moments: list[dict[str, float]] = field(default_factory=list)

    @property
    def y0(self) -> float:
        return float(self.depths[0].sol.y[0])

    def children(self, j: int, name: str = "y") -> BranchValues:
        values = getattr(self.depths[j + 1].sol, name).reshape(-1, 4)
        return BranchValues(*values.T)


def build_histories(problem: Problem, params: LatticeParams) -> list[TreeDepth]:
    """Enumerate every history up to depth ``n`` with its state and barrier values."""
    if params.n > MAX_TREE_DEPTH:
        raise PreconditionError(f"tree depth {params.n} exceeds the cap {MAX_TREE_DEPTH}")
    weights = np.array(child_weights(params))
    eta = branch_eta(params)
    zero = np.zeros(1)
    depth = TreeDepth(t=0.0, w=zero, ntilde=zero, k=np.zeros(1, int), m=np.zeros(1, int),
                      xi=np.array([initial_barrier(problem.lower)]),
                      zeta=np.array([initial_barrier(problem.upper)]), prob=np.ones(1))
    depths = [depth]
    for j in range(params.n):
        size = depth.w.size
        rep = (lambda a: np.repeat(a, 4))
        e_b, eta_b = np.tile(BRANCH_E, size), np.tile(eta, size)
        w, nt = rep(depth.w), rep(depth.ntilde)
        xi = advance_barrier(problem.lower, params, rep(depth.xi), depth.t, w, nt, e_b, eta_b)
        zeta = advance_barrier(problem.upper, params, rep(depth.zeta), depth.t, w, nt, e_b, eta_b)
        depth = TreeDepth(
            t=params.time(j + 1),
            w=w + params.sqrt_delta * e_b,
            ntilde=nt + eta_b,
            k=rep(depth.k) + np.tile((BRANCH_E > 0).astype(int), size),
            m=rep(depth.m) + np.tile(BRANCH_JUMP.astype(int), size),
            xi=np.broadcast_to(xi, (4 * size,)).astype(float),
            zeta=np.broadcast_to(zeta, (4 * size,)).astype(float),
            prob=rep(depth.prob) * np.tile(weights, size),
        )
        depths.append(depth)
    return depths


def _check_tree_preconditions(problem, params, kind, depths):
    failures = []
    wanted = PRECONDITIONS[kind.tag]
    if "contraction" in wanted and params.delta * problem.driver.lipschitz_const >= 1:
        failures.append("contraction")
    if "ordered" in wanted and any(np.any(d.xi - d.zeta > ORDER_RTOL * (1 + np.abs(d.xi) + np.abs(d.zeta)))
                                      for d in depths):
        failures.append("ordered")
    if "terminal" in wanted and np.max(np.abs(depths[-1].xi - depths[-1].zeta)) > 1e-10:
        failures.append("terminal")
    if failures:
        raise PreconditionError(f"tree solve preconditions failed: {failures}")


def solve_full_tree(problem: Problem, params: LatticeParams, kind: SchemeKind,
                    cfg: SolveConfig | None = None, *, validate: bool = True) -> TreeSolution:
    """Backward sweep over all ``4**j`` histories with the lattice steppers."""
    cfg = cfg or SolveConfig()
    depths = build_histories(problem, params)
    if validate:
        _check_tree_preconditions(problem, params, kind, depths)
    last = depths[-1]
    zero = np.zeros_like(last.xi)
    last.sol = NodeSolution(last.xi.copy(), zero, zero, zero, zero, zero)
    for j in range(params.n - 1, -1, -1):
        d = depths[j]
        child_y = BranchValues(*depths[j + 1].sol.y.reshape(-1, 4).T)
        sol = step(kind, child_y, d.node, d.xi, d.zeta, params, problem.driver, cfg)
        d.sol = NodeSolution(*(np.broadcast_to(f, d.xi.shape).astype(float)
                               for f in sol.as_tuple()))
    moments = [layer_moments(d.sol, d.prob) for d in depths]
    return TreeSolution(params=params, kind=kind, depths=depths, moments=moments)


def lattice_counterpart(problem: Problem, params: LatticeParams) -> Problem:
    """The problem the lattice can solve: path-dependent barriers are projected."""
    if problem.recombining:
        return problem
    return replace(problem, lower=canonical_projection(problem.lower, params),
                   upper=canonical_projection(problem.upper, params))


def tree_vs_lattice(tree: TreeSolution, lattice: LatticeSolution) -> float:
    """Largest difference over all histories, depths and the six fields."""
    worst = 0.0
    for j, d in enumerate(tree.depths):
        for name in ("y", "z", "u", "v", "a", "k"):
            lat = lattice.field(name, j)[d.k, d.m]
            worst = max(worst, float(np.max(np.abs(lat - getattr(d.sol, name)))))
    return worst


def compare_lattice_vs_tree(problem: Problem, params: LatticeParams, kind: SchemeKind,
                            cfg: SolveConfig | None = None, *, validate: bool = True) -> float:
    """Solve on both structures and return the maximum discrepancy.

    Path-dependent barriers are replaced on the lattice side by their value
    along a representative path, so a non-zero result is expected there.
    """
    if params.n > 6:
        raise PreconditionError("lattice/tree comparison is limited to n <= 6")
    tree = solve_full_tree(problem, params, kind, cfg, validate=validate)
    lattice = solve(lattice_counterpart(problem, params), params, kind, cfg, validate=validate)
    return tree_vs_lattice(tree, lattice)


# -- equivalence of the constrained and closed-form implicit systems --------

@dataclass
class EquivalenceReport:
    """Worst residuals of both implication directions.

    ``forward`` rows check that the closed-form (Psi-inverse) solution
    satisfies the constrained system; ``backward`` rows check that the
    constrained system solved independently (by case enumeration) satisfies
    the closed-form formulas and coincides with the stored solution.
    """

    forward: dict[str, float]
    backward: dict[str, float]

    @property
    def max_residual(self) -> float:
        return max(max(self.forward.values()), max(self.backward.values()))


def _bisect_increasing(fn, target, lo, hi, iters=200):
    lo, hi = np.array(lo, dtype=float), np.array(hi, dtype=float)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = fn(mid) < target
        lo, hi = np.where(below, mid, lo), np.where(below, hi, mid)
        if np.all(hi - lo <= 2 * np.finfo(float).eps * np.maximum(1.0, np.abs(lo))):
            break
    return 0.5 * (lo + hi)


def enumerate_constrained_step(mean, node: NodeState, z, u, xi, zeta, delta, driver):
    """Solve one node of the constrained implicit system by case analysis.

    The candidates are: interior (no push, ``y - delta g(y) = mean`` solved
    by bisection), resting on the lower barrier with ``a >= 0``, or on the
    upper barrier with ``k >= 0``.  Returns ``(y, a, k)``.
    """
    def psi(y):
        return y - delta * driver(node.t, node.w, node.ntilde, y, z, u)

    c = driver.lipschitz_const * delta
    radius = delta * np.abs(driver(node.t, node.w, node.ntilde, mean, z, u)) / (1 - c)
    pad = 1e-9 * np.maximum(1.0, np.abs(mean)) + 1.01 * radius
    y_int = _bisect_increasing(psi, mean, mean - pad, mean + pad)
    a_low = psi(xi) - mean
    k_up = mean - psi(zeta)
    interior = (y_int >= xi) & (y_int <= zeta)
    on_lower = ~interior & (a_low >= 0)
    y = np.where(interior, y_int, np.where(on_lower, xi, zeta))
    a = np.where(on_lower, a_low, 0.0)
    k = np.where(~interior & ~on_lower, k_up, 0.0)
    return y, a, k


def check_constraint_equivalence(tree: TreeSolution, problem: Problem,
                                 params: LatticeParams) -> EquivalenceReport:
    """Verify both directions of the constrained/closed-form equivalence on a tree."""
    if tree.kind.tag != IMPLICIT_REFLECTED:
        raise ValueError("equivalence check applies to the implicit reflected scheme")
    driver = problem.driver
    delta = params.delta
    fwd = dict.fromkeys(("terminal", "equation", "coefficients", "sign", "complementarity",
                         "sandwich", "skorokhod"), 0.0)
    bwd = dict.fromkeys(("lower_push_formula", "upper_push_formula", "inverse_formula",
                         "matches_solution"), 0.0)
    last = tree.depths[-1]
    fwd["terminal"] = float(np.max(np.abs(last.sol.y - last.xi)))

    def bump(rows, key, value):
        rows[key] = max(rows[key], float(np.max(value)))

    for j in range(params.n):
        d = tree.depths[j]
        s = d.sol
        node = d.node
        child = tree.children(j)
        mean = cond_exp(child, params)
        z, u, v = martingale_coeffs(child, params)
        scale = 1.0 + np.abs(s.y)
        g_y = driver(node.t, node.w, node.ntilde, s.y, s.z, s.u)
        bump(fwd, "equation", np.abs(s.y - mean - delta * g_y - s.a + s.k) / scale)
        bump(fwd, "coefficients", np.maximum.reduce([np.abs(z - s.z), np.abs(u - s.u),
                                                     np.abs(v - s.v)]) / scale)
        bump(fwd, "sign", np.maximum(np.maximum(-s.a, -s.k), 0.0))
        bump(fwd, "complementarity", np.abs(s.a * s.k))
        bump(fwd, "sandwich", np.maximum(np.maximum(d.xi - s.y, s.y - d.zeta), 0.0))
        bump(fwd, "skorokhod", np.maximum(np.abs((s.y - d.xi) * s.a),
                                          np.abs((d.zeta - s.y) * s.k)) / scale)

        y_e, a_e, k_e = enumerate_constrained_step(mean, node, z, u, d.xi, d.zeta, delta, driver)
        g_xi = driver(node.t, node.w, node.ntilde, d.xi, z, u)
        g_zeta = driver(node.t, node.w, node.ntilde, d.zeta, z, u)
        psi_y = y_e - delta * driver(node.t, node.w, node.ntilde, y_e, z, u)
        bump(bwd, "lower_push_formula",
             np.abs(a_e - np.maximum(-(mean + delta * g_xi - d.xi), 0.0)) / scale)
        bump(bwd, "upper_push_formula",
             np.abs(k_e - np.maximum(mean + delta * g_zeta - d.zeta, 0.0)) / scale)
        bump(bwd, "inverse_formula", np.abs(psi_y - (mean + a_e - k_e)) / scale)
        bump(bwd, "matches_solution", np.maximum.reduce(
            [np.abs(y_e - s.y), np.abs(a_e - s.a), np.abs(k_e - s.k)]) / scale)
    return EquivalenceReport(forward=fwd, backward=bwd)


# -- a priori bounds on the pushes ---------------------------------------------

@dataclass
class FineBoundsReport:
    ok: bool
    max_violation_a: float
    max_violation_k: float
    min_slack_a: float
    min_slack_k: float
    active_a: int
    active_k: int


def _drift(barrier, t, w, ntilde):
    if isinstance(barrier, ClosedForm):
        raise TypeError("push bounds need Itô barriers with a known drift")
    b, _, _ = barrier.coefficients(t, w, ntilde)
    return b


def _fine_bound_layers(solution, problem, params):
    if isinstance(solution, TreeSolution):
        for d in solution.depths[:-1]:
            yield d.node, d.xi, d.zeta, d.sol
    else:
        if not isinstance(problem.lower, ItoConstant) or not isinstance(problem.upper, ItoConstant):
            raise TypeError("lattice push bounds need constant-coefficient Itô barriers")
        for j in range(params.n):
            t, w, nt = layer_state(params, j)
            sol = NodeSolution(*(solution.field(f, j) for f in ("y", "z", "u", "v", "a", "k")))
            yield (NodeState(t, w, nt), eval_barrier_layer(problem.lower, params, j),
                   eval_barrier_layer(problem.upper, params, j), sol)


def check_fine_bounds(solution, problem: Problem, params: LatticeParams,
                      tol: float = 1e-12) -> FineBoundsReport:
    """Check ``a <= delta (b_lower + g(lower))^-`` and ``k <= delta (b_upper + g(upper))^+``.

    Both hold for the implicit reflected scheme whenever the barriers are
    Itô processes, because the one-step expectation of a barrier moves by
    exactly ``delta`` times its drift.  Accepts a tree solution (any Itô
    barrier) or a fully retained lattice solution (constant coefficients).
    """
    if isinstance(problem.lower, ClosedForm) or isinstance(problem.upper, ClosedForm):
        raise TypeError("push bounds need Itô barriers with a known drift")
    driver = problem.driver
    delta = params.delta
    worst_a = worst_k = -np.inf
    slack_a = slack_k = np.inf
    active_a = active_k = 0
    for node, xi, zeta, sol in _fine_bound_layers(solution, problem, params):
        b_lo = _drift(problem.lower, node.t, node.w, node.ntilde)
        b_hi = _drift(problem.upper, node.t, node.w, node.ntilde)
        bound_a = delta * np.maximum(-(b_lo + driver(node.t, node.w, node.ntilde, xi, sol.z, sol.u)), 0.0)
        bound_k = delta * np.maximum(b_hi + driver(node.t, node.w, node.ntilde, zeta, sol.z, sol.u), 0.0)
        gap_a = np.asarray(sol.a - bound_a)
        gap_k = np.asarray(sol.k - bound_k)
        worst_a, worst_k = max(worst_a, float(gap_a.max())), max(worst_k, float(gap_k.max()))
        slack_a, slack_k = min(slack_a, float((-gap_a).min())), min(slack_k, float((-gap_k).min()))
        active_a += int(np.count_nonzero(np.asarray(sol.a) > 0))
        active_k += int(np.count_nonzero(np.asarray(sol.k) > 0))
    return FineBoundsReport(ok=worst_a <= tol and worst_k <= tol, max_violation_a=worst_a,
                            max_violation_k=worst_k, min_slack_a=slack_a, min_slack_k=slack_k,
                            active_a=active_a, active_k=active_k)
