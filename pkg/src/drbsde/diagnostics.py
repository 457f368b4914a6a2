"""Observables for the convergence theory: a-priori sums, scheme gaps, rates,
invariant residuals and the step-count threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .lattice import LatticeParams, layer_children, layer_probabilities, layer_state, sample_paths
from .lattice import NodeState
from .problems import Problem, eval_barrier_layer
from .schemes import (FIELDS, RESIDUAL_ROWS, LatticeSolution, NodeSolution, node_residuals,
                      path_cumulative)

DEFAULT_MC_PATHS = 100_000
DEFAULT_ALPHA_TIMES = (0.25, 0.5, 0.75, 1.0)

# worst acceptable value of each invariant row; ``0.0`` means exact
INVARIANT_TOLERANCES = {
    "sign": 0.0,
    "complementarity": 0.0,
    "sandwich": 1e-10,
    "skorokhod": 1e-10,
    "equation": 1e-11,
    "penalty": 1e-10,
    "terminal": 0.0,
}


# -- a priori sums -----------------------------------------------------------

@dataclass
class AprioriSums:
    sup_y2: float
    sum_z2: float
    sum_u2: float
    sum_a2: float
    sum_k2: float

    def as_dict(self) -> dict[str, float]:
        return dict(sup_y2=self.sup_y2, sum_z2=self.sum_z2, sum_u2=self.sum_u2,
                    sum_a2=self.sum_a2, sum_k2=self.sum_k2)


def apriori_sums_from_moments(moments, params: LatticeParams, p: float | None = None) -> AprioriSums:
    """Normalized sums from per-layer second moments (``moments[j]['y2']`` ...).

    Pushes are normalized by ``1/delta``, or by ``1/(p delta)`` for a
    penalized solution.  The last layer carries no increments.
    """
    inner = moments[:-1]
    delta, kappa = params.delta, params.kappa
    push_norm = 1.0 / delta if p is None else (0.0 if p == 0 else 1.0 / (p * delta))
    return AprioriSums(
        sup_y2=max(m["y2"] for m in moments),
        sum_z2=delta * math.fsum(m["z2"] for m in inner),
        sum_u2=kappa * (1 - kappa) * math.fsum(m["u2"] for m in inner),
        sum_a2=push_norm * math.fsum(m["a2"] for m in inner),
        sum_k2=push_norm * math.fsum(m["k2"] for m in inner),
    )


def apriori_sums(solution, problem: Problem | None = None) -> AprioriSums:
    """Exact a-priori sums of a lattice or tree solution."""
    return apriori_sums_from_moments(solution.moments, solution.params, solution.kind.p)


# -- scheme gaps ---------------------------------------------------------------

@dataclass
class GapNorms:
    sup_y_gap: float
    int_y_gap: float
    int_z_gap: float
    int_u_gap: float
    alpha_gap_at: list[tuple[float, float, float]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(sup_y_gap=self.sup_y_gap, int_y_gap=self.int_y_gap,
                    int_z_gap=self.int_z_gap, int_u_gap=self.int_u_gap,
                    alpha_gap_at=[list(x) for x in self.alpha_gap_at])


def _alpha_gaps(solA, solB, mc_paths, seed, times, chunk=10_000):
    params = solA.params
    idx = [min(int(math.floor(t / params.delta + 1e-9)), params.n) for t in times]
    sums = np.zeros(len(idx))
    sq = np.zeros(len(idx))
    rng_paths = sample_paths(params, mc_paths, seed)
    for start in range(0, mc_paths, chunk):
        batch = rng_paths[start:start + chunk]
        _, _, alpha_a = path_cumulative(solA, batch)
        _, _, alpha_b = path_cumulative(solB, batch)
        # alpha_t sums the pushes at grid indices 0..floor(t/delta)
        sel = (alpha_a - alpha_b)[:, idx] ** 2
        sums += sel.sum(axis=0)
        sq += (sel ** 2).sum(axis=0)
    mean = sums / mc_paths
    var = np.maximum(sq / mc_paths - mean ** 2, 0.0)
    se = np.sqrt(var / max(mc_paths - 1, 1))
    return [(float(t), float(m), float(s)) for t, m, s in zip(times, mean, se)]


def layer_gaps(solA: LatticeSolution, solB: LatticeSolution, name: str = "y") -> list[float]:
    """``E[|A_j - B_j|^2]`` of one field for every layer ``j``."""
    if solA.params != solB.params:
        raise ValueError("solutions live on different lattices")
    params = solA.params
    last = params.n + 1 if name == "y" else params.n
    return [float(np.sum(layer_probabilities(params, j)
                         * (solA.field(name, j) - solB.field(name, j)) ** 2))
            for j in range(last)]


def scheme_gap(solA: LatticeSolution, solB: LatticeSolution, mc_paths: int = 0, seed: int = 0,
               times=DEFAULT_ALPHA_TIMES) -> GapNorms:
    """Squared-difference norms between two solves on the same lattice.

    The ``y``, ``z``, ``u`` norms are exact expectations over node
    probabilities.  The gap of the net push ``alpha = A - K`` is path
    dependent and is estimated by Monte Carlo over ``mc_paths`` sampled
    paths; each entry of ``alpha_gap_at`` is ``(t, estimate, std_error)``.
    """
    if solA.params != solB.params:
        raise ValueError("solutions live on different lattices")
    params = solA.params
    need = ("y", "z", "u") + (("a", "k") if mc_paths else ())
    for sol in (solA, solB):
        missing = [f for f in need if f not in sol.retained]
        if missing:
            raise ValueError(f"scheme_gap needs retained fields {missing}")
    ey, ez, eu = (layer_gaps(solA, solB, f) for f in ("y", "z", "u"))
    kk = params.kappa * (1 - params.kappa)
    alpha = _alpha_gaps(solA, solB, mc_paths, seed, times) if mc_paths else []
    return GapNorms(sup_y_gap=max(ey), int_y_gap=params.delta * math.fsum(ey[:-1]),
                    int_z_gap=params.delta * math.fsum(ez), int_u_gap=kk * math.fsum(eu),
                    alpha_gap_at=alpha)


# -- rates and thresholds ------------------------------------------------------

def rate_fit(points) -> float:
    """Least-squares slope of ``log(value)`` against ``log(scale)``."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("rate_fit needs at least three (scale, value) points")
    if np.any(pts <= 0):
        raise ValueError("rate_fit needs positive scales and values")
    slope, _ = np.polyfit(np.log(pts[:, 0]), np.log(pts[:, 1]), 1)
    return float(slope)


def n0_threshold(problem: Problem) -> float:
    """Step count from which the quantitative error estimates are proved.

    ``4 T (1 + C + C^2 + C^2 exp(2 lam T) / lam)`` with ``C`` the driver's
    Lipschitz constant.
    """
    c = problem.driver.lipschitz_const
    T, lam = problem.T, problem.lam
    return 4 * T * (1 + c + c * c + c * c * math.exp(2 * lam * T) / lam)


# -- invariants --------------------------------------------------------------

@dataclass
class InvariantReport:
    """Worst residual per row (``None`` when the row does not apply)."""

    rows: dict[str, float | None]
    tolerances: dict[str, float] = field(default_factory=lambda: dict(INVARIANT_TOLERANCES))
    worst_layer: dict[str, int | None] = field(default_factory=dict)

    def flags(self) -> dict[str, bool | None]:
        return {k: None if v is None else v > self.tolerances[k] for k, v in self.rows.items()}

    @property
    def ok(self) -> bool:
        return not any(self.flags().values())


def _merge(rows, where, j, layer_rows):
    for key, val in layer_rows.items():
        if val is None:
            continue
        if rows[key] is None or val > rows[key]:
            rows[key] = val
            where[key] = j


def invariant_suite(solution: LatticeSolution, problem: Problem,
                    params: LatticeParams | None = None) -> InvariantReport:
    """Worst constraint residuals over the whole lattice.

    With all fields retained, residuals are recomputed from the stored
    arrays (so tampering is detected); otherwise the per-layer residuals
    recorded during the sweep are used.
    """
    params = params or solution.params
    rows: dict[str, float | None] = dict.fromkeys(RESIDUAL_ROWS)
    where: dict[str, int | None] = dict.fromkeys(RESIDUAL_ROWS)
    n = params.n
    if solution.layers is not None and set(FIELDS) <= set(solution.retained):
        xi_n = eval_barrier_layer(problem.lower, params, n)
        last = solution.layers[n]
        _merge(rows, where, n, {"terminal": float(np.max(np.abs(last.y - xi_n))),
                                "sign": float(max(0.0, -np.min(last.a), -np.min(last.k)))})
        for j in range(n):
            t, w, nt = layer_state(params, j)
            layer = solution.layers[j]
            res = node_residuals(solution.kind, layer, layer_children(solution.layers[j + 1].y),
                                 NodeState(t, w, nt), eval_barrier_layer(problem.lower, params, j),
                                 eval_barrier_layer(problem.upper, params, j), params,
                                 problem.driver)
            _merge(rows, where, j, res)
    else:
        for s in solution.summaries:
            _merge(rows, where, s.j, s.residuals)
    if solution.kind.penalized:
        for key in ("complementarity", "sandwich", "skorokhod"):
            rows[key] = None
    else:
        rows["penalty"] = None
    return InvariantReport(rows=rows, worst_layer=where)


def perturbed(solution: LatticeSolution, name: str, j: int, k: int, m: int,
              eps: float) -> LatticeSolution:
    """Copy of a fully retained solution with one stored value shifted by ``eps``."""
    if solution.layers is None or name not in solution.retained:
        raise ValueError("fault injection needs the field to be retained")
    layers = list(solution.layers)
    arr = np.array(getattr(layers[j], name))
    arr[k, m] += eps
    layers[j] = replace(layers[j], **{name: arr})
    y0 = float(layers[0].y[0, 0]) if "y" in solution.retained else solution.y0
    return replace(solution, layers=layers, y0=y0)


# -- discrete Gronwall -----------------------------------------------------------

@dataclass
class GronwallCheck:
    hypothesis: bool
    conclusion: bool | None
    lhs: float
    bound: float


def discrete_gronwall_check(a: float, b: float, delta: float, v, alpha: float,
                            rtol: float = 1e-12) -> GronwallCheck:
    """Check ``v_j + alpha <= a + b delta sum_{i<=j} v_i`` and then
    ``max v + alpha <= a exp(b T)`` with ``T = delta len(v)``.

    The conclusion is evaluated only when the hypothesis holds; otherwise
    ``conclusion`` is ``None``.
    """
    v = np.asarray(v, dtype=float)
    if not delta * b < 1:
        raise ValueError("need delta * b < 1")
    if np.any(v < 0):
        raise ValueError("sequence must be nonnegative")
    rhs = a + b * delta * np.cumsum(v)
    lhs_seq = v + alpha
    hyp = bool(np.all(lhs_seq <= rhs + rtol * np.maximum(1.0, np.abs(rhs))))
    bound = a * math.exp(b * delta * v.size)
    lhs = float(v.max() + alpha) if v.size else float(alpha)
    if not hyp:
        return GronwallCheck(False, None, lhs, bound)
    return GronwallCheck(True, lhs <= bound * (1 + rtol), lhs, bound)
