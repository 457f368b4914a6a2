"""Backward schemes on the recombining lattice.

Four one-step updates are provided:

* explicit reflected: the driver sees the conditional expectation, then the
  value is projected onto ``[lower, upper]``;
* implicit reflected: the pushes ``a``/``k`` are computed from the driver
  evaluated on the barriers and the value is recovered by inverting
  ``y - delta g(y)``;
* implicit penalized: ``y - delta g(y) - p delta (y - lower)^- + p delta
  (upper - y)^-`` is inverted;
* explicit penalized: driver at the conditional expectation, penalty solved
  in closed form.

Every stepper works on floats or on broadcastable arrays, so the same code
serves single nodes, whole lattice layers and whole tree depths.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import NumericalFailure, PreconditionError
from .lattice import (BRANCH_E, LatticeParams, NodeState, branch_eta, cond_exp,
                      layer_children, layer_probabilities, layer_state,
                      martingale_coeffs, path_nodes)
from .problems import Driver, Problem, eval_barrier_layer, validate_problem

logger = logging.getLogger(__name__)

EPS = np.finfo(float).eps

EXPLICIT_REFLECTED = "explicit_reflected"
IMPLICIT_REFLECTED = "implicit_reflected"
IMPLICIT_PENALIZED = "implicit_penalized"
EXPLICIT_PENALIZED = "explicit_penalized"
SCHEME_TAGS = (EXPLICIT_REFLECTED, IMPLICIT_REFLECTED, IMPLICIT_PENALIZED, EXPLICIT_PENALIZED)
FIELDS = ("y", "z", "u", "v", "a", "k")


@dataclass(frozen=True)
class SchemeKind:
    tag: str
    p: float | None = None

    def __post_init__(self):
        tag = self.tag.replace("-", "_").lower()
        if tag not in SCHEME_TAGS:
            raise ValueError(f"unknown scheme {self.tag!r}; expected one of {SCHEME_TAGS}")
        object.__setattr__(self, "tag", tag)
        if self.penalized:
            if self.p is None or not (self.p >= 0 and math.isfinite(self.p)):
                raise ValueError(f"penalized scheme needs a finite p >= 0, got {self.p!r}")
        elif self.p is not None:
            raise ValueError("p is only meaningful for penalized schemes")

    @property
    def penalized(self) -> bool:
        return self.tag in (IMPLICIT_PENALIZED, EXPLICIT_PENALIZED)

    @property
    def reflected(self) -> bool:
        return not self.penalized

    @property
    def implicit(self) -> bool:
        return self.tag in (IMPLICIT_REFLECTED, IMPLICIT_PENALIZED)

    def __str__(self):
        return self.tag if self.p is None else f"{self.tag}(p={self.p:g})"


@dataclass(frozen=True)
class SolveConfig:
    root_tol: float = 1e-12
    max_iter: int = 200
    bracket_expansion: float = 2.0

    def __post_init__(self):
        if not self.root_tol > 0:
            raise ValueError("root_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not self.bracket_expansion > 1:
            raise ValueError("bracket_expansion must exceed 1")


@dataclass
class NodeSolution:
    """Values ``(y, z, u, v, a, k)`` at one node or over a whole layer."""

    y: object
    z: object
    u: object
    v: object
    a: object
    k: object

    def as_tuple(self):
        return tuple(getattr(self, f) for f in FIELDS)


# -- scalar root solvers -----------------------------------------------------

def _first_bad(mask) -> tuple | None:
    mask = np.asarray(mask)
    if not mask.any():
        return None
    return tuple(int(i) for i in np.argwhere(mask)[0])


def invert_implicit_map(target, node: NodeState, z, u, driver: Driver, delta: float,
                        cfg: SolveConfig | None = None):
    """Solve ``y - delta g(t, w, ntilde, y, z, u) = target`` by fixed-point iteration.

    The map ``y -> target + delta g(y)`` contracts with rate ``delta C_g``
    when that product is below one.  Iteration runs until the step stalls at
    rounding level, then the residual is checked against ``cfg.root_tol``.
    """
    cfg = cfg or SolveConfig()
    target = np.asarray(target, dtype=float)
    y = target.copy()
    for _ in range(cfg.max_iter):
        y_new = target + delta * driver(node.t, node.w, node.ntilde, y, z, u)
        stalled = np.abs(y_new - y) <= 8 * EPS * np.maximum(1.0, np.abs(y_new))
        y = y_new
        if np.all(stalled):
            break
    residual = np.abs(y - delta * driver(node.t, node.w, node.ntilde, y, z, u) - target)
    bad = ~(residual <= cfg.root_tol * np.maximum(1.0, np.abs(target)))
    if np.any(bad):
        raise NumericalFailure(
            f"implicit update did not converge (residual {np.max(residual):.3g})",
            node=_first_bad(bad))
    return y if y.ndim else float(y)


def penalized_map(y, node: NodeState, z, u, xi, zeta, p, driver: Driver, delta: float):
    """``y - delta g(y) - p delta (y - xi)^- + p delta (zeta - y)^-``."""
    pd = p * delta
    return (y - delta * driver(node.t, node.w, node.ntilde, y, z, u)
            - pd * np.maximum(xi - y, 0.0) + pd * np.maximum(y - zeta, 0.0))


def invert_penalized_map(target, node: NodeState, z, u, xi, zeta, p: float, driver: Driver,
                         delta: float, cfg: SolveConfig | None = None):
    """Invert the increasing penalized map by bracketing plus Illinois/bisection.

    Fixed-point iteration is not used because the penalty slope ``p delta``
    is typically far above one.  An element is finished once its residual is
    at rounding level or its bracket has collapsed.
    """
    cfg = cfg or SolveConfig()
    shape = np.broadcast(target, xi, zeta, z, u, node.t, node.w, node.ntilde).shape

    def flat(a):
        return np.broadcast_to(np.asarray(a, dtype=float), shape).ravel()

    T, W, N, Z, U, X, Zt, tgt = map(flat, (node.t, node.w, node.ntilde, z, u, xi, zeta, target))

    def F(idx, y):
        sub = NodeState(T[idx], W[idx], N[idx])
        return penalized_map(y, sub, Z[idx], U[idx], X[idx], Zt[idx], p, driver, delta) - tgt[idx]

    everything = np.arange(tgt.size)
    scale = np.maximum(1.0, np.abs(tgt))
    ftol = 4 * EPS * (1.0 + p * delta + delta * driver.lipschitz_const) * scale
    f0 = F(everything, tgt)
    width = np.abs(f0) + 1e-3 * scale
    lo = np.where(f0 > 0, tgt - width, tgt)
    hi = np.where(f0 > 0, tgt, tgt + width)
    flo, fhi = F(everything, lo), F(everything, hi)
    for _ in range(cfg.max_iter):
        need_lo, need_hi = flo > 0, fhi < 0
        if not (need_lo.any() or need_hi.any()):
            break
        width = width * cfg.bracket_expansion
        lo = np.where(need_lo, tgt - width, lo)
        hi = np.where(need_hi, tgt + width, hi)
        flo, fhi = F(everything, lo), F(everything, hi)
    bad = (flo > 0) | (fhi < 0) | ~np.isfinite(flo) | ~np.isfinite(fhi)
    if bad.any():
        raise NumericalFailure("could not bracket the penalized root",
                               node=_first_bad(bad.reshape(shape)))

    y = np.where(np.abs(flo) <= np.abs(fhi), lo, hi)
    resid = np.minimum(np.abs(flo), np.abs(fhi))
    act = np.flatnonzero(resid > ftol)
    lo, hi, flo, fhi = lo[act], hi[act], flo[act], fhi[act]
    last_side = np.zeros(act.size, dtype=np.int8)
    for it in range(cfg.max_iter):
        if act.size == 0:
            break
        mid = 0.5 * (lo + hi)
        if it % 3 == 2:
            cand = mid
        else:
            denom = fhi - flo
            secant = hi - fhi * (hi - lo) / np.where(denom > 0, denom, 1.0)
            cand = np.where((denom > 0) & (secant > lo) & (secant < hi), secant, mid)
        fc = F(act, cand)
        go_lo, go_hi = fc < 0, fc > 0
        # Illinois: halve the stale end when the same side moves twice.
        fhi = np.where(go_lo & (last_side == -1), 0.5 * fhi, fhi)
        flo = np.where(go_hi & (last_side == 1), 0.5 * flo, flo)
        lo, flo = np.where(go_lo, cand, lo), np.where(go_lo, fc, flo)
        hi, fhi = np.where(go_hi, cand, hi), np.where(go_hi, fc, fhi)
        last_side = np.where(go_lo, -1, np.where(go_hi, 1, last_side)).astype(np.int8)
        better = np.abs(fc) < resid[act]
        y[act] = np.where(better, cand, y[act])
        resid[act] = np.where(better, np.abs(fc), resid[act])
        done = (resid[act] <= ftol[act]) | (hi - lo <= 4 * EPS * np.maximum(1.0, np.abs(lo)))
        keep = ~done
        act, lo, hi, flo, fhi, last_side = (a[keep] for a in (act, lo, hi, flo, fhi, last_side))

    # The map's slope is up to 1 + p delta, so the tolerance is scaled by it.
    bad = ~(resid <= cfg.root_tol * scale * (1.0 + p * delta))
    if bad.any():
        raise NumericalFailure(
            f"penalized update did not converge (residual {np.max(resid):.3g})",
            node=_first_bad(bad.reshape(shape)))
    y = y.reshape(shape)
    return y if y.ndim else float(y)


# -- one-step updates ------------------------------------------------------

def _expectation_and_coeffs(child_y, params):
    return cond_exp(child_y, params), *martingale_coeffs(child_y, params)


def step_explicit_reflected(child_y, node: NodeState, xi, zeta, params: LatticeParams,
                            driver: Driver) -> NodeSolution:
    mean, z, u, v = _expectation_and_coeffs(child_y, params)
    x = mean + params.delta * driver(node.t, node.w, node.ntilde, mean, z, u)
    a = np.maximum(xi - x, 0.0)
    k = np.maximum(x - zeta, 0.0)
    # Projection instead of x + a - k keeps the barrier contacts exact.
    y = np.where(x < xi, xi, np.where(x > zeta, zeta, x))
    return NodeSolution(y, z, u, v, a, k)


def step_implicit_reflected(child_y, node: NodeState, xi, zeta, params: LatticeParams,
                            driver: Driver, cfg: SolveConfig | None = None) -> NodeSolution:
    mean, z, u, v = _expectation_and_coeffs(child_y, params)
    d = params.delta
    a = np.maximum(-(mean + d * driver(node.t, node.w, node.ntilde, xi, z, u) - xi), 0.0)
    k = np.maximum(mean + d * driver(node.t, node.w, node.ntilde, zeta, z, u) - zeta, 0.0)
    both = (a > 0) & (k > 0)
    if np.any(both):
        logger.warning("both reflections active at %d node(s); keeping the larger",
                       int(np.count_nonzero(both)))
        keep_a = a >= k
        a = np.where(both & ~keep_a, 0.0, a)
        k = np.where(both & keep_a, 0.0, k)
    y = invert_implicit_map(mean + a - k, node, z, u, driver, d, cfg)
    return NodeSolution(y, z, u, v, a, k)


def step_implicit_penalized(child_y, node: NodeState, xi, zeta, params: LatticeParams,
                            driver: Driver, p: float,
                            cfg: SolveConfig | None = None) -> NodeSolution:
    mean, z, u, v = _expectation_and_coeffs(child_y, params)
    d = params.delta
    y = invert_penalized_map(mean, node, z, u, xi, zeta, p, driver, d, cfg)
    a = p * d * np.maximum(xi - y, 0.0)
    k = p * d * np.maximum(y - zeta, 0.0)
    return NodeSolution(y, z, u, v, a, k)


def step_explicit_penalized(child_y, node: NodeState, xi, zeta, params: LatticeParams,
                            driver: Driver, p: float) -> NodeSolution:
    """Driver at the conditional expectation, penalty solved exactly.

    With ``x = E + delta g(E)`` the one-step equation
    ``y = x + p delta (y - xi)^- - p delta (zeta - y)^-`` has the closed
    form below; it coincides with the implicit penalized step when ``g = 0``.
    """
    mean, z, u, v = _expectation_and_coeffs(child_y, params)
    d = params.delta
    pd = p * d
    x = mean + d * driver(node.t, node.w, node.ntilde, mean, z, u)
    a = pd * np.maximum(xi - x, 0.0) / (1.0 + pd)
    k = pd * np.maximum(x - zeta, 0.0) / (1.0 + pd)
    return NodeSolution(x + a - k, z, u, v, a, k)


def step(kind: SchemeKind, child_y, node: NodeState, xi, zeta, params: LatticeParams,
         driver: Driver, cfg: SolveConfig | None = None) -> NodeSolution:
    """Dispatch to the stepper selected by ``kind``."""
    if kind.tag == EXPLICIT_REFLECTED:
        return step_explicit_reflected(child_y, node, xi, zeta, params, driver)
    if kind.tag == IMPLICIT_REFLECTED:
        return step_implicit_reflected(child_y, node, xi, zeta, params, driver, cfg)
    if kind.tag == IMPLICIT_PENALIZED:
        return step_implicit_penalized(child_y, node, xi, zeta, params, driver, kind.p, cfg)
    return step_explicit_penalized(child_y, node, xi, zeta, params, driver, kind.p)


# -- per-layer residuals and moments -----------------------------------------

RESIDUAL_ROWS = ("sign", "complementarity", "sandwich", "skorokhod", "equation",
                 "penalty", "terminal")
REFLECTED_ONLY = ("complementarity", "sandwich", "skorokhod")


def node_residuals(kind: SchemeKind, sol: NodeSolution, child_y, node: NodeState, xi, zeta,
                   params: LatticeParams, driver: Driver) -> dict[str, float | None]:
    """Worst constraint residuals of one computed layer (or node).

    Rows that do not apply to the scheme are ``None``.  The equation row
    rebuilds every child value from the node's ``(y, z, u, v, a, k)`` and is
    scaled by ``1 + |y| + |child|``.
    """
    y, z, u, v, a, k = (np.asarray(f, dtype=float) for f in sol.as_tuple())
    mean = cond_exp(child_y, params)
    arg = y if kind.implicit else mean
    drift = params.delta * driver(node.t, node.w, node.ntilde, arg, z, u)
    eta = branch_eta(params)
    sd = params.sqrt_delta
    eq = 0.0
    for b in range(4):
        child = np.asarray(child_y[b], dtype=float)
        rebuilt = (child + drift + a - k - sd * z * BRANCH_E[b] - u * eta[b]
                   - v * BRANCH_E[b] * eta[b])
        eq = max(eq, float(np.max(np.abs(y - rebuilt) / (1.0 + np.abs(y) + np.abs(child)))))
    out: dict[str, float | None] = dict.fromkeys(RESIDUAL_ROWS)
    out["sign"] = float(max(0.0, -np.min(a), -np.min(k)))
    out["equation"] = eq
    if kind.reflected:
        out["complementarity"] = float(np.max(np.abs(a * k)))
        out["sandwich"] = float(max(0.0, np.max(xi - y), np.max(y - zeta)))
        scale = 1.0 + np.abs(y)
        out["skorokhod"] = float(max(np.max(np.abs((y - xi) * a) / scale),
                                     np.max(np.abs((zeta - y) * k) / scale)))
    else:
        pd = kind.p * params.delta
        out["penalty"] = float(max(
            np.max(np.abs(a - pd * np.maximum(xi - y, 0.0)) / (1.0 + a)),
            np.max(np.abs(k - pd * np.maximum(y - zeta, 0.0)) / (1.0 + k))))
    return out


@dataclass
class LayerSummary:
    """Exact layer expectations and worst residuals recorded during the sweep."""

    j: int
    moments: dict[str, float]
    residuals: dict[str, float | None]


def layer_moments(sol: NodeSolution, prob: np.ndarray) -> dict[str, float]:
    return {f"{name}2": float(np.sum(prob * np.asarray(getattr(sol, name)) ** 2))
            for name in ("y", "z", "u", "v", "a", "k")}


# -- lattice solve --------------------------------------------------------------

@dataclass
class LatticeSolution:
    """Result of a backward sweep.

    ``layers[j]`` holds ``(j+1, j+1)`` arrays indexed ``[k, m]`` for the
    retained fields (``None`` elsewhere); ``layers`` itself is ``None`` when
    nothing was retained.  ``summaries`` are always available.
    """

    params: LatticeParams
    kind: SchemeKind
    problem_name: str
    y0: float
    summaries: list[LayerSummary]
    layers: list[NodeSolution] | None = None
    cpu_seconds: float = 0.0
    retained: tuple[str, ...] = field(default_factory=tuple)

    def field(self, name: str, j: int) -> np.ndarray:
        if self.layers is None or name not in self.retained:
            raise ValueError(f"field {name!r} was not retained by the solve")
        return getattr(self.layers[j], name)

    @property
    def moments(self) -> list[dict[str, float]]:
        return [s.moments for s in self.summaries]


PRECONDITIONS = {
    EXPLICIT_REFLECTED: ("contraction", "ordered", "terminal", "driver_bounded"),
    IMPLICIT_REFLECTED: ("contraction", "ordered", "terminal", "driver_bounded"),
    IMPLICIT_PENALIZED: ("contraction", "driver_bounded"),
    EXPLICIT_PENALIZED: ("driver_bounded",),
}


def check_preconditions(problem: Problem, params: LatticeParams, kind: SchemeKind) -> None:
    report = validate_problem(problem, params)
    relevant = [f for f in report.failures if f.split(":")[0] in PRECONDITIONS[kind.tag]]
    if relevant:
        raise PreconditionError("; ".join(relevant))


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.flags.writeable = False
    return arr


def solve(problem: Problem, params: LatticeParams, kind: SchemeKind,
          cfg: SolveConfig | None = None, *, retain: bool | Sequence[str] = True,
          validate: bool = True) -> LatticeSolution:
    """Run the backward sweep from ``y_n = lower_n`` down to the root.

    Parameters
    ----------
    retain : bool or sequence of field names
        Which per-node fields to keep.  ``False`` keeps only the per-layer
        summaries, which is what long sweeps (``n`` in the hundreds) want.
    validate : bool
        Enforce the preconditions of the selected scheme before solving.
    """
    cfg = cfg or SolveConfig()
    if not problem.recombining:
        raise PreconditionError("lattice solve needs recombining barriers")
    if validate:
        check_preconditions(problem, params, kind)
    if retain is True:
        retained = FIELDS
    elif retain is False or retain is None:
        retained = ()
    else:
        retained = tuple(retain)
        unknown = set(retained) - set(FIELDS)
        if unknown:
            raise ValueError(f"unknown fields {sorted(unknown)}")

    n = params.n
    driver = problem.driver
    layers: list[NodeSolution | None] = [None] * (n + 1)
    summaries: list[LayerSummary | None] = [None] * (n + 1)

    xi = eval_barrier_layer(problem.lower, params, n)
    zero = np.zeros_like(xi)
    sol = NodeSolution(xi.copy(), zero, zero, zero, zero, zero)
    residuals = dict.fromkeys(RESIDUAL_ROWS)
    residuals.update(sign=0.0, equation=0.0, terminal=float(np.max(np.abs(sol.y - xi))))
    summaries[n] = LayerSummary(n, layer_moments(sol, layer_probabilities(params, n)), residuals)
    layers[n] = sol

    start = time.process_time()
    for j in range(n - 1, -1, -1):
        t, w, ntilde = layer_state(params, j)
        node = NodeState(t, w, ntilde)
        xi = eval_barrier_layer(problem.lower, params, j)
        zeta = eval_barrier_layer(problem.upper, params, j)
        child_y = layer_children(sol.y)
        try:
            new = step(kind, child_y, node, xi, zeta, params, driver, cfg)
        except NumericalFailure as exc:
            where = (j, *exc.node) if exc.node else (j,)
            raise NumericalFailure(str(exc).split(" (node")[0], node=where) from exc
        new = NodeSolution(*(np.broadcast_to(f, xi.shape).astype(float) for f in new.as_tuple()))
        summaries[j] = LayerSummary(
            j, layer_moments(new, layer_probabilities(params, j)),
            node_residuals(kind, new, child_y, node, xi, zeta, params, driver))
        if retained:
            layers[j] = new
        sol = new
    cpu = time.process_time() - start

    kept = None
    if retained:
        kept = [NodeSolution(*(_frozen(getattr(layer, f)) if f in retained else None
                               for f in FIELDS)) for layer in layers]
    return LatticeSolution(params=params, kind=kind, problem_name=problem.name,
                           y0=float(sol.y[0, 0]), summaries=summaries, layers=kept,
                           cpu_seconds=cpu, retained=retained)


# -- path utilities ----------------------------------------------------------

def path_values(solution: LatticeSolution, path, name: str = "y") -> np.ndarray:
    """Field values at the nodes visited by one path (or a batch of paths)."""
    k, m = path_nodes(solution.params, path)
    out = np.empty(k.shape)
    for j in range(solution.params.n + 1):
        out[..., j] = solution.field(name, j)[k[..., j], m[..., j]]
    return out


def path_cumulative(solution: LatticeSolution, path):
    """Running sums ``A_j = sum_{i<=j} a_i``, ``K_j`` and ``alpha_j = A_j - K_j`` along a path."""
    A = np.cumsum(path_values(solution, path, "a"), axis=-1)
    K = np.cumsum(path_values(solution, path, "k"), axis=-1)
    return A, K, A - K


def embed_step_function(values, t: float, delta: float):
    """Right-continuous step embedding: the grid value at index ``floor(t/delta)``.

    ``t = T`` maps to the last index.  A relative slack of ``1e-9`` keeps
    grid times such as ``0.3`` with ``delta = 0.1`` on their own index.
    """
    values = np.asarray(values)
    n = values.shape[-1] - 1
    T = n * delta
    if not (-1e-12 <= t <= T * (1 + 1e-12)):
        raise ValueError(f"t={t} outside [0, {T}]")
    idx = min(int(math.floor(t / delta + 1e-9)), n)
    return values[..., idx]
