"""Problem instances: driver, lower/upper barriers, validation and a registry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lattice import (LatticeParams, NodeIndex, layer_probabilities, layer_state,
                      make_params, node_state)

DriverFn = Callable[..., object]
StateFn = Callable[[object, object, object], object]


@dataclass(frozen=True)
class Driver:
    """Generator ``g(t, w, ntilde, y, z, u)``.

    ``g`` must accept numpy arrays and broadcast.  ``lipschitz_const`` is the
    declared constant with respect to ``(y, z, u)``; it is validated by
    sampling but never inferred.
    """

    g: DriverFn
    lipschitz_const: float
    theta_probe_bounds: tuple[float, float] | None = None
    name: str = "driver"

    def __call__(self, t, w, ntilde, y, z, u):
        return self.g(t, w, ntilde, y, z, u)


def abs_linear_driver(alpha: float = -5.0, beta: float = 6.0, gamma: float = 0.0) -> Driver:
    """The family ``g = alpha |y + z| + beta u + gamma``."""

    def g(t, w, ntilde, y, z, u):
        return alpha * np.abs(y + z) + beta * u + gamma

    return Driver(g=g, lipschitz_const=max(abs(alpha), abs(beta)),
                  theta_probe_bounds=(beta, beta),
                  name=f"{alpha}|y+z| + {beta}u + {gamma}")


def zero_driver() -> Driver:
    def g(t, w, ntilde, y, z, u):
        return np.zeros(np.broadcast(t, w, ntilde, y, z, u).shape)

    return Driver(g=g, lipschitz_const=0.0, theta_probe_bounds=(0.0, 0.0), name="0")


# -- barriers ---------------------------------------------------------------

@dataclass(frozen=True)
class ClosedForm:
    """Barrier given as a function ``f(t, w, ntilde)`` of the current state."""

    f: StateFn

    def at(self, t, w, ntilde):
        return self.f(t, w, ntilde)


@dataclass(frozen=True)
class ItoConstant:
    """``x0 + b t + sigma W + beta Ntilde`` with constant coefficients."""

    x0: float
    b: float = 0.0
    sigma: float = 0.0
    beta: float = 0.0

    def at(self, t, w, ntilde):
        return self.x0 + self.b * t + self.sigma * w + self.beta * ntilde

    def coefficients(self, t, w, ntilde):
        shape = np.broadcast(t, w, ntilde).shape
        full = (lambda c: np.full(shape, c)) if shape else float
        return full(self.b), full(self.sigma), full(self.beta)


@dataclass(frozen=True)
class ItoPathwise:
    """Itô barrier whose coefficients are functions of the current state.

    Its discrete version is a cumulative sum along the path, so in general it
    does not recombine and is only usable on the full history tree.
    """

    x0: float
    b: StateFn
    sigma: StateFn
    beta: StateFn

    def coefficients(self, t, w, ntilde):
        return self.b(t, w, ntilde), self.sigma(t, w, ntilde), self.beta(t, w, ntilde)


BarrierSpec = ClosedForm | ItoConstant | ItoPathwise


def is_recombining(barrier: BarrierSpec) -> bool:
    return isinstance(barrier, (ClosedForm, ItoConstant))


def eval_barrier(barrier: BarrierSpec, params: LatticeParams, idx: NodeIndex) -> float:
    """Barrier value at a lattice node (recombining variants only)."""
    if not is_recombining(barrier):
        raise TypeError("path-dependent barriers need the full history tree")
    s = node_state(params, idx)
    return float(barrier.at(s.t, s.w, s.ntilde))


def eval_barrier_layer(barrier: BarrierSpec, params: LatticeParams, j: int) -> np.ndarray:
    """Barrier values over layer ``j`` as a ``(j+1, j+1)`` array."""
    if not is_recombining(barrier):
        raise TypeError("path-dependent barriers need the full history tree")
    t, w, ntilde = layer_state(params, j)
    return np.broadcast_to(barrier.at(t, w, ntilde), (j + 1, j + 1)).astype(float)


def advance_barrier(barrier: BarrierSpec, params: LatticeParams, value, t, w, ntilde, e, eta):
    """Value after one increment ``(e, eta)`` taken from state ``(t, w, ntilde)``.

    Itô variants use coefficients frozen at the pre-increment state.
    """
    if isinstance(barrier, ClosedForm):
        return barrier.at(t + params.delta, w + params.sqrt_delta * e, ntilde + eta)
    b, sigma, beta = barrier.coefficients(t, w, ntilde)
    return value + b * params.delta + sigma * params.sqrt_delta * e + beta * eta


def initial_barrier(barrier: BarrierSpec) -> float:
    if isinstance(barrier, ClosedForm):
        return float(barrier.at(0.0, 0.0, 0.0))
    return float(barrier.x0)


def eval_barrier_on_history(barrier: BarrierSpec, params: LatticeParams, history) -> float:
    """Barrier value after a sequence of ``(e, eta)`` increments."""
    t = w = ntilde = 0.0
    value = initial_barrier(barrier)
    for e, eta in history:
        value = advance_barrier(barrier, params, value, t, w, ntilde, e, eta)
        t += params.delta
        w += params.sqrt_delta * e
        ntilde += eta
    return float(value)


def canonical_projection(barrier: BarrierSpec, params: LatticeParams) -> ClosedForm:
    """Lattice surrogate of a barrier: its value along one representative path.

    For the node ``(j, k, m)`` the representative takes all up moves first and
    all jumps first.  Exact for recombining barriers, an approximation
    otherwise.
    """
    if is_recombining(barrier):
        return barrier if isinstance(barrier, ClosedForm) else ClosedForm(barrier.at)

    kap = params.kappa
    sd = params.sqrt_delta

    def f(t, w, ntilde):
        t, w, ntilde = np.broadcast_arrays(*map(np.asarray, (t, w, ntilde)))
        j = np.rint(t / params.delta).astype(int)
        k = np.rint((w / sd + j) / 2).astype(int)
        m = np.rint(ntilde + j * (1 - kap)).astype(int)
        out = np.empty(t.shape)
        for pos in np.ndindex(t.shape):
            jj, kk, mm = j[pos], k[pos], m[pos]
            hist = [(1.0 if i < kk else -1.0, kap if i < mm else kap - 1.0) for i in range(jj)]
            out[pos] = eval_barrier_on_history(barrier, params, hist)
        return out if out.shape else float(out)

    return ClosedForm(f)


# -- problems ---------------------------------------------------------------

@dataclass(frozen=True)
class Problem:
    driver: Driver
    lower: BarrierSpec
    upper: BarrierSpec
    T: float = 1.0
    lam: float = 5.0
    name: str = "problem"

    def params(self, n: int) -> LatticeParams:
        return make_params(n, self.T, self.lam)

    @property
    def recombining(self) -> bool:
        return is_recombining(self.lower) and is_recombining(self.upper)


def benchmark_example(T: float = 1.0, lam: float = 5.0, alpha: float = -5.0,
                  beta: float = 6.0, gamma: float = 0.0) -> Problem:
    """Squared-walk barriers with a jump term and ``g = -5|y+z| + 6u``.

    Lower ``W^2 + 2(1 - t/T) N + (T - t)/2``, upper
    ``W^2 + (1 - t/T)(N^2 + 1) + (T - t)/2``; the gap is
    ``(1 - t/T)(N - 1)^2``.
    """

    def lower(t, w, ntilde):
        return w ** 2 + 2.0 * (1.0 - t / T) * ntilde + 0.5 * (T - t)

    def upper(t, w, ntilde):
        return w ** 2 + (1.0 - t / T) * (ntilde ** 2 + 1.0) + 0.5 * (T - t)

    return Problem(driver=abs_linear_driver(alpha, beta, gamma), lower=ClosedForm(lower),
                   upper=ClosedForm(upper), T=T, lam=lam, name="benchmark")


def constant_problem(c: float = 1.0, T: float = 1.0, lam: float = 5.0) -> Problem:
    barrier = ItoConstant(x0=c)
    return Problem(driver=zero_driver(), lower=barrier, upper=barrier, T=T, lam=lam,
                   name="constant")


def ito_example(T: float = 1.0, lam: float = 5.0, alpha: float = -1.0, beta: float = 0.5,
                gamma: float = 0.5, gap: float = 0.3, drift: float = 0.5) -> Problem:
    """Constant-coefficient Itô barriers ``upper = lower + gap (1 - t/T)``.

    With the defaults both barriers are hit somewhere on the lattice, so
    both pushes are exercised.
    """
    lower = ItoConstant(x0=0.0, b=drift, sigma=0.5, beta=0.3)
    upper = ItoConstant(x0=gap, b=drift - gap / T, sigma=0.5, beta=0.3)
    return Problem(driver=abs_linear_driver(alpha, beta, gamma), lower=lower, upper=upper,
                   T=T, lam=lam, name="ito")


def pathwise_example(T: float = 1.0, lam: float = 5.0, gap: float = 0.5) -> Problem:
    """Path-dependent barriers: the jump coefficient is the current walk value."""

    def zero(t, w, ntilde):
        return 0.0 * w

    def walk(t, w, ntilde):
        return w

    def shrink(t, w, ntilde):
        return -gap / T + 0.0 * w

    lower = ItoPathwise(x0=0.0, b=zero, sigma=zero, beta=walk)
    upper = ItoPathwise(x0=gap, b=shrink, sigma=zero, beta=walk)
    return Problem(driver=abs_linear_driver(-1.0, 0.5, 0.0), lower=lower, upper=upper,
                   T=T, lam=lam, name="pathwise")


REGISTRY: dict[str, Callable[..., Problem]] = {
    "benchmark": benchmark_example,
    "constant": constant_problem,
    "ito": ito_example,
    "pathwise": pathwise_example,
}


def build_problem(name: str, **overrides) -> Problem:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(REGISTRY)}") from None
    return factory(**overrides)


# -- validation and probes -------------------------------------------------

TERMINAL_TOL = 1e-10
# barriers that touch may cross by rounding; allowed relative slack
ORDER_RTOL = 1e-12


@dataclass
class ValidationReport:
    checks: dict[str, bool] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    details: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, check: str, message: str) -> None:
        self.checks[check] = False
        self.failures.append(f"{check}: {message}")


def validate_problem(problem: Problem, params: LatticeParams) -> ValidationReport:
    """Check solver preconditions on the lattice; never raises."""
    report = ValidationReport()
    dc = params.delta * problem.driver.lipschitz_const
    report.details["delta_times_lipschitz"] = dc
    report.checks["contraction"] = dc < 1
    if dc >= 1:
        report.fail("contraction", f"delta*C_g = {dc:.6g} >= 1")

    if not problem.recombining:
        report.details["node_scan"] = 0.0
        return report

    report.checks.update(ordered=True, terminal=True, driver_bounded=True)
    worst_order, worst_terminal, g0_max = -np.inf, 0.0, 0.0
    first_bad = None
    for j in range(params.n + 1):
        xi = eval_barrier_layer(problem.lower, params, j)
        zeta = eval_barrier_layer(problem.upper, params, j)
        diff = xi - zeta
        crossing = diff - ORDER_RTOL * (1.0 + np.abs(xi) + np.abs(zeta))
        layer_worst = float(diff.max())
        if layer_worst > worst_order:
            worst_order = layer_worst
        if first_bad is None and np.any(crossing > 0):
            k, m = np.unravel_index(np.argmax(crossing), diff.shape)
            first_bad = (j, int(k), int(m))
        t, w, ntilde = layer_state(params, j)
        g0 = np.asarray(problem.driver(t, w, ntilde, 0.0, 0.0, 0.0), dtype=float)
        g0_max = max(g0_max, float(np.max(np.abs(g0))))
        if j == params.n:
            worst_terminal = float(np.max(np.abs(diff)))

    report.details.update(max_lower_minus_upper=worst_order,
                          terminal_gap=worst_terminal, max_abs_g0=g0_max)
    if first_bad is not None:
        report.fail("ordered", f"lower > upper at node {first_bad}")
    if worst_terminal > TERMINAL_TOL:
        report.fail("terminal", f"barriers differ by {worst_terminal:.3g} at maturity")
    if not math.isfinite(g0_max):
        report.fail("driver_bounded", "g(., 0, 0, 0) is not finite on the grid")
    return report


def _random_arguments(rng, n_samples, scale):
    t = rng.random(n_samples)
    return t, *(scale * rng.standard_normal((4, n_samples)))


def lipschitz_probe(driver: Driver, n_samples: int = 10_000, seed: int = 0,
                    scale: float = 10.0) -> float:
    """Largest excess of ``|g1 - g2|`` over ``C_g (|dy| + |dz| + |du|)`` on random pairs.

    A non-positive value means the declared constant was never violated.
    """
    rng = np.random.default_rng(seed)
    t, w, nt, y1, z1 = _random_arguments(rng, n_samples, scale)
    u1, y2, z2, u2 = scale * rng.standard_normal((4, n_samples))
    g1 = driver(t, w, nt, y1, z1, u1)
    g2 = driver(t, w, nt, y2, z2, u2)
    bound = driver.lipschitz_const * (np.abs(y1 - y2) + np.abs(z1 - z2) + np.abs(u1 - u2))
    return float(np.max(np.abs(g1 - g2) - bound))


def theta_probe(driver: Driver, n_samples: int = 10_000, seed: int = 0,
                scale: float = 10.0) -> tuple[float, float]:
    """Range of difference quotients of ``g`` in ``u`` on random arguments."""
    rng = np.random.default_rng(seed)
    t, w, nt, y, z = _random_arguments(rng, n_samples, scale)
    u1, u2 = scale * rng.standard_normal((2, n_samples))
    keep = np.abs(u1 - u2) > 1e-6 * scale
    ratio = (driver(t, w, nt, y, z, u1) - driver(t, w, nt, y, z, u2)) / (u1 - u2)
    ratio = np.broadcast_to(ratio, u1.shape)[keep]
    return float(ratio.min()), float(ratio.max())


def barrier_second_moments(problem: Problem, params: LatticeParams) -> tuple[float, float]:
    """``(max_j E[lower_j^2], max_j E[upper_j^2])`` computed exactly on the lattice."""
    lo = hi = 0.0
    for j in range(params.n + 1):
        prob = layer_probabilities(params, j)
        lo = max(lo, float(np.sum(prob * eval_barrier_layer(problem.lower, params, j) ** 2)))
        hi = max(hi, float(np.sum(prob * eval_barrier_layer(problem.upper, params, j) ** 2)))
    return lo, hi
