"""Binomial-Poisson lattice: increment laws, node states and one-step expectations.

The Brownian motion is replaced by a scaled symmetric random walk and the
compensated Poisson process by a two-point walk.  Each step has four
branches, always stored in the order

    0: (e=+1, no jump)   1: (e=-1, no jump)   2: (e=+1, jump)   3: (e=-1, jump)

where "no jump" means ``eta = kappa - 1`` (probability ``kappa``) and "jump"
means ``eta = kappa`` (probability ``1 - kappa``).  A node of the recombining
lattice is identified by ``(j, k, m)``: step, number of up moves, number of
jumps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import binom

BRANCH_E = np.array([1.0, -1.0, 1.0, -1.0])
BRANCH_JUMP = np.array([False, False, True, True])
BRANCH_NAMES = ("up", "down", "up_jump", "down_jump")


@dataclass(frozen=True)
class LatticeParams:
    """Discretization of ``[0, T]`` into ``n`` steps with Poisson intensity ``lam``."""

    n: int
    T: float
    lam: float
    delta: float
    kappa: float

    @property
    def sqrt_delta(self) -> float:
        return math.sqrt(self.delta)

    @property
    def eta_var(self) -> float:
        """Variance ``kappa (1 - kappa)`` of the Poisson increment."""
        return self.kappa * (1.0 - self.kappa)

    @property
    def eta_values(self) -> tuple[float, float]:
        """``(no-jump value, jump value)`` of the Poisson increment."""
        return self.kappa - 1.0, self.kappa

    def time(self, j: int) -> float:
        return j * self.delta

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.delta


def make_params(n: int, T: float, lam: float) -> LatticeParams:
    """Build the lattice parameters; ``delta = T/n`` and ``kappa = exp(-lam*delta)``."""
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if not (T > 0 and math.isfinite(T)):
        raise ValueError(f"T must be positive, got {T!r}")
    if not (lam > 0 and math.isfinite(lam)):
        raise ValueError(f"lambda must be positive, got {lam!r}")
    n = int(n)
    delta = T / n
    return LatticeParams(n=n, T=float(T), lam=float(lam), delta=delta,
                         kappa=math.exp(-lam * delta))


@dataclass(frozen=True)
class NodeIndex:
    j: int
    k: int
    m: int

    def __post_init__(self):
        if self.j < 0 or not (0 <= self.k <= self.j) or not (0 <= self.m <= self.j):
            raise ValueError(f"invalid node index {self}")

    def child(self, branch: int) -> "NodeIndex":
        up = BRANCH_E[branch] > 0
        return NodeIndex(self.j + 1, self.k + int(up), self.m + int(BRANCH_JUMP[branch]))


@dataclass(frozen=True)
class NodeState:
    t: float
    w: float
    ntilde: float


class ChildWeights(NamedTuple):
    up: float
    down: float
    up_jump: float
    down_jump: float


class BranchValues(NamedTuple):
    """Values of a next-step quantity on the four children of a node.

    Fields may be floats or equally shaped arrays (one entry per parent node).
    """

    up: object
    down: object
    up_jump: object
    down_jump: object


def _check_index(params: LatticeParams, idx: NodeIndex) -> None:
    if idx.j > params.n:
        raise ValueError(f"step {idx.j} beyond n={params.n}")


def node_state(params: LatticeParams, idx: NodeIndex) -> NodeState:
    """Time, walk value and compensated jump count at a lattice node."""
    _check_index(params, idx)
    w = params.sqrt_delta * (2 * idx.k - idx.j)
    ntilde = idx.m - idx.j * (1.0 - params.kappa)
    return NodeState(t=params.time(idx.j), w=w, ntilde=ntilde)


def layer_state(params: LatticeParams, j: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Broadcastable ``(t, w, ntilde)`` over layer ``j``.

    ``w`` has shape ``(j+1, 1)`` (indexed by ``k``) and ``ntilde`` shape
    ``(1, j+1)`` (indexed by ``m``).
    """
    k = np.arange(j + 1, dtype=float)
    w = (params.sqrt_delta * (2.0 * k - j))[:, None]
    ntilde = (k - j * (1.0 - params.kappa))[None, :]
    return params.time(j), w, ntilde


def child_weights(params: LatticeParams) -> ChildWeights:
    kap = params.kappa
    return ChildWeights(kap / 2, kap / 2, (1 - kap) / 2, (1 - kap) / 2)


def branch_eta(params: LatticeParams) -> np.ndarray:
    kap = params.kappa
    return np.array([kap - 1.0, kap - 1.0, kap, kap])


def cond_exp(vals, params: LatticeParams):
    """One-step conditional expectation of values given on the four branches."""
    v1, v2, v3, v4 = vals
    kap = params.kappa
    return 0.5 * kap * (v1 + v2) + 0.5 * (1.0 - kap) * (v3 + v4)


def martingale_coeffs(vals, params: LatticeParams):
    """Coefficients ``(z, u, v)`` of the martingale increment of ``vals``.

    ``vals - E[vals] = sqrt(delta) z e + u eta + v e*eta`` holds on every
    branch.  The ``u`` and ``v`` expressions below are the projections onto
    ``eta`` and ``e*eta`` with the common ``kappa (1 - kappa)`` factor
    cancelled analytically.
    """
    v1, v2, v3, v4 = vals
    kap = params.kappa
    z = (0.5 * kap * (v1 - v2) + 0.5 * (1.0 - kap) * (v3 - v4)) / params.sqrt_delta
    u = 0.5 * ((v3 + v4) - (v1 + v2))
    v = 0.5 * ((v3 - v4) - (v1 - v2))
    return z, u, v


def representation_residual(vals, params: LatticeParams):
    """Per-branch residual of the martingale representation (4-tuple)."""
    mean = cond_exp(vals, params)
    z, u, v = martingale_coeffs(vals, params)
    eta = branch_eta(params)
    sd = params.sqrt_delta
    return tuple(
        vals[b] - mean - sd * z * BRANCH_E[b] - u * eta[b] - v * BRANCH_E[b] * eta[b]
        for b in range(4)
    )


def node_probability(params: LatticeParams, idx: NodeIndex) -> float:
    """Probability of reaching node ``(j, k, m)`` from the root."""
    _check_index(params, idx)
    j, k, m = idx.j, idx.k, idx.m
    kap = params.kappa
    if j <= 50:
        return (math.comb(j, k) * 0.5 ** j
                * math.comb(j, m) * (1 - kap) ** m * kap ** (j - m))
    logp = (_log_comb(j, k) - j * math.log(2.0) + _log_comb(j, m)
            + m * math.log1p(-kap) + (j - m) * math.log(kap))
    return math.exp(logp)


def _log_comb(j: int, k: int) -> float:
    return math.lgamma(j + 1) - math.lgamma(k + 1) - math.lgamma(j - k + 1)


def layer_probabilities(params: LatticeParams, j: int) -> np.ndarray:
    """Node probabilities of layer ``j`` as a ``(j+1, j+1)`` array indexed ``[k, m]``."""
    counts = np.arange(j + 1)
    pk = binom.pmf(counts, j, 0.5)
    pm = binom.pmf(counts, j, 1.0 - params.kappa)
    return np.outer(pk, pm)


def layer_children(values: np.ndarray) -> BranchValues:
    """Split a layer-``(j+1)`` array into the children of every layer-``j`` node."""
    return BranchValues(values[1:, :-1], values[:-1, :-1], values[1:, 1:], values[:-1, 1:])


def sample_path(params: LatticeParams, seed: int) -> np.ndarray:
    """Draw one path of increments as an ``(n, 2)`` array of ``(e_i, eta_i)``.

    Uses numpy's PCG64 generator seeded with ``seed``.
    """
    return sample_paths(params, 1, seed)[0]


def sample_paths(params: LatticeParams, n_paths: int, seed: int) -> np.ndarray:
    """Vectorized :func:`sample_path`: array of shape ``(n_paths, n, 2)``."""
    rng = np.random.default_rng(seed)
    e = np.where(rng.random((n_paths, params.n)) < 0.5, 1.0, -1.0)
    jump = rng.random((n_paths, params.n)) < (1.0 - params.kappa)
    eta = np.where(jump, params.kappa, params.kappa - 1.0)
    return np.stack([e, eta], axis=-1)


def path_branches(params: LatticeParams, path) -> np.ndarray:
    """Branch labels (0..3) for increments given as ``(..., n, 2)`` ``(e, eta)`` pairs."""
    path = np.asarray(path, dtype=float)
    up = path[..., 0] > 0
    jump = path[..., 1] > 0
    return np.where(up, 0, 1) + np.where(jump, 2, 0)


def path_nodes(params: LatticeParams, path) -> tuple[np.ndarray, np.ndarray]:
    """``(k, m)`` lattice coordinates visited by path(s), including the root.

    Returns integer arrays of shape ``(..., n+1)``.
    """
    path = np.asarray(path, dtype=float)
    up = (path[..., 0] > 0).astype(np.int64)
    jump = (path[..., 1] > 0).astype(np.int64)
    zeros = np.zeros(path.shape[:-2] + (1,), dtype=np.int64)
    k = np.concatenate([zeros, np.cumsum(up, axis=-1)], axis=-1)
    m = np.concatenate([zeros, np.cumsum(jump, axis=-1)], axis=-1)
    return k, m
