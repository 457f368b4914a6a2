"""The estimator-style facade."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from drbsde.estimator import DRBSDESolver, check_increments
from drbsde.lattice import sample_paths
from drbsde.schemes import SchemeKind, solve


def test_fit_matches_direct_solve(benchmark):
    est = DRBSDESolver(n=20, scheme="implicit_reflected").fit(benchmark)
    assert est.y0_ == solve(benchmark, benchmark.params(20), SchemeKind("implicit_reflected")).y0
    assert est.params_.n == 20


def test_fit_by_registry_name():
    assert DRBSDESolver(n=10).fit("constant").y0_ == 1.0
    with pytest.raises(TypeError):
        DRBSDESolver(n=10).fit(3.0)


def test_params_roundtrip_and_clone():
    est = DRBSDESolver(n=30, scheme="explicit_penalized", p=100.0)
    assert est.get_params()["p"] == 100.0
    twin = clone(est.set_params(n=40))
    assert twin.n == 40 and not hasattr(twin, "solution_")


def test_predict_and_pushes(benchmark):
    est = DRBSDESolver(n=15).fit(benchmark)
    paths = sample_paths(est.params_, 8, seed=3)
    y = est.predict(paths)
    assert y.shape == (8, 16)
    assert np.all(y[:, 0] == est.y0_)
    A, K, alpha = est.pushes(paths)
    assert np.all(np.diff(A, axis=1) >= 0) and np.all(np.diff(K, axis=1) >= 0)


def test_predict_requires_fit():
    with pytest.raises(NotFittedError):
        DRBSDESolver().predict(np.zeros((1, 100, 2)))


def test_increment_validation(benchmark):
    prm = benchmark.params(4)
    good = sample_paths(prm, 2, seed=0)
    assert check_increments(good, prm) is not None
    with pytest.raises(ValueError):
        check_increments(good[:, :3], prm)
    bad = good.copy()
    bad[0, 1, 0] = 0.5
    with pytest.raises(ValueError):
        check_increments(bad, prm)
    bad = good.copy()
    bad[1, 2, 1] = 0.0
    with pytest.raises(ValueError):
        check_increments(bad, prm)
