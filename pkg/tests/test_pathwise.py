import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasisure.errors import InvalidArgument, UnsupportedDimension
from quasisure.paths import Path, PathEnsemble, make_grid, sample_brownian
from quasisure.pathwise import (
    Integrand,
    girsanov_weights,
    is_adapted,
    ito_integral,
    ito_refinement_study,
    ito_residual,
    local_time,
    quadratic_variation,
    quadratic_variation_identity,
    qv_density,
)


def test_integral_of_zero_and_one():
    g = make_grid(1.0, 20)
    X = sample_brownian(g, 1, 5, seed=1)
    assert np.all(ito_integral(0.0, X).values == 0.0)
    I = ito_integral(1.0, X)
    assert np.allclose(I.values, X.values - X.values[:, :1], atol=1e-13)


def test_integral_sample_path():
    g = make_grid(1.0, 4)
    p = Path(g, [0.0, 1.0, 0.0, 2.0, 1.0])
    I = ito_integral(Integrand.markov(lambda t, x: x), p)
    # sum x_k (x_{k+1} - x_k) = 0*1 + 1*(-1) + 0*2 + 2*(-1)
    assert I.values[-1, 0] == -3.0


def test_isometry_brownian():
    g = make_grid(1.0, 200)
    n = 100_000
    B = sample_brownian(g, 1, n, seed=3)
    I = ito_integral(Integrand.markov(lambda t, x: x), B).terminal()[:, 0]
    # E (int B dB)^2 = 1/2 on [0, 1]; grid bias is -1/(2N)
    assert abs(np.mean(I**2) - 0.5) <= 0.02


def test_matrix_integrand_shape():
    g = make_grid(1.0, 10)
    X = sample_brownian(g, 2, 3, seed=0)
    I = ito_integral(np.eye(2), X)
    assert I.values.shape == (3, 11, 2)
    assert np.allclose(I.values, X.values)
    with pytest.raises(InvalidArgument):
        ito_integral(np.ones(3), X)


def test_adaptedness_check():
    g = make_grid(1.0, 10)
    v = sample_brownian(g, 1, 4, seed=0).values
    left = lambda x: x[:, :-1, 0]
    peek = lambda x: x[:, 1:, 0]
    assert is_adapted(left, v, 5)
    assert not is_adapted(peek, v, 5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(1, 3), st.integers(0, 10_000))
def test_qv_identity_property(N, d, seed):
    g = make_grid(1.0, N)
    X = sample_brownian(g, d, 2, seed=seed)
    q1 = quadratic_variation(X).values
    q2 = quadratic_variation_identity(X).values
    assert np.allclose(q1, q2, atol=1e-10 * (1 + np.abs(q1).max()))
    # QV is symmetric positive semidefinite and nondecreasing in trace
    assert np.allclose(q1, np.swapaxes(q1, -1, -2))
    tr = np.trace(q1, axis1=-2, axis2=-1)
    assert np.all(np.diff(tr, axis=1) >= -1e-15)


def test_qv_of_linear_path_vanishes():
    for N in (10, 100, 1000):
        g = make_grid(1.0, N)
        p = Path(g, g.times[:, None] * 3.0)
        assert abs(quadratic_variation(p).values[-1, 0, 0] - 9.0 / N) < 1e-12


def test_qv_density_brownian():
    N = 10_000
    g = make_grid(1.0, N)
    X = sample_brownian(g, 1, 1, seed=4)[0]
    X = Path(g, X.values * math.sqrt(2.0))
    ah = qv_density(X)
    k = g.index_of(0.5)
    assert abs(ah.scalar()[k] - 2.0) <= 0.3
    assert ah.burn_in[: 100].all() and not ah.burn_in[100:].any()


def test_qv_density_jump():
    N = 10_000
    g = make_grid(1.0, N)
    dB = np.diff(sample_brownian(g, 1, 1, seed=5).values[0, :, 0])
    vol = np.where(g.times[:-1] < 0.5, 1.0, math.sqrt(3.0))
    X = Path(g, np.concatenate([[0.0], np.cumsum(vol * dB)]))
    ah = qv_density(X).scalar()
    assert abs(ah[g.index_of(0.25)] - 1.0) <= 0.3
    assert abs(ah[g.index_of(0.75)] - 3.0) <= 0.6


def test_local_time_edge_cases():
    g = make_grid(1.0, 100)
    mono = Path(g, g.times[:, None])
    # a monotone path has zero local time; on a grid the crossing step leaves O(1/N)
    assert np.allclose(local_time(mono, 1.5).values, 0.0, atol=1e-14)
    for N in (100, 1000):
        gg = make_grid(1.0, N)
        m = Path(gg, gg.times[:, None])
        assert np.abs(local_time(m, 0.5).values).max() <= 1 / N
        assert np.abs(local_time(m, 0.5 + 0.5 / N).values).max() <= 1 / N
    B = sample_brownian(g, 1, 10, seed=0)
    far = local_time(B, 1e6).values
    assert np.allclose(far, 0.0, atol=1e-8)
    with pytest.raises(UnsupportedDimension):
        local_time(sample_brownian(g, 2, 1, seed=0), 0.0)


def test_local_time_matches_occupation_oracle():
    # oracle: occupation density on a fine grid, L = (1/(4 eps)) int 1{|B| < eps} ds
    # (the Tanaka normalization used here is half the usual one)
    n = 20_000
    fine = make_grid(1.0, 4096)
    B = sample_brownian(fine, 1, n, seed=8)
    eps = 0.02
    occ = np.mean(np.sum(np.abs(B.values[:, :-1, 0]) < eps, axis=1) * fine.dt[0] / (4 * eps))
    coarse = make_grid(1.0, 1024)
    L = local_time(B.values[:, ::4], 0.0, grid=coarse)[:, -1, 0]
    assert abs(L.mean() - occ) <= 0.05 * occ
    assert abs(L.mean() - 1 / math.sqrt(2 * math.pi)) <= 0.02


def test_local_time_nonnegative_and_monotone_limit():
    g = make_grid(1.0, 2000)
    B = sample_brownian(g, 1, 200, seed=2)
    L = local_time(B, 0.0).values[..., 0]
    # discrete Tanaka increments are >= 0 up to one step's error
    assert L[:, -1].min() >= -0.1


def test_ito_residual_linear_is_zero():
    g = make_grid(1.0, 100)
    B = sample_brownian(g, 1, 3, seed=0)
    A = np.zeros((101, 1))
    r = ito_residual(lambda x: 3 * x + 1, lambda x: 3 + 0 * x, lambda x: 0 * x, A, 1.0, B, 1.0)
    assert np.all(r < 1e-12)


def test_ito_residual_deterministic():
    for N, tol in ((100, 0.05), (1000, 0.005)):
        g = make_grid(1.0, N)
        A = g.times[:, None].copy()
        B = PathEnsemble(g, np.zeros((1, N + 1, 1)))
        r = ito_residual(np.sin, np.cos, lambda x: -np.sin(x), A, 1.0, B, 0.0)
        assert r[0] <= tol


def test_ito_residual_refinement():
    out = ito_refinement_study(N_coarse=250, n=400, seed=1)
    assert 1.33 <= out["ratio"] <= 3.0


def test_girsanov_zero_drift():
    g = make_grid(1.0, 50)
    W = sample_brownian(g, 1, 100, seed=0)
    res = girsanov_weights(0.0, W)
    assert np.all(res.Z == 1.0)
    assert np.array_equal(res.ensemble.values, W.values)


def test_girsanov_unit_drift():
    g = make_grid(1.0, 50)
    n = 100_000
    W = sample_brownian(g, 1, n, seed=1)
    res = girsanov_weights(1.0, W)
    Wt = res.ensemble.terminal()[:, 0]
    assert abs(Wt.mean() + 1.0) <= 4 / math.sqrt(n)
    assert abs(res.Z.mean() - 1.0) <= 4 * res.Z.std() / math.sqrt(n)
    assert abs(np.sum(res.ensemble.weights * Wt)) <= 0.03


def test_girsanov_overflow_excluded():
    g = make_grid(1.0, 2)
    W = PathEnsemble(g, np.array([[[0.0], [1e3], [2e3]], [[0.0], [1.0], [2.0]]]))
    with pytest.warns(RuntimeWarning):
        res = girsanov_weights(10.0, W)
    assert res.n_excluded == 1 and res.excluded[0]
    assert res.ensemble.n == 1 and np.isnan(res.Z[0])
