import math

import numpy as np
import pytest
from scipy import stats

from quasisure.coefficients import (
    FirstHitting,
    PiecewiseConstant,
    SignAt,
    StateRule,
    build_separable,
    constant,
    piecewise,
)
from quasisure.errors import InvalidArgument
from quasisure.measures import (
    MeasureSampler,
    classify_support,
    sample_measure,
    strong_solution,
    universal_bm,
    verify_strong_identity,
)
from quasisure.paths import make_grid, sample_brownian
from quasisure.pathwise import terminal_qv


def test_identity_coefficient_returns_driver():
    g = make_grid(1.0, 100)
    B = sample_brownian(g, 2, 10, seed=0)
    X = strong_solution(constant(np.eye(2)), B)
    assert np.array_equal(X.values, B.values)


def test_constant_scaling_exact():
    g = make_grid(1.0, 100)
    B = sample_brownian(g, 1, 10, seed=0)
    X = strong_solution(constant(2.0), B)
    assert np.allclose(X.values, math.sqrt(2) * B.values, rtol=1e-14, atol=1e-14)


def test_piecewise_variance_sum():
    g = make_grid(2.0, 64)
    n = 40_000
    X = sample_measure(MeasureSampler(piecewise([0, 1], [1.0, 3.0]), 1, g), n)
    xt = X.terminal()[:, 0]
    se = math.sqrt(2 * 4.0**2 / n)  # SE of a sample variance under normality
    assert abs(xt.var() - 4.0) <= 3 * se


def test_sampler_reproducible_and_thread_invariant():
    g = make_grid(1.0, 50)
    a = StateRule(lambda t, x: 1 + 0.5 * np.sin(x) ** 2)
    s1 = MeasureSampler(build_separable([(0.0, a)]), 3, g)
    s2 = MeasureSampler(build_separable([(0.0, a)]), 3, g, threads=3)
    x1 = s1.sample(300).values
    assert np.array_equal(x1, s1.sample(300).values)
    assert np.array_equal(x1, s2.sample(300).values)
    assert np.array_equal(x1[260:], s1.sample(40, start=260).values)
    with pytest.raises(InvalidArgument):
        s1.sample(0)


def test_identity_sampler_matches_brownian_marginal():
    g = make_grid(1.0, 16)
    n = 5000
    X = sample_measure(MeasureSampler(constant(1.0), 7, g), n).terminal()[:, 0]
    res = stats.kstest(X, "norm")
    assert res.statistic < 1.63 / math.sqrt(n)  # 99% critical value


def test_variance_of_scaled_measure():
    g = make_grid(1.0, 16)
    n = 40_000
    x = sample_measure(MeasureSampler(constant(2.0), 2, g), n).terminal()[:, 0]
    assert abs(x.var() - 2.0) <= 3 * math.sqrt(2 * 4.0 / n)


def test_stops_evaluated_on_solution():
    # with a = 4 before the hit, the solution reaches |x| >= 1 earlier than the driver
    g = make_grid(1.0, 200)
    a = build_separable([(0.0, PiecewiseConstant.constant(4.0)), (FirstHitting(1.0), PiecewiseConstant.constant(1.0))])
    B = sample_brownian(g, 1, 200, seed=1)
    X = strong_solution(a, B)
    _, tr = a.along(X.values, g)
    hit_x = tr.tau_times()[:, 1]
    first = np.argmax(np.abs(X.values[..., 0]) >= 1.0, axis=1).astype(float)
    reached = np.any(np.abs(X.values[..., 0]) >= 1.0, axis=1)
    assert np.array_equal(np.isfinite(hit_x), reached)
    assert np.allclose(hit_x[reached], g.times[first[reached].astype(int)])
    # after the stop the increments are driver increments
    i = int(np.nonzero(reached & (hit_x < 0.9))[0][0])
    k = g.index_of(hit_x[i])
    assert np.allclose(np.diff(X.values[i, k:, 0]), np.diff(B.values[i, k:, 0]))


def test_universal_bm_exact_inversion():
    g = make_grid(1.0, 1000)
    B = sample_brownian(g, 1, 5, seed=0)
    X = strong_solution(constant(2.0), B)
    W = universal_bm(X, "exact", a=constant(2.0))
    assert np.max(np.abs(W.values - B.values)) <= 1e-10


def test_universal_bm_exact_for_switching_coefficient():
    g = make_grid(2.0, 400)
    a = build_separable([(0.0, PiecewiseConstant.constant(1.0)),
                         (FirstHitting(0.5), [(SignAt(0, True), PiecewiseConstant.constant(3.0)),
                                              (SignAt(0, False), PiecewiseConstant.constant(0.5))])])
    B = sample_brownian(g, 1, 50, seed=0)
    W = universal_bm(strong_solution(a, B), "exact", a=a)
    assert np.max(np.abs(W.values - B.values)) <= 1e-10


def test_universal_bm_estimated():
    g = make_grid(1.0, 10_000)
    B = sample_brownian(g, 1, 20, seed=0)
    X = strong_solution(constant(2.0), B)
    W, info = universal_bm(X, "estimated", return_info=True)
    q = terminal_qv(W.values)[:, 0, 0]
    assert abs(np.median(q) - 1.0) <= 0.05
    assert info.n_floored == 0


def test_universal_bm_anisotropic():
    g = make_grid(1.0, 32)
    n = 20_000
    a = constant(np.diag([1.0, 4.0]))
    X = sample_measure(MeasureSampler(a, 5, g), n)
    W = universal_bm(X, "exact", a=a).terminal()
    v = W.var(axis=0)
    assert np.all(np.abs(v - 1.0) <= 3 * math.sqrt(2 / n))
    assert abs(np.corrcoef(W.T)[0, 1]) <= 3 / math.sqrt(n)


def test_universal_bm_bad_mode():
    g = make_grid(1.0, 10)
    B = sample_brownian(g, 1, 1, seed=0)
    with pytest.raises(InvalidArgument):
        universal_bm(B, "magic")
    with pytest.raises(InvalidArgument):
        universal_bm(B, "exact")


def test_pushforward_moments():
    # (X^a, a, B) under Wiener versus (B, a_hat, W) under P^a: moments at grid times
    g = make_grid(1.0, 400)
    n = 4000
    a = constant(2.0)
    X, drv = MeasureSampler(a, 9, g).sample(n, with_driver=True)
    W = universal_bm(X, "exact", a=a)
    for k in (100, 200, 400):
        assert abs(X.values[:, k, 0].var() - 2 * g.times[k]) <= 3 * 2 * g.times[k] * math.sqrt(2 / n)
        assert abs(W.values[:, k, 0].var() - g.times[k]) <= 3 * g.times[k] * math.sqrt(2 / n)
    assert np.allclose(W.values, drv.values, atol=1e-10)
    q = terminal_qv(X.values)[:, 0, 0]
    assert abs(q.mean() - 2.0) <= 3 * q.std() / math.sqrt(n) + 1e-3


def test_classify_support_pair():
    g = make_grid(1.0, 10_000)
    cands = [constant(1.0), constant(2.0)]
    for true in (0, 1):
        X = sample_measure(MeasureSampler(cands[true], 10 + true, g), 100)
        got = classify_support(X, cands)
        assert np.mean(got == true) >= 0.99


def test_classify_support_single_path_and_ambiguity():
    g = make_grid(1.0, 2000)
    X = sample_measure(MeasureSampler(constant(2.0), 0, g), 1)[0]
    assert classify_support(X, [constant(1.0), constant(2.0)]) == 1
    assert classify_support(X, [constant(2.0), constant(2.0)]) is None
    assert classify_support(X, [constant(10.0)]) is None


def test_strong_identity_constant():
    rep = verify_strong_identity(constant(2.0), 100, make_grid(1.0, 10_000), seed=0)
    assert rep.passed and rep.statistic <= 0.05


def test_strong_identity_jump_member():
    g = make_grid(2.0, 10_000)
    rep = verify_strong_identity(piecewise([0, 1], [1.0, 2.0]), 100, g, seed=1)
    assert rep.passed
    assert rep.n_excluded_jump > 0
    # trailing windows straddle the jump on [1, 1 + w dt)
    w = math.ceil(math.sqrt(g.N))
    after = (g.times >= 1.0) & (g.times < 1.0 + w * g.dt[0] - 1e-12)
    assert not rep.valid[after].any()
