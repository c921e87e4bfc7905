import math

import numpy as np
import pytest

from quasisure.aggregation import (
    ProcessFamily,
    aggregate,
    aggregate_integral,
    check_consistency,
    corrupt_member,
    no_aggregation_demo,
)
from quasisure.coefficients import constant, piecewise
from quasisure.errors import InvalidArgument
from quasisure.measures import MeasureSampler
from quasisure.paths import make_grid
from quasisure.pathwise import Integrand, _integrate


def _bdb(i, v, g):
    # X = int X dX on the canonical path
    return _integrate(v[:, :-1], np.diff(v, axis=1))


def test_family_needs_members():
    with pytest.raises(InvalidArgument):
        ProcessFamily([], lambda i, v, g: v, make_grid(1.0, 4))


def test_consistency_exact_for_strong_solutions():
    g = make_grid(2.0, 200)
    coefs = [constant(1.0), piecewise([0, 1], [1.0, 2.0]), piecewise([0, 0.5], [1.0, 3.0])]
    rep = check_consistency(ProcessFamily.canonical(coefs, g), 50, seed=0)
    assert rep.passed
    for p in rep.pairs:
        assert p["max_discrepancy"] == 0.0
        assert p["theta_equals_coupling_time"]
    th = {(p["a"], p["b"]): p["theta_min"] for p in rep.pairs}
    assert th[(0, 1)] == 1.0 and th[(0, 2)] == 0.5 and th[(1, 2)] == 0.5


def test_consistency_vacuous_for_constant_index():
    g = make_grid(1.0, 50)
    coefs = [constant(np.diag([x, y])) for x, y in ((1.0, 1.0), (1.0, 2.0), (2.0, 1.5))]
    rep = check_consistency(ProcessFamily.constant_index(coefs, g), 20, seed=0)
    assert rep.passed
    assert all(p["vacuous"] for p in rep.pairs)


def test_consistency_detects_corrupted_member():
    g = make_grid(1.0, 200)
    fam = ProcessFamily.canonical([constant(1.0), piecewise([0, 0.5], [1.0, 2.0])], g)
    rep = check_consistency(corrupt_member(fam, 1), 20, seed=0)
    assert not rep.passed
    p = rep.pairs[0]
    assert p["first_failure_time"] is not None and p["first_failure_time"] < 0.5
    assert p["max_discrepancy"] > 0


def test_aggregate_integral_family():
    g = make_grid(1.0, 10_000)
    coefs = [constant(1.0), constant(2.0)]
    fam = ProcessFamily(coefs, _bdb, g, "int X dX")
    ens = [MeasureSampler(c, 20 + i, g).sample(100) for i, c in enumerate(coefs)]
    agg, rep = aggregate(fam, ens)
    assert rep["passed"]
    for r in rep["records"]:
        assert r["match_fraction"] >= 0.99
    # on classified paths the aggregator is the member itself, bit for bit
    x, c = agg(ens[1].values)
    ok = c == 1
    assert np.array_equal(x[ok], fam.member(1, ens[1].values[ok]))


def test_single_member_family():
    g = make_grid(1.0, 1000)
    fam = ProcessFamily([constant(1.5)], _bdb, g)
    ens = MeasureSampler(constant(1.5), 0, g).sample(20)
    agg, _ = aggregate(fam, [ens])
    x, c = agg(ens.values)
    assert np.all(c == 0)
    assert np.array_equal(x, fam.member(0, ens.values))


def test_aggregate_integral_checks():
    g = make_grid(1.0, 200)
    rep = aggregate_integral(1.0, [constant(1.0), constant(2.0)], 4000, g, seed=0)
    assert rep["passed"]
    for r, a in zip(rep["records"], (1.0, 2.0)):
        assert abs(r["mean_MT2"] - a) <= 4 * a * math.sqrt(2 / 4000)


def test_isometry_state_integrand_against_oracle():
    # H_t = B_t under a = 2: E M_1^2 = E int 2 X_t^2 dt = int 2 * 2t dt = 2
    g = make_grid(1.0, 400)
    rep = aggregate_integral(Integrand.markov(lambda t, x: x), [constant(2.0)], 20_000, g, seed=1)
    r = rep["records"][0]
    assert rep["passed"]
    assert abs(r["mean_MT2"] - 2.0 * (1 - 1 / g.N)) <= 4 * r["isometry_se"] + 0.05


def test_anticipating_integrand_fails_isometry():
    g = make_grid(1.0, 200)

    def peek(values, times):
        return np.sign(values[:, 1:] - values[:, :-1])

    rep = aggregate_integral(Integrand.from_paths(peek), [constant(1.0)], 4000, g, seed=2)
    assert not rep["records"][0]["isometry_passed"]


def test_no_aggregation_small():
    rep = no_aggregation_demo(n=200, L=11, N=32768, seed=1)
    assert rep["classification_accuracy"] >= 0.99
    assert rep["passed"]
    for cand in rep["candidates"].values():
        assert cand["max_failure"] >= 0.45


def test_no_aggregation_degenerate_lattice():
    rep = no_aggregation_demo(n=50, L=1, N=1024, seed=0)
    assert all(c["max_failure"] == 0.0 for c in rep["candidates"].values())
