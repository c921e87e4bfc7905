import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasisure.coefficients import PiecewiseConstant, concatenate, from_generator
from quasisure.errors import InvalidArgument, InvalidSpec
from quasisure.superhedging import (
    Lattice,
    Payoff,
    black_scholes,
    black_scholes_delta,
    bs_delta_hedge,
    bsb_fd_price,
    butterfly_bs,
    doob_meyer_on_lattice,
    dp_value,
    mc_lower_bound,
    self_financing_error,
    verify_superhedge,
)

CALL = Payoff.call(100.0)
FLY = Payoff.butterfly(90.0, 100.0, 110.0)


def test_black_scholes_reference_values():
    # independent closed-form check: put-call parity and a textbook value
    c = black_scholes(100.0, 100.0, 1.0, 0.2)
    p = black_scholes(100.0, 100.0, 1.0, 0.2, kind="put")
    assert abs(c - p) < 1e-12
    assert abs(c - 7.965567455405804) < 1e-9
    assert abs(black_scholes_delta(100.0, 100.0, 1.0, 0.3) - 0.5596176923702425) < 1e-12


def test_payoffs():
    s = np.array([80.0, 90.0, 95.0, 100.0, 105.0, 110.0, 130.0])
    assert np.allclose(FLY(s), [0, 0, 5, 10, 5, 0, 0])
    assert np.all(Payoff.put(100.0)(s) >= 0)
    with pytest.raises(InvalidSpec):
        Payoff.linear(100.0)
    assert Payoff.from_config({"kind": "butterfly", "strikes": [90, 100, 110]}) == FLY


def test_lattice_moments():
    lat = Lattice(100.0, 1.0, 50, (0.1, 0.2, 0.3))
    ok, info = lat.check_moments()
    assert ok
    assert np.all(lat.probs >= 0) and np.allclose(lat.probs.sum(axis=1), 1.0)
    with pytest.raises(InvalidArgument):
        Lattice(100.0, 1.0, 0, (0.2,))


def test_dp_single_sigma_converges_to_bs():
    bs = black_scholes(100.0, 100.0, 1.0, 0.2)
    errs = [abs(dp_value(Lattice(100.0, 1.0, M, (0.2,)), CALL).value - bs) for M in (50, 200)]
    assert errs[1] < errs[0]
    assert errs[1] / bs < 0.005


def test_dp_convex_payoff_uses_upper_vol():
    vp = dp_value(Lattice(100.0, 1.0, 200, (0.1, 0.3)), CALL)
    assert abs(vp.value - 11.92) / 11.92 < 0.005
    # the largest volatility attains the max at every node
    assert all(att[1].all() for att in vp.attains)


def test_zero_payoff():
    vp = dp_value(Lattice(100.0, 1.0, 20, (0.1, 0.3)), Payoff.constant(0.0))
    assert all(np.all(v == 0) for v in vp.V)
    assert all(np.all(h == 0) for h in vp.hedge)
    dm = doob_meyer_on_lattice(vp, 0)
    assert all(np.all(k == 0) for k in dm.dK) and all(np.all(m == 0) for m in dm.dM)


@settings(max_examples=20, deadline=None)
@given(st.sets(st.sampled_from([0.05, 0.1, 0.15, 0.2, 0.25]), min_size=1),
       st.sampled_from([0.05, 0.1, 0.15, 0.2, 0.25]))
def test_dp_monotone_in_vol_set(base, extra):
    # fixed node set: the largest volatility (0.3) is always present
    small = tuple(sorted(base | {0.3}))
    large = tuple(sorted(base | {0.3, extra}))
    for pay in (CALL, FLY):
        v1 = dp_value(Lattice(100.0, 1.0, 40, small), pay).value
        v2 = dp_value(Lattice(100.0, 1.0, 40, large), pay).value
        assert v2 >= v1 - 1e-12


def test_hedge_matches_bs_delta():
    vp = dp_value(Lattice(100.0, 1.0, 400, (0.3,)), CALL)
    assert abs(vp.hedge[0][0] - black_scholes_delta(100.0, 100.0, 1.0, 0.3)) <= 0.05
    # deep in the money the hedge is close to one
    deep = dp_value(Lattice(100.0, 1.0, 200, (0.3,)), Payoff.call(20.0))
    assert deep.hedge[0][0] > 0.999


def test_doob_meyer_argmax_and_suboptimal():
    vp = dp_value(Lattice(100.0, 1.0, 100, (0.1, 0.3)), CALL)
    dm = doob_meyer_on_lattice(vp, "argmax")
    assert all(np.all(k == 0.0) for k in dm.dK)
    assert dm.max_abs_mean_dM < 1e-10
    lo = doob_meyer_on_lattice(vp, 0)
    assert lo.min_dK >= 0.0
    assert max(float(k.max()) for k in lo.dK) > 0.0
    assert self_financing_error(vp, dm) < 1e-10
    assert self_financing_error(vp, lo) < 1e-10


def test_doob_meyer_butterfly_compensator_nonnegative():
    vp = dp_value(Lattice(100.0, 1.0, 100, (0.1, 0.2, 0.3)), FLY)
    for s in range(3):
        dm = doob_meyer_on_lattice(vp, s)
        assert dm.min_dK >= 0.0
        assert self_financing_error(vp, dm, n_paths=50) < 1e-10
    with pytest.raises(InvalidArgument):
        doob_meyer_on_lattice(vp, 5)


def test_fd_oracle_examples():
    bs2 = black_scholes(100.0, 100.0, 1.0, 0.2)
    assert abs(bsb_fd_price(CALL, 0.2, 0.2, 100.0, 1.0).value - bs2) / bs2 < 0.005
    bs3 = black_scholes(100.0, 100.0, 1.0, 0.3)
    assert abs(bsb_fd_price(CALL, 0.1, 0.3, 100.0, 1.0).value - bs3) / bs3 < 0.005
    fly = bsb_fd_price(FLY, 0.1, 0.3, 100.0, 1.0).value
    strikes = (90.0, 100.0, 110.0)
    assert fly > butterfly_bs(100.0, strikes, 1.0, 0.1)
    assert fly > butterfly_bs(100.0, strikes, 1.0, 0.3)


def test_fd_cfl_refinement_warns():
    with pytest.warns(RuntimeWarning):
        res = bsb_fd_price(CALL, 0.1, 0.3, 100.0, 1.0, n_steps=10)
    assert res.refined and res.n_steps > 10


def test_mc_call_and_constant():
    out = mc_lower_bound(CALL, [0.01, 0.09], 20_000, N=16, seed=0)
    assert out["argmax"] == 1
    assert abs(out["best_mean"] - black_scholes(100.0, 100.0, 1.0, 0.3)) <= 3 * out["se"]
    const = mc_lower_bound(Payoff.constant(3.0), [0.01, 0.09], 100, N=4)
    assert const["means"] == [3.0, 3.0] and const["se"] == 0.0


def test_mc_rational_schedules_below_fd():
    grid_gens = [PiecewiseConstant.constant(v) for v in ("1/100", "9/100")]
    schedules = [from_generator(concatenate(a, b, "1/2")) for a in grid_gens for b in grid_gens]
    out = mc_lower_bound(FLY, schedules, 20_000, N=16, seed=1)
    fd = bsb_fd_price(FLY, 0.1, 0.3, 100.0, 1.0).value
    assert out["best_mean"] <= fd + 3 * out["se"]


def test_superhedge_zero_payoff_exact():
    rep = verify_superhedge(0.0, lambda t, s: np.zeros_like(s), Payoff.constant(0.0), [0.1, 0.3], 20, N=64)
    assert rep["passed"]
    assert all(r["min"] == 0.0 for r in rep["records"])


def test_superhedge_underpriced_fails():
    h = bs_delta_hedge(0.3, 100.0, 1.0)
    lo = black_scholes(100.0, 100.0, 1.0, 0.1)
    rep = verify_superhedge(lo, h, CALL, [0.3], 200, N=2**12, seed=0)
    assert not rep["passed"]
    assert rep["records"][0]["fraction_below"] > 0.1


def test_superhedge_thread_invariant():
    h = bs_delta_hedge(0.3, 100.0, 1.0)
    p = black_scholes(100.0, 100.0, 1.0, 0.3)
    a = verify_superhedge(p, h, CALL, [0.2], 40, N=2**10, seed=3)
    b = verify_superhedge(p, h, CALL, [0.2], 40, N=2**10, seed=3, threads=3)
    assert a == b
