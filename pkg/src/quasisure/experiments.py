"""Named experiments for the command-line runner.

Each experiment declares its parameters with defaults (tolerances included)
and a handler ``fn(params, seed, threads) -> Outcome``.  Configurations may
only override declared parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import aggregation as agg
from . import coefficients as coef
from . import measures as meas
from . import pathwise as pw
from . import superhedging as sh
from .errors import InvalidSpec
from .paths import make_grid, sample_brownian


@dataclass
class Outcome:
    report: dict
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    passed: bool = True


@dataclass(frozen=True)
class Experiment:
    name: str
    doc: str
    defaults: dict
    fn: callable


REGISTRY: dict = {}


def experiment(name, doc, **defaults):
    def deco(fn):
        if name in REGISTRY:
            raise RuntimeError(f"duplicate experiment {name!r}")
        REGISTRY[name] = Experiment(name, doc, defaults, fn)
        return fn

    return deco


def list_experiments():
    return [(e.name, e.doc) for e in sorted(REGISTRY.values(), key=lambda e: e.name)]


def _coefs(specs):
    return [coef.coefficient_from_config(s) for s in specs]


def _stat_rows(rows):
    return ("statistic", "value", "tolerance", "pass"), rows


# --- path-level experiments --------------------------------------------------


@experiment("simulate", "Sample strong solutions of one coefficient and summarize moments at checkpoints.",
            coefficient=1.0, T=1.0, N=1000, n=500, checkpoints=4, se_multiplier=3.0, write_paths=False)
def _simulate(p, seed, threads):
    a = coef.coefficient_from_config(p["coefficient"])
    grid = make_grid(p["T"], p["N"])
    X, A = meas.MeasureSampler(a, seed, grid, threads).sample(p["n"], with_coefficient=True)
    ks = np.linspace(0, grid.N, p["checkpoints"] + 1).astype(int)
    rows, ok = [], True
    ia = np.zeros(A.shape[:2] + A.shape[2:])
    np.cumsum(A[:, :-1] * grid.dt[None, :, None, None], axis=1, out=ia[:, 1:])
    for k in ks:
        x = X.values[:, k]
        m = x.mean(axis=0)
        se = x.std(axis=0, ddof=1) / math.sqrt(p["n"]) if k > 0 else np.zeros_like(m)
        var = x.var(axis=0, ddof=1) if k > 0 else np.zeros_like(m)
        exp_var = np.diagonal(ia[:, k], axis1=-2, axis2=-1).mean(axis=0)
        mean_ok = bool(np.all(np.abs(m) <= p["se_multiplier"] * se + 1e-15))
        ok &= mean_ok
        rows.append([float(grid.times[k]), m.tolist(), var.tolist(), exp_var.tolist(), mean_ok])
    tables = {"moments": (("t", "mean", "variance", "expected_variance", "mean_within_se"), rows)}
    if p["write_paths"]:
        prow = []
        ids = X.provenance["path_ids"]
        for i in range(X.n):
            for k in range(grid.N + 1):
                prow.append([ids[i], float(grid.times[k])] + X.values[i, k].tolist())
        tables["paths"] = (("path_id", "t") + tuple(f"x_{j + 1}" for j in range(X.dim)), prow)
    return Outcome({"coefficient": a.name, "n": p["n"], "N": p["N"], "passed": ok}, tables, ok)


@experiment("qv", "Ensemble mean of the realized quadratic variation against the integrated coefficient.",
            coefficient=2.0, T=1.0, N=10000, n=1000, rel_tol=0.02)
def _qv(p, seed, threads):
    a = coef.coefficient_from_config(p["coefficient"])
    grid = make_grid(p["T"], p["N"])
    X, A = meas.MeasureSampler(a, seed, grid, threads).sample(p["n"], with_coefficient=True)
    q = np.trace(pw.terminal_qv(X.values), axis1=-2, axis2=-1)
    target = float(np.mean(np.trace(A[:, :-1], axis1=-2, axis2=-1) @ grid.dt))
    mean = float(q.mean())
    ok = abs(mean - target) <= p["rel_tol"] * abs(target)
    rows = [["mean_qv_T", mean, p["rel_tol"], ok], ["expected", target, "", ""],
            ["se", float(q.std(ddof=1) / math.sqrt(p["n"])), "", ""]]
    return Outcome({"mean_qv_T": mean, "expected": target, "passed": ok}, {"qv": _stat_rows(rows)}, ok)


@experiment("qv-identity", "Pathwise identity B B^T - (J + J^T) = sum dB dB^T on Brownian paths.",
            d=2, T=1.0, N=1000, n=100, abs_tol=1e-10)
def _qv_identity(p, seed, threads):
    grid = make_grid(p["T"], p["N"])
    B = sample_brownian(grid, p["d"], p["n"], seed, threads)
    gap = float(np.max(np.abs(pw.quadratic_variation_identity(B).values - pw.quadratic_variation(B).values)))
    ok = gap <= p["abs_tol"]
    return Outcome({"max_gap": gap, "passed": ok}, {"identity": _stat_rows([["max_gap", gap, p["abs_tol"], ok]])}, ok)


@experiment("strong-identity", "QV density of sampled solutions against the coefficient along the same paths.",
            coefficients=[2.0, {"kind": "piecewise", "breakpoints": [0, 1], "matrices": [1, 2]},
                          {"kind": "rule", "name": "sin2", "base": 1.0, "amp": 0.5}],
            T=2.0, N=10000, n=300, tol=0.05, jump_tol=0.1)
def _strong_identity(p, seed, threads):
    grid = make_grid(p["T"], p["N"])
    rows, recs = [], []
    for i, a in enumerate(_coefs(p["coefficients"])):
        r = meas.verify_strong_identity(a, p["n"], grid, seed + i, tol=p["tol"], jump_tol=p["jump_tol"], threads=threads)
        rows.append([f"median_error[{i}]", r.statistic, p["tol"], r.passed])
        recs.append(r.to_dict())
    ok = all(r["passed"] for r in recs)
    return Outcome({"records": recs, "passed": ok}, {"strong_identity": _stat_rows(rows)}, ok)


@experiment("universal-bm", "Recover the driving Brownian motion exactly and from the estimated density.",
            coefficient=2.0, T=1.0, N=10000, n=200, exact_tol=1e-10, qv_rel_tol=0.05)
def _universal_bm(p, seed, threads):
    a = coef.coefficient_from_config(p["coefficient"])
    grid = make_grid(p["T"], p["N"])
    X, B = meas.MeasureSampler(a, seed, grid, threads).sample(p["n"], with_driver=True)
    W = meas.universal_bm(X, "exact", a)
    err = float(np.max(np.abs(W.values - B.values)))
    We, info = meas.universal_bm(X, "estimated", return_info=True)
    qv = pw.terminal_qv(We.values).mean(axis=0)
    dev = float(np.max(np.abs(qv - np.eye(a.dim))))
    ok = err <= p["exact_tol"] and dev <= p["qv_rel_tol"]
    rows = [["exact_inversion_error", err, p["exact_tol"], err <= p["exact_tol"]],
            ["estimated_qv_deviation", dev, p["qv_rel_tol"], dev <= p["qv_rel_tol"]],
            ["floored_matrices", info.n_floored, "", ""]]
    return Outcome({"exact_error": err, "estimated_qv": qv.tolist(), "floored": info.n_floored, "passed": ok},
                   {"universal_bm": _stat_rows(rows)}, ok)


@experiment("disagreement", "Disagreement times and the generating-class audit for deterministic generators.",
            a=1.0, b={"kind": "piecewise", "breakpoints": [0, 1], "matrices": [1, 2]},
            expected_theta=1.0, T=2.0, N=200, n=50)
def _disagreement(p, seed, threads):
    a, b = coef.coefficient_from_config(p["a"]), coef.coefficient_from_config(p["b"])
    grid = make_grid(p["T"], p["N"])
    B = sample_brownian(grid, 1, p["n"], seed, threads)
    th = coef.disagreement_times(a, b, B.values, grid)
    exact = bool(np.all(th == p["expected_theta"]))
    gens = [a.generators[0], b.generators[0]]
    rep = coef.check_generating_class(gens, B)
    ok = exact and rep.passed
    rows = [["theta_min", float(th.min()), p["expected_theta"], exact], ["theta_max", float(th.max()), "", ""],
            ["generating_class", rep.passed, "", rep.passed]]
    return Outcome({"theta": float(th[0]), "generating_class": rep.to_dict(), "passed": ok},
                   {"disagreement": _stat_rows(rows)}, ok)


@experiment("aggregate-check", "Coupled consistency of a process family, then the classification aggregator.",
            coefficients=[1.0, 2.0], family="universal_bm", T=1.0, N=10000, n_consistency=100, n=1000,
            consistency_tol=0.0, classify_tol=0.2, min_match=0.99)
def _aggregate_check(p, seed, threads):
    grid = make_grid(p["T"], p["N"])
    cs = _coefs(p["coefficients"])
    makers = {"canonical": agg.ProcessFamily.canonical, "universal_bm": agg.ProcessFamily.universal_bm,
              "constant_index": agg.ProcessFamily.constant_index}
    if p["family"] not in makers:
        raise InvalidSpec(f"unknown family {p['family']!r}; known: {sorted(makers)}")
    fam = makers[p["family"]](cs, grid)
    cons = agg.check_consistency(fam, p["n_consistency"], seed, p["consistency_tol"], threads)
    ens = [meas.MeasureSampler(c, seed + 1 + i, grid, threads).sample(p["n"]) for i, c in enumerate(cs)]
    _, rep = agg.aggregate(fam, ens, p["classify_tol"], p["min_match"])
    ok = cons.passed and rep["passed"]
    rows = [[f"pair({q['a']},{q['b']}).max_discrepancy", q["max_discrepancy"], p["consistency_tol"], q["passed"]]
            for q in cons.pairs]
    rows += [[f"match_fraction[{r['coefficient']}]", r["match_fraction"], p["min_match"], r["passed"]]
             for r in rep["records"]]
    return Outcome({"consistency": cons.to_dict(), "aggregation": rep, "passed": ok},
                   {"aggregation": _stat_rows(rows)}, ok)


@experiment("no-aggregation-demo", "Mixture measures on a lattice of diagonal coefficients admit no aggregator.",
            n=1000, L=11, N=32768, T=1.0, threshold=0.45)
def _no_aggregation(p, seed, threads):
    r = agg.no_aggregation_demo(p["n"], p["L"], p["N"], p["T"], seed, threads=threads, threshold=p["threshold"])
    cand = [[k, v["max_failure"], v["mean_failure"], v["worst_measure"], v["A1_cells"], v["A2_cells"],
             v["A1_and_A2_cells"], v["A1_or_A2_cells"], v["fails"]] for k, v in r["candidates"].items()]
    book = [[k, v] for k, v in r["bookkeeping"].items()]
    tables = {
        "candidates": (("candidate", "max_failure", "mean_failure", "worst_measure", "A1_cells", "A2_cells",
                        "A1_and_A2_cells", "A1_or_A2_cells", "fails"), cand),
        "bookkeeping": (("quantity", "count"), book),
    }
    return Outcome(r, tables, r["passed"])


@experiment("isometry", "Pathwise integral martingale and isometry checks under several measures.",
            coefficients=[1.0, 2.0], integrands=["one", "state"], T=1.0, N=1000, n=2000)
def _isometry(p, seed, threads):
    grid = make_grid(p["T"], p["N"])
    known = {"one": pw.Integrand.constant(1.0), "state": pw.Integrand.markov(lambda t, x: x, "state"),
             "anticipating": pw.Integrand.from_paths(lambda v, t: v[:, 1:], "anticipating")}
    rows, recs = [], []
    for name in p["integrands"]:
        if name not in known:
            raise InvalidSpec(f"unknown integrand {name!r}; known: {sorted(known)}")
        r = agg.aggregate_integral(known[name], p["coefficients"], p["n"], grid, seed, threads=threads)
        recs.append(r)
        for q in r["records"]:
            rows.append([f"{name}[{q['coefficient']}].isometry_gap", q["isometry_gap"], 3 * q["isometry_se"],
                         q["isometry_passed"]])
    ok = all(r["passed"] for r in recs)
    return Outcome({"records": recs, "passed": ok}, {"isometry": _stat_rows(rows)}, ok)


@experiment("girsanov-check", "Reweight Brownian paths by the density of a constant drift.",
            phi=1.0, T=1.0, N=1000, n=5000, se_multiplier=3.0)
def _girsanov(p, seed, threads):
    grid = make_grid(p["T"], p["N"])
    W = sample_brownian(grid, 1, p["n"], seed, threads)
    res = pw.girsanov_weights(pw.Integrand.constant(p["phi"]), W)
    w = res.ensemble.weights
    x = res.ensemble.values[:, -1, 0]
    m = float(w @ x)
    wse = float(math.sqrt(np.sum(w**2 * (x - m) ** 2)))
    Z = res.Z[~res.excluded]
    zm, zse = float(Z.mean()), float(Z.std(ddof=1) / math.sqrt(Z.size))
    k = p["se_multiplier"]
    ok1, ok2 = abs(m) <= k * wse, abs(zm - 1) <= k * zse
    rows = [["weighted_mean_W_T", m, k * wse, ok1], ["mean_Z_T", zm, k * zse, ok2],
            ["excluded", res.n_excluded, "", ""]]
    return Outcome({"weighted_mean": m, "weighted_se": wse, "mean_Z": zm, "se_Z": zse,
                    "excluded": res.n_excluded, "passed": ok1 and ok2}, {"girsanov": _stat_rows(rows)}, ok1 and ok2)


@experiment("ito-residual", "Ito-formula residual for x^2 under grid refinement.",
            N=1000, factor=4, n=1000, T=1.0, ratio_band=[1.3, 1.7])
def _ito(p, seed, threads):
    r = pw.ito_refinement_study(p["N"], p["factor"], p["n"], p["T"], seed)
    lo, hi = p["ratio_band"]
    ok = lo <= r["ratio"] <= hi
    rows = [["rms_coarse", r["coarse"], "", ""], ["rms_fine", r["fine"], "", ""], ["ratio", r["ratio"], f"[{lo}, {hi}]", ok]]
    return Outcome(dict(r, passed=ok), {"ito_residual": _stat_rows(rows)}, ok)


# --- pricing ---------------------------------------------------------------------


def _bs_oracle(payoff, S0, T, sigma):
    if payoff.kind in ("call", "put"):
        return sh.black_scholes(S0, payoff.params[0], T, sigma, payoff.kind)
    if payoff.kind == "butterfly":
        return float(sh.butterfly_bs(S0, payoff.params, T, sigma))
    if payoff.kind == "constant":
        return payoff.params[0]
    return None


@experiment("price-dp", "Lattice dynamic-programming price over a finite volatility set.",
            payoff={"kind": "call", "K": 100.0}, sigmas=[0.1, 0.3], S0=100.0, T=1.0, M=200, rel_tol=0.01,
            write_surface=False)
def _price_dp(p, seed, threads):
    pay = sh.Payoff.from_config(p["payoff"])
    lat = sh.Lattice(p["S0"], p["T"], p["M"], tuple(p["sigmas"]))
    vp = sh.dp_value(lat, pay)
    dm = sh.doob_meyer_on_lattice(vp, "argmax")
    mom_ok, _ = lat.check_moments()
    rows = [["value", vp.value, "", ""], ["moments", mom_ok, 1e-12, mom_ok], ["min_dK_argmax", dm.min_dK, 0.0, dm.min_dK >= 0]]
    ok = mom_ok and dm.min_dK >= 0
    report = {"value": vp.value, "payoff": pay.to_dict(), "sigmas": list(lat.sigmas), "M": lat.M}
    if pay.kind in ("call", "put", "constant"):
        ref = _bs_oracle(pay, p["S0"], p["T"], max(p["sigmas"]))
        rel = abs(vp.value - ref) / max(abs(ref), 1e-300) if ref else abs(vp.value)
        good = rel <= p["rel_tol"]
        rows.append(["bs_sigma_max", ref, p["rel_tol"], good])
        report["bs_sigma_max"] = ref
        ok &= good
    report["passed"] = ok
    tables = {"price": _stat_rows(rows)}
    if p["write_surface"]:
        surf = [[m, float(s), float(v), int(a)] for m in range(lat.M)
                for s, v, a in zip(lat.spots(m), vp.V[m], vp.argmax[m])]
        tables["surface"] = (("layer", "spot", "value", "argmax"), surf)
    return Outcome(report, tables, ok)


@experiment("price-bsb", "Finite-difference Black-Scholes-Barenblatt price on a volatility band.",
            payoff={"kind": "call", "K": 100.0}, sigma_lo=0.1, sigma_hi=0.3, S0=100.0, T=1.0, J=400, rel_tol=0.005)
def _price_bsb(p, seed, threads):
    pay = sh.Payoff.from_config(p["payoff"])
    r = sh.bsb_fd_price(pay, p["sigma_lo"], p["sigma_hi"], p["S0"], p["T"], J=p["J"])
    rows = [["value", r.value, "", ""], ["time_steps", r.n_steps, "", ""]]
    ok = True
    report = {"value": r.value, "n_steps": r.n_steps}
    if pay.kind in ("call", "put"):
        ref = _bs_oracle(pay, p["S0"], p["T"], p["sigma_hi"])
        good = abs(r.value - ref) <= p["rel_tol"] * ref
        rows.append(["bs_sigma_hi", ref, p["rel_tol"], good])
        report["bs_sigma_hi"] = ref
        ok = good
    report["passed"] = ok
    surface = (("spot", "value"), [[float(s), float(v)] for s, v in zip(r.S, r.V)])
    return Outcome(report, {"price": _stat_rows(rows), "surface": surface}, ok)


@experiment("price-mc", "Monte-Carlo lower bound over a finite list of squared-volatility coefficients.",
            payoff={"kind": "call", "K": 100.0}, coefficients=[0.01, 0.09], S0=100.0, T=1.0, N=64, n=20000,
            se_multiplier=3.0)
def _price_mc(p, seed, threads):
    pay = sh.Payoff.from_config(p["payoff"])
    r = sh.mc_lower_bound(pay, _coefs(p["coefficients"]), p["n"], p["S0"], p["T"], p["N"], seed, threads)
    rows = [[f"mean[{i}]", m, s, ""] for i, (m, s) in enumerate(zip(r["means"], r["ses"]))]
    ok = True
    consts = [c for c in p["coefficients"] if isinstance(c, (int, float))]
    if len(consts) == len(p["coefficients"]) and pay.kind in ("call", "put", "constant"):
        ref = _bs_oracle(pay, p["S0"], p["T"], math.sqrt(max(consts)))
        ok = abs(r["best_mean"] - ref) <= p["se_multiplier"] * r["se"] + 1e-12
        rows.append(["best_vs_bs", r["best_mean"] - ref, p["se_multiplier"] * r["se"], ok])
        r["bs_reference"] = ref
    r["passed"] = ok
    return Outcome(r, {"price": _stat_rows(rows)}, ok)


@experiment("doob-meyer", "Lattice Doob-Meyer split and self-financing identity.",
            payoff={"kind": "call", "K": 100.0}, sigmas=[0.1, 0.3], S0=100.0, T=1.0, M=200, identity_tol=1e-10,
            n_branch_paths=200)
def _doob_meyer(p, seed, threads):
    pay = sh.Payoff.from_config(p["payoff"])
    lat = sh.Lattice(p["S0"], p["T"], p["M"], tuple(p["sigmas"]))
    vp = sh.dp_value(lat, pay)
    rows, ok = [], True
    for sel in ["argmax"] + list(range(len(lat.sigmas))):
        dm = sh.doob_meyer_on_lattice(vp, sel)
        err = sh.self_financing_error(vp, dm, p["n_branch_paths"], seed)
        kmax = max(float(k.max()) for k in dm.dK)
        good = dm.min_dK >= 0 and err <= p["identity_tol"]
        ok &= good
        rows.append([f"{sel}.min_dK", dm.min_dK, 0.0, dm.min_dK >= 0])
        rows.append([f"{sel}.max_dK", kmax, "", ""])
        rows.append([f"{sel}.self_financing_error", err, p["identity_tol"], err <= p["identity_tol"]])
    return Outcome({"value": vp.value, "passed": ok}, {"doob_meyer": _stat_rows(rows)}, ok)


@experiment("hedge-verify", "Simulate a Black-Scholes delta hedge priced at the upper volatility under several measures.",
            K=100.0, S0=100.0, T=1.0, sigmas=[0.1, 0.2, 0.3], N=524288, n=200, eps_rel=0.005, max_fraction=0.01)
def _hedge_verify(p, seed, threads):
    pay = sh.Payoff.call(p["K"])
    lo, hi = min(p["sigmas"]), max(p["sigmas"])
    price_hi = sh.black_scholes(p["S0"], p["K"], p["T"], hi)
    price_lo = sh.black_scholes(p["S0"], p["K"], p["T"], lo)
    hedge = sh.bs_delta_hedge(hi, p["K"], p["T"])
    eps = p["eps_rel"] * price_hi
    main, control = sh.verify_superhedge([price_hi, price_lo], hedge, pay, p["sigmas"], p["n"], p["S0"], p["T"],
                                         p["N"], seed, eps=eps, threads=threads, max_fraction=p["max_fraction"])
    ok = main["passed"] and not control["passed"]
    rows = [[f"{tag}.fraction_below[{r['sigma']}]", r["fraction_below"], p["max_fraction"], r["passed"]]
            for tag, rep in (("bs_hi", main), ("bs_lo", control)) for r in rep["records"]]
    return Outcome({"superhedge": main, "underpriced_control": control, "passed": ok},
                   {"hedge": _stat_rows(rows)}, ok)
