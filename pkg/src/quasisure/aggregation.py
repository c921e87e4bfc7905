"""Consistency checks and explicit aggregation over finite coefficient families.

The almost-sure statements of the theory are realized in two ways:

* coupling: members are driven by the same Brownian increments, so equality
  before the disagreement time becomes bit-exact path equality;
* classification: on independent samples, each path is assigned to the
  coefficient whose running integral its quadratic variation tracks, and the
  aggregator reads off that member's value.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coefficients import as_coefficient, disagreement_times
from .errors import InvalidArgument
from .measures import MeasureSampler, _solve, classify_support
from .paths import Grid, PathEnsemble, brownian_values, path_rng
from .pathwise import Integrand, ito_integral


@dataclass
class ProcessFamily:
    """Processes ``X^a`` indexed by a finite list of coefficients.

    ``rule(i, values, grid)`` returns the process of member ``i`` evaluated on
    canonical paths ``values`` (shape ``(n, N + 1, d)``) as an array
    ``(n, N + 1, m)``.  Rules must be adapted.
    """

    coefficients: list
    rule: callable
    grid: Grid
    name: str = ""

    def __post_init__(self):
        self.coefficients = [as_coefficient(c) for c in self.coefficients]
        if not self.coefficients:
            raise InvalidArgument("a family needs at least one member")

    def __len__(self):
        return len(self.coefficients)

    def member(self, i, values):
        out = np.asarray(self.rule(i, values, self.grid), dtype=float)
        if out.ndim == 2:
            out = out[..., None]
        return out

    @classmethod
    def canonical(cls, coefficients, grid):
        """``X^a = B`` for every member (the canonical process itself)."""
        return cls(coefficients, lambda i, v, g: v, grid, "canonical")

    @classmethod
    def universal_bm(cls, coefficients, grid):
        """``X^a = int a^{-1/2} dB``: the Brownian motion driving each member."""
        coefs = [as_coefficient(c) for c in coefficients]

        def rule(i, v, g):
            from .measures import universal_bm

            return universal_bm(v, "exact", coefs[i], grid=g)

        return cls(coefs, rule, grid, "universal_bm")

    @classmethod
    def constant_index(cls, coefficients, grid, labels=None):
        """``X^a_t = label(a)`` for all ``t``; labels default to ``diag(a)`` at time 0."""
        coefs = [as_coefficient(c) for c in coefficients]
        if labels is None:
            labels = [np.diag(c.time_table(grid)[0]) if c.path_independent else np.array([float(i)])
                      for i, c in enumerate(coefs)]
        labels = [np.atleast_1d(np.asarray(x, dtype=float)) for x in labels]

        def rule(i, v, g):
            return np.broadcast_to(labels[i], v.shape[:2] + labels[i].shape).copy()

        fam = cls(coefs, rule, grid, "constant_index")
        fam.labels = labels
        return fam


def corrupt_member(family, index, shift=1):
    """Copy of ``family`` whose member ``index`` integrates increments shifted by ``shift`` steps.

    The corrupted member uses ``B_{k+1+shift} - B_{k+shift}`` at step ``k``,
    which anticipates the path; used as a negative control.
    """
    base = family.rule

    def rule(i, v, g):
        if i != index:
            return base(i, v, g)
        dv = np.diff(v, axis=1)
        shifted = np.zeros_like(dv)
        shifted[:, : dv.shape[1] - shift] = dv[:, shift:]
        w = np.concatenate([v[:, :1], v[:, :1] + np.cumsum(shifted, axis=1)], axis=1)
        return base(i, w, g)

    return ProcessFamily(family.coefficients, rule, family.grid, family.name + f"+shift{shift}@{index}")


@dataclass
class AggregationReport:
    """Pairwise consistency records and a global verdict."""

    pairs: list
    passed: bool
    tol: float

    def to_dict(self):
        return {"passed": self.passed, "tol": self.tol, "pairs": self.pairs}


def _first_difference_time(x, y, grid, tol):
    """Per path: last grid time before ``x`` and ``y`` first differ by more than ``tol``; inf if never."""
    gap = np.max(np.abs(x - y), axis=-1) > tol
    k = np.argmax(gap, axis=1)
    has = gap.any(axis=1)
    return np.where(has, grid.times[np.maximum(k - 1, 0)], math.inf), np.where(has, grid.times[k], math.inf)


def check_consistency(family, n, seed=0, tol=0.0, threads=1):
    """Coupled check that ``X^a = X^b`` on ``[0, theta^{a,b})`` for every pair.

    For each pair, ``n`` Brownian drivers are shared by the strong solutions
    ``omega^a`` and ``omega^b``; the disagreement time is computed on
    ``omega^a`` and the members compared as ``X^a(omega^a)`` vs ``X^b(omega^b)``
    strictly before it.  The record also holds the coupling-discrepancy time
    (last grid time before the solutions themselves separate), which for
    piecewise-constant coefficients coincides with the disagreement time.
    """
    grid = family.grid
    m = len(family)
    d = family.coefficients[0].dim
    B = brownian_values(grid, d, np.arange(n), seed, threads)
    dB = np.diff(B, axis=1)
    sols = [_solve(c, dB, grid)[0] for c in family.coefficients]
    outs = [family.member(i, sols[i]) for i in range(m)]
    pairs = []
    for i in range(m):
        for j in range(i + 1, m):
            theta = disagreement_times(family.coefficients[i], family.coefficients[j], sols[i], grid)
            before = grid.times[None, :] < theta[:, None]
            diff = np.max(np.abs(outs[i] - outs[j]), axis=-1)
            disc = np.where(before, diff, 0.0)
            worst = float(disc.max()) if disc.size else 0.0
            bad = disc > tol
            first_fail = None
            if bad.any():
                first_fail = float(grid.times[np.argmax(bad.any(axis=0))])
            coupling, _ = _first_difference_time(sols[i], sols[j], grid, 0.0)
            both_inf = np.isinf(coupling) & np.isinf(theta)
            agree = bool(np.all(both_inf | (coupling == theta)))
            pairs.append(
                {
                    "a": i,
                    "b": j,
                    "theta_min": float(np.min(theta)),
                    "theta_max": float(np.max(theta)),
                    "vacuous": bool(np.all(theta <= grid.times[0])),
                    "max_discrepancy": worst,
                    "first_failure_time": first_fail,
                    "theta_equals_coupling_time": agree,
                    "passed": bool(worst <= tol),
                }
            )
    return AggregationReport(pairs, all(p["passed"] for p in pairs), tol)


@dataclass
class Aggregator:
    """``X(omega) = X^{c(omega)}(omega)`` with ``c`` the support classification."""

    family: ProcessFamily
    tol: float = 0.2
    window: int = None

    def classify(self, values):
        return classify_support(values, self.family.coefficients, self.tol, self.window, grid=self.family.grid)

    def __call__(self, values):
        """Aggregated values (NaN on unclassified paths) and the class index per path."""
        values = np.asarray(values, dtype=float)
        c = self.classify(values)
        out = None
        for i in range(len(self.family)):
            idx = np.nonzero(c == i)[0]
            if idx.size == 0:
                continue
            x = self.family.member(i, values[idx])
            if out is None:
                out = np.full((values.shape[0],) + x.shape[1:], np.nan)
            out[idx] = x
        if out is None:
            out = np.full(values.shape[:2] + (1,), np.nan)
        return out, c


def aggregate(family, ensembles, tol=0.2, min_match=0.99, window=None):
    """Build the classification aggregator and audit it on labeled ensembles.

    ``ensembles`` is a list of :class:`PathEnsemble` (or arrays), entry ``i``
    sampled under coefficient ``i``.  On each, the aggregator must equal the
    member ``X^i`` exactly on at least ``min_match`` of the paths.
    """
    agg = Aggregator(family, tol, window)
    records = []
    for i, ens in enumerate(ensembles):
        values = ens.values if isinstance(ens, PathEnsemble) else np.asarray(ens, dtype=float)
        x, c = agg(values)
        ref = family.member(i, values)
        same = np.all(x == ref, axis=(1, 2))
        unclassified = int(np.sum(c < 0))
        frac = float(np.mean(same))
        records.append(
            {
                "coefficient": i,
                "n": int(values.shape[0]),
                "match_fraction": frac,
                "misclassified": int(np.sum((c >= 0) & (c != i))),
                "unclassified": unclassified,
                "passed": frac >= min_match,
            }
        )
    report = {"passed": all(r["passed"] for r in records), "min_match": min_match, "records": records}
    return agg, report


def aggregate_integral(H, coefficients, n, grid, seed=0, n_checkpoints=4, threads=1):
    """Evaluate ``M = int H dB`` pathwise on each measure and audit martingale and isometry.

    Per coefficient: mean increments of ``M`` over ``n_checkpoints`` equal
    time blocks are zero within 3 SE, and
    ``D = M_T^2 - sum H^T a H dt`` has mean zero within 3 SE.
    """
    if not isinstance(H, Integrand):
        H = Integrand.constant(H)
    records = []
    for i, c in enumerate(coefficients):
        c = as_coefficient(c)
        X, A = MeasureSampler(c, seed + i, grid, threads).sample(n, with_coefficient=True)
        h = H.evaluate(X.values, grid.times)
        M = ito_integral(H, X).values[..., 0]
        ks = np.linspace(0, grid.N, n_checkpoints + 1).astype(int)
        incs = M[:, ks[1:]] - M[:, ks[:-1]]
        mean_inc = incs.mean(axis=0)
        se_inc = incs.std(axis=0, ddof=1) / math.sqrt(n)
        mart_ok = bool(np.all(np.abs(mean_inc) <= 3 * se_inc + 1e-15))
        quad = np.einsum("nki,nkij,nkj->nk", h, A[:, :-1], h) @ grid.dt
        D = M[:, -1] ** 2 - quad
        se = float(D.std(ddof=1) / math.sqrt(n))
        iso_ok = bool(abs(D.mean()) <= 3 * se + 1e-15)
        records.append(
            {
                "coefficient": i,
                "mean_MT2": float(np.mean(M[:, -1] ** 2)),
                "mean_quad": float(np.mean(quad)),
                "isometry_gap": float(D.mean()),
                "isometry_se": se,
                "isometry_passed": iso_ok,
                "mean_increments": mean_inc.tolist(),
                "increment_se": se_inc.tolist(),
                "martingale_passed": mart_ok,
            }
        )
    passed = all(r["isometry_passed"] and r["martingale_passed"] for r in records)
    return {"integrand": H.description, "passed": passed, "records": records}


# --- no-aggregation demonstration -------------------------------------------


def _mixture_qv(lattice, n, N, T, seed, threads):
    """Terminal realized QV slopes for the mixture ensembles, shape ``(L, n, 2)``, plus true cells."""
    L = len(lattice)
    dt = T / N
    slopes = np.empty((L, n, 2))
    cells = np.empty((L, n, 2), dtype=int)

    def work(m):
        for i in range(n):
            pid = m * n + i
            mix = path_rng(seed, pid, stream=1)
            z = int(mix.integers(L))
            flip = bool(mix.integers(2))
            cell = (z, m) if flip else (m, z)
            diag = np.array([lattice[cell[0]], lattice[cell[1]]])
            dX = np.sqrt(diag * dt) * path_rng(seed, pid).standard_normal((N, 2))
            slopes[m, i] = np.einsum("kj,kj->j", dX, dX) / T
            cells[m, i] = cell

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(L)))
    else:
        for m in range(L):
            work(m)
    return slopes, cells


def _candidate_rules(L, train_counts):
    """Candidate aggregator tables ``X[i, j]`` (lattice indices), fixed before evaluation."""
    i, j = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    half = (L - 1) // 2
    tourney = np.where(i == j, i, np.where(((j - i) % L >= 1) & ((j - i) % L <= half), i, j))
    plural = np.argmax(train_counts, axis=0)  # ties -> lowest index
    return {
        "coordinate_1": i,
        "coordinate_2": j,
        "max": np.maximum(i, j),
        "min": np.minimum(i, j),
        "mean": np.rint((i + j) / 2).astype(int),
        "tournament": tourney,
        "plurality_split": plural,
    }


def no_aggregation_demo(n=1000, L=11, N=32768, T=1.0, seed=0, tol=None, threads=1, threshold=0.45):
    """Mixture-measure demonstration that the constant family admits no aggregator.

    For each lattice value ``a`` the measure ``P_a`` mixes ``diag(a, z)`` and
    ``diag(z, a)`` with ``z`` uniform on the lattice.  Paths are classified to
    lattice cells from their per-coordinate QV slope; each candidate assigns a
    value to every cell, and a path of ``P_a`` is a failure when the value is
    not ``a``.  The demo passes when every candidate fails on at least
    ``threshold`` of some ``P_a`` ensemble.
    """
    if L < 1 or n < 2:
        raise InvalidArgument("need L >= 1 and n >= 2")
    lattice = np.linspace(1.0, 2.0, L) if L > 1 else np.array([1.0])
    spacing = lattice[1] - lattice[0] if L > 1 else 1.0
    tol = 0.5 * spacing if tol is None else tol
    slopes, cells = _mixture_qv(lattice, n, N, T, seed, threads)

    near = np.argmin(np.abs(slopes[..., None] - lattice), axis=-1)
    ok = np.all(np.abs(slopes - lattice[near]) <= tol, axis=-1)
    classified = np.where(ok[..., None], near, -1)
    correct = np.all(classified == cells, axis=-1)
    accuracy = float(correct.mean())

    # split: even path positions train the fitted candidate, odd ones evaluate everything
    train = np.zeros((L, L, L), dtype=int)  # [measure, i, j]
    for m in range(L):
        c = classified[m, 0::2]
        c = c[np.all(c >= 0, axis=1)]
        np.add.at(train[m], (c[:, 0], c[:, 1]), 1)
    rules = _candidate_rules(L, train)

    test = classified[:, 1::2]
    n_test = test.shape[1]
    counts = np.zeros((L, L, L), dtype=int)
    for m in range(L):
        c = test[m][np.all(test[m] >= 0, axis=1)]
        np.add.at(counts[m], (c[:, 0], c[:, 1]), 1)

    results = {}
    for name, table in rules.items():
        fail = np.empty(L)
        for m in range(L):
            c = test[m]
            good = np.all(c >= 0, axis=1)
            val = np.full(n_test, -1)
            val[good] = table[c[good, 0], c[good, 1]]
            fail[m] = float(np.mean(val != m))
        A1 = int(np.sum(table == np.arange(L)[:, None]))
        A2 = int(np.sum(table == np.arange(L)[None, :]))
        A12 = int(np.sum((table == np.arange(L)[:, None]) & (table == np.arange(L)[None, :])))
        results[name] = {
            "failure_by_measure": fail.tolist(),
            "max_failure": float(fail.max()),
            "mean_failure": float(fail.mean()),
            "worst_measure": float(lattice[int(np.argmax(fail))]),
            "A1_cells": A1,
            "A2_cells": A2,
            "A1_and_A2_cells": A12,
            "A1_or_A2_cells": A1 + A2 - A12,
            "fails": bool(fail.max() >= threshold),
        }

    cells_total = L * L
    certificate = 1.0 - counts.max(axis=0).sum() / float(L * n_test)
    bookkeeping = {
        "lattice_cells": cells_total,
        "required_A1": cells_total,
        "required_A2": cells_total,
        "max_A1_and_A2": L,
        "required_union": 2 * cells_total - L,
        "available_union": cells_total,
        "normalized_sum": 2.0,
        "normalized_union_lower_bound": 2.0 - L / cells_total,
        "population_min_max_failure": (L - 1) / (2.0 * L),
    }
    if L == 1:
        passed = all(r["max_failure"] == 0.0 for r in results.values())
    else:
        passed = all(r["fails"] for r in results.values())
    return {
        "lattice": lattice.tolist(),
        "n_per_measure": n,
        "n_test_per_measure": n_test,
        "N": N,
        "classification_accuracy": accuracy,
        "unclassified": int(np.sum(~ok)),
        "threshold": threshold,
        "candidates": results,
        "in_sample_certificate": float(certificate),
        "bookkeeping": bookkeeping,
        "passed": bool(passed),
    }
