"""Empirical martingale measures built from strong solutions.

A measure is never a density here: it is a seeded sampler that pushes
Wiener paths through the map ``B -> X`` solving ``dX = a^{1/2}(X) dB``.
Coefficients with path-dependent levels are integrated step by step so that
stopping rules and events only ever see the solution up to the current time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .coefficients import SeparableCoefficient, as_coefficient, spd_power
from .errors import InvalidArgument
from .paths import Grid, Path, PathEnsemble, brownian_values
from .pathwise import _integrate, _unpack, default_window, qv_density, quadratic_variation

EIG_FLOOR = 1e-8
CHUNK = 256


def _solve(a: SeparableCoefficient, dB, grid):
    """Strong solution values, coefficient along the solution, and the tracker."""
    n, N, d = dB.shape
    if d != a.dim:
        raise InvalidArgument(f"driver dimension {d} != coefficient dimension {a.dim}")
    X = np.zeros((n, N + 1, d))
    if a.path_independent:
        table = a.time_table(grid)
        root = spd_power(table, 0.5)
        np.cumsum(np.einsum("kij,nkj->nki", root[:-1], dB), axis=1, out=X[:, 1:])
        A, tr = a.along(X, grid)
        return X, A, tr
    A = np.empty((n, N + 1, d, d))
    tr = a.tracker(n, grid)
    for k in range(N + 1):
        tr.update(X, k)
        A[:, k] = tr.coefficient(X, k)
        if k < N:
            root = spd_power(A[:, k], 0.5)
            X[:, k + 1] = X[:, k] + np.einsum("nij,nj->ni", root, dB[:, k])
    return X, A, tr


def strong_solution(a, driver, grid=None):
    """Solve ``X_{k+1} = X_k + a^{1/2}(X|[0,t_k], t_k) (B_{k+1} - B_k)``, ``X_0 = 0``.

    Exact in law for coefficients that are piecewise constant in time,
    Euler-Maruyama for state-dependent rules.  Returns the same container
    type as ``driver``.
    """
    a = as_coefficient(a)
    values, grid, wrap = _unpack(driver, grid)
    X, _, _ = _solve(a, np.diff(values, axis=1), grid)
    if isinstance(driver, PathEnsemble):
        prov = dict(driver.provenance, coefficient=a.name or repr(a))
        return PathEnsemble(grid, X, driver.weights, prov)
    return wrap(X)


@dataclass(frozen=True)
class MeasureSampler:
    """Seeded sampler of the law of the strong solution driven by Brownian motion.

    Path ``i`` depends only on ``(seed, i)``, so samples are reproducible and
    independent of ``threads`` and chunking.
    """

    coefficient: SeparableCoefficient
    seed: int
    grid: Grid
    threads: int = 1

    @property
    def dim(self):
        return self.coefficient.dim

    def _chunks(self, n, start):
        for lo in range(start, start + n, CHUNK):
            hi = min(lo + CHUNK, start + n)
            B = brownian_values(self.grid, self.dim, np.arange(lo, hi), self.seed, self.threads)
            yield lo - start, hi - start, B

    def sample(self, n, start=0, with_driver=False, with_coefficient=False):
        """``n`` paths as a :class:`PathEnsemble` (optionally with drivers and ``a`` along X)."""
        if int(n) != n or n < 1:
            raise InvalidArgument(f"path count must be a positive integer, got {n!r}")
        n = int(n)
        d, N = self.dim, self.grid.N
        X = np.empty((n, N + 1, d))
        drv = np.empty((n, N + 1, d)) if with_driver else None
        coef = np.empty((n, N + 1, d, d)) if with_coefficient else None
        for lo, hi, B in self._chunks(n, start):
            x, A, _ = _solve(self.coefficient, np.diff(B, axis=1), self.grid)
            X[lo:hi] = x
            if with_driver:
                drv[lo:hi] = B
            if with_coefficient:
                coef[lo:hi] = A
        prov = {
            "sampler": "strong_solution",
            "coefficient": self.coefficient.name or repr(self.coefficient),
            "seed": int(self.seed),
            "path_ids": list(range(start, start + n)),
        }
        ens = PathEnsemble(self.grid, X, None, prov)
        if not (with_driver or with_coefficient):
            return ens
        out = [ens]
        if with_driver:
            out.append(PathEnsemble(self.grid, drv, None, dict(prov, sampler="brownian")))
        if with_coefficient:
            out.append(coef)
        return tuple(out)


def sample_measure(sampler: MeasureSampler, n: int, start: int = 0) -> PathEnsemble:
    return sampler.sample(n, start)


@dataclass
class UniversalBMInfo:
    mode: str
    n_floored: int = 0
    burn_in: np.ndarray = None


def universal_bm(X, mode="exact", a=None, window=None, floor=EIG_FLOOR, grid=None, return_info=False):
    """``W = int a^{-1/2} dX`` with ``a`` exact (``mode="exact"``) or estimated (``"estimated"``).

    In estimated mode the QV density is computed with the default window and
    its eigenvalues are floored at ``floor`` before inversion; the number of
    floored matrices is reported in the info object.
    """
    values, grid, wrap = _unpack(X, grid)
    info = UniversalBMInfo(mode)
    if mode == "exact":
        if a is None:
            raise InvalidArgument("exact mode needs the generating coefficient")
        A, _ = as_coefficient(a).along(values, grid)
        inv = spd_power(A[:, :-1], -0.5)
    elif mode == "estimated":
        qd = qv_density(values, window, grid)
        inv, info.n_floored = spd_power(qd.values[:, :-1], -0.5, floor=floor)
        info.burn_in = qd.burn_in
    else:
        raise InvalidArgument(f"unknown mode {mode!r}")
    W = _integrate(inv, np.diff(values, axis=1))
    out = wrap(W)
    if isinstance(out, PathEnsemble):
        out = PathEnsemble(grid, W, out.weights, dict(out.provenance, universal_bm=mode))
    return (out, info) if return_info else out


def support_statistics(values, grid, candidates, window=None):
    """Relative sup-distance between running QV and each candidate's ``int a ds``.

    Returns an array ``(n, len(candidates))`` of
    ``max_k |Q_k - int_0^{t_k} a|_max / max_k |int_0^{t_k} a|_max`` over ``k >= w``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[None]
    w = default_window(grid.N) if window is None else int(window)
    Q = quadratic_variation(values, grid).values[:, w:]
    stats = np.empty((values.shape[0], len(candidates)))
    for j, c in enumerate(candidates):
        A, _ = as_coefficient(c).along(values, grid)
        I = np.zeros_like(A)
        np.cumsum(A[:, :-1] * grid.dt[None, :, None, None], axis=1, out=I[:, 1:])
        I = I[:, w:]
        num = np.max(np.abs(Q - I), axis=(1, 2, 3))
        den = np.max(np.abs(I), axis=(1, 2, 3))
        stats[:, j] = num / np.maximum(den, 1e-300)
    return stats


def classify_support(path, candidates, tol=0.2, window=None, grid=None, return_stats=False):
    """Index of the unique candidate whose ``int a ds`` tracks the running QV within ``tol``.

    Burn-in points (``k < w``) are skipped.  Returns None when no candidate
    or more than one candidate matches.  Ensembles give an integer array with
    ``-1`` for None.
    """
    values, grid, _ = _unpack(path, grid)
    stats = support_statistics(values, grid, candidates, window)
    match = stats <= tol
    count = match.sum(axis=1)
    idx = np.where(count == 1, np.argmax(match, axis=1), -1)
    if isinstance(path, PathEnsemble) or (not isinstance(path, Path) and np.ndim(path) == 3):
        return (idx, stats) if return_stats else idx
    out = None if idx[0] < 0 else int(idx[0])
    return (out, stats[0]) if return_stats else out


@dataclass
class StrongIdentityReport:
    statistic: float
    tolerance: float
    passed: bool
    per_time: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)
    path_error_quantiles: dict = None
    n_excluded_jump: int = 0

    def to_dict(self):
        return {
            "statistic": self.statistic,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "valid_times": int(self.valid.sum()),
            "n_excluded_jump": self.n_excluded_jump,
            "path_error_quantiles": self.path_error_quantiles,
        }


def _jump_mask(A, w, jump_tol):
    """True where the coefficient's trace varies by more than ``jump_tol`` (relative) over the trailing window."""
    tr = np.trace(A, axis1=-2, axis2=-1)
    size = w + 1 if w % 2 == 0 else w + 2  # odd size so the trailing window covers at least [k - w, k]
    origin = (size - 1) // 2
    hi = maximum_filter1d(tr, size, axis=1, origin=origin, mode="nearest")
    lo = minimum_filter1d(tr, size, axis=1, origin=origin, mode="nearest")
    return (hi - lo) > jump_tol * np.abs(tr)


def verify_strong_identity(a, n, grid, seed=0, window=None, tol=0.05, jump_tol=0.1, threads=1):
    """Compare the QV density of sampled solutions with ``a`` along the same paths.

    For every valid grid time (outside burn-in and jump windows) the
    normalized estimate ``a^{-1/2} a_hat a^{-1/2}`` is reduced to its median
    over paths and compared with the identity (max-abs entry); the reported
    statistic is the median of that deviation over time.  Per-path error
    quantiles are included for information.
    """
    a = as_coefficient(a)
    sampler = MeasureSampler(a, seed, grid, threads)
    X, A = sampler.sample(n, with_coefficient=True)
    w = default_window(grid.N) if window is None else int(window)
    ah = qv_density(X.values, w, grid).values
    inv = spd_power(A, -0.5)
    norm = np.einsum("nkij,nkjl,nklm->nkim", inv, ah, inv)
    jump = _jump_mask(A, w, jump_tol)
    valid_path = ~jump
    valid_path[:, :w] = False
    masked = np.where(valid_path[..., None, None], norm, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(masked, axis=0)
    eye = np.eye(a.dim)
    per_time = np.max(np.abs(med - eye), axis=(-1, -2))
    valid = np.isfinite(per_time) & (valid_path.sum(axis=0) >= max(1, n // 2))
    stat = float(np.median(per_time[valid])) if valid.any() else float("inf")
    errs = np.max(np.abs(norm - eye), axis=(-1, -2))[valid_path]
    q = {str(p): float(np.quantile(errs, p)) for p in (0.5, 0.9, 0.99)} if errs.size else {}
    return StrongIdentityReport(stat, tol, bool(stat <= tol), per_time, valid, q, int(jump[:, w:].sum()))
