"""Diffusion coefficients: generators, stopping rules, partition events and
their separable assembly

    a = sum_n sum_i a^n_i 1_{E^n_i} 1_[tau_n, tau_{n+1})

Stopping times are grid valued: a hitting rule fires at the first grid point
where its condition holds, which rounds a continuous hitting time up and keeps
``{tau <= t}`` free of look-ahead.  Levels advance strictly (``tau_{n+1} >
tau_n``).  Partition events are predicates of the path up to ``tau_n``; each
path must match exactly one per level.

All evaluation is causal: the coefficient at ``t_k`` is computed from the path
restricted to ``[0, t_k]``, which the SDE solver in :mod:`quasisure.measures`
relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from numbers import Rational

import numpy as np

from .errors import InvalidArgument, InvalidSpec, PartitionViolation
from .paths import TIME_RTOL, Grid, Path, PathEnsemble

INF = math.inf

# --- SPD helpers -----------------------------------------------------------


def as_spd(m, dim=None):
    """Validate a symmetric positive definite matrix (scalars allowed for d = 1)."""
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidSpec(f"expected a square matrix, got shape {a.shape}")
    if dim is not None and a.shape[0] != dim:
        raise InvalidSpec(f"expected a {dim}x{dim} matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidSpec("matrix has non-finite entries")
    if np.max(np.abs(a - a.T)) > 1e-12 * max(1.0, np.max(np.abs(a))):
        raise InvalidSpec("matrix is not symmetric")
    if np.linalg.eigvalsh(a)[0] <= 0:
        raise InvalidSpec("matrix is not positive definite")
    return a


def spd_power(a, power, floor=None):
    """``a**power`` for a batch of symmetric matrices (..., d, d) via eigendecomposition.

    With ``floor`` set, eigenvalues are clipped from below first; the second
    return value counts the clipped matrices.
    """
    a = np.asarray(a, dtype=float)
    if a.shape[-1] == 1:
        x = a
        nclip = 0
        if floor is not None:
            low = x < floor
            nclip = int(np.count_nonzero(low))
            x = np.where(low, floor, x)
        out = x ** power
        return (out, nclip) if floor is not None else out
    w, v = np.linalg.eigh(0.5 * (a + np.swapaxes(a, -1, -2)))
    nclip = 0
    if floor is not None:
        low = w < floor
        nclip = int(np.count_nonzero(np.any(low, axis=-1)))
        w = np.where(low, floor, w)
    out = np.einsum("...ij,...j,...kj->...ik", v, w ** power, v)
    return (out, nclip) if floor is not None else out


def _time_key(t):
    return float(t)


def _is_rational(x):
    return isinstance(x, Rational)


def _parse_number(x):
    if isinstance(x, str):
        return Fraction(x)
    return x


def _rows(values, idx, k):
    """History ``values[idx, :k+1]`` without copying when ``idx`` covers every path."""
    h = values[:, : k + 1]
    if len(idx) == values.shape[0] and np.array_equal(idx, np.arange(values.shape[0])):
        return h
    return h[idx]


# --- generators ------------------------------------------------------------


class Generator:
    """A coefficient process from a generating class.

    Subclasses implement :meth:`at_step` (value at ``t_k`` from the history
    ``[0, t_k]``).  ``deterministic`` generators also provide :meth:`table`.
    """

    dim: int = 1
    deterministic = False
    lipschitz = None

    def at_step(self, history, k, t):
        raise NotImplementedError

    def at_rows(self, values, idx, k, t):
        """Value at ``t_k`` for paths ``idx`` of the full array ``values`` (only ``[:k+1]`` is read)."""
        return self.at_step(_rows(values, idx, k), k, t)

    def table(self, grid):
        raise TypeError(f"{type(self).__name__} is not deterministic")

    def along(self, values, grid):
        """Values at every grid time for a batch of paths, shape ``(n, N + 1, d, d)``."""
        n = values.shape[0]
        if self.deterministic:
            return np.broadcast_to(self.table(grid), (n,) + (grid.N + 1, self.dim, self.dim))
        out = np.empty((n, grid.N + 1, self.dim, self.dim))
        for k, t in enumerate(grid.times):
            out[:, k] = self.at_step(values[:, : k + 1], k, t)
        return out


class PiecewiseConstant(Generator):
    """Deterministic ``a(t) = matrices[i]`` on ``[breakpoints[i], breakpoints[i+1])``.

    Breakpoints and entries may be :class:`fractions.Fraction` (or strings such
    as ``"1/3"``); when all of them are rational the generator is flagged
    ``rational`` and concatenation keeps it so.
    """

    deterministic = True

    def __init__(self, breakpoints, matrices):
        bps = [_parse_number(b) for b in breakpoints]
        mats = []
        for m in matrices:
            arr = np.atleast_2d(np.array(m, dtype=object))
            mats.append(np.vectorize(_parse_number, otypes=[object])(arr))
        if not bps or len(bps) != len(mats):
            raise InvalidSpec("need one matrix per breakpoint")
        if float(bps[0]) != 0.0:
            raise InvalidSpec("first breakpoint must be 0")
        if any(float(b1) <= float(b0) for b0, b1 in zip(bps, bps[1:])):
            raise InvalidSpec("breakpoints must be strictly increasing")
        self.breakpoints = tuple(bps)
        self.exact_matrices = tuple(mats)
        self.matrices = np.stack([as_spd(m.astype(float)) for m in mats])
        self.dim = self.matrices.shape[-1]
        if any(m.shape != (self.dim, self.dim) for m in mats):
            raise InvalidSpec("matrices must share one dimension")
        self._bp = np.array([float(b) for b in bps])

    @classmethod
    def constant(cls, m):
        return cls([0], [m])

    @property
    def rational(self):
        return all(_is_rational(b) for b in self.breakpoints) and all(
            _is_rational(x) for m in self.exact_matrices for x in m.flat
        )

    def index_at(self, t):
        t = np.asarray(t, dtype=float)
        tol = TIME_RTOL * np.maximum(1.0, np.abs(t))
        return np.searchsorted(self._bp, t + tol, side="right") - 1

    def value(self, t):
        return self.matrices[self.index_at(t)]

    def table(self, grid):
        return self.matrices[self.index_at(grid.times)]

    def at_step(self, history, k, t):
        return np.broadcast_to(self.value(t), (history.shape[0], self.dim, self.dim))

    def __repr__(self):
        return f"PiecewiseConstant(breakpoints={list(self.breakpoints)}, d={self.dim})"


class StateRule(Generator):
    """``a(t, x_t)`` of the current state; ``f(t, x)`` maps ``x[..., d]`` to ``[..., d, d]``.

    ``lipschitz`` is the declared Lipschitz constant of ``a^{1/2}`` in ``x``
    (uniform norm); :func:`check_lipschitz` tests it on sampled pairs.
    """

    def __init__(self, f, dim=1, lipschitz=None, description="state rule"):
        self.f = f
        self.dim = dim
        self.lipschitz = lipschitz
        self.description = description

    def _eval(self, t, x):
        out = np.asarray(self.f(t, x), dtype=float)
        if self.dim == 1 and out.shape == x.shape:
            out = out[..., None]
        return out.reshape(x.shape[:-1] + (self.dim, self.dim))

    def at_step(self, history, k, t):
        return self._eval(t, history[:, k])

    def at_rows(self, values, idx, k, t):
        return self._eval(t, values[idx, k])

    def along(self, values, grid):
        t = np.broadcast_to(grid.times[None, :], values.shape[:2])
        return self._eval(t, values)

    def __repr__(self):
        return f"StateRule({self.description})"


class PathRule(Generator):
    """General adapted rule ``f(history, k, t) -> (n, d, d)`` of the path on ``[0, t_k]``."""

    def __init__(self, f, dim=1, lipschitz=None, description="path rule"):
        self.f = f
        self.dim = dim
        self.lipschitz = lipschitz
        self.description = description

    def at_step(self, history, k, t):
        out = np.asarray(self.f(history, k, t), dtype=float)
        return out.reshape((history.shape[0], self.dim, self.dim))

    def __repr__(self):
        return f"PathRule({self.description})"


class Concatenated(Generator):
    """``first`` on ``[0, t)``, ``second`` on ``[t, inf)``."""

    def __init__(self, first, second, t):
        if first.dim != second.dim:
            raise InvalidSpec("cannot concatenate generators of different dimension")
        self.first, self.second, self.t = first, second, t
        self.dim = first.dim
        self.deterministic = first.deterministic and second.deterministic
        lips = [g.lipschitz for g in (first, second)]
        self.lipschitz = None if None in lips else max(lips)

    def _second_active(self, t):
        return float(t) >= float(self.t) - TIME_RTOL * max(1.0, abs(float(self.t)))

    def at_step(self, history, k, t):
        g = self.second if self._second_active(t) else self.first
        return g.at_step(history, k, t)

    def at_rows(self, values, idx, k, t):
        g = self.second if self._second_active(t) else self.first
        return g.at_rows(values, idx, k, t)

    def table(self, grid):
        k = grid.ceil_index(float(self.t))
        out = np.array(self.first.table(grid))
        out[k:] = self.second.table(grid)[k:]
        return out

    def along(self, values, grid):
        k = grid.ceil_index(float(self.t))
        out = np.array(self.first.along(values, grid))
        out[:, k:] = self.second.along(values, grid)[:, k:]
        return out

    def __repr__(self):
        return f"Concatenated({self.first!r}, {self.second!r}, t={self.t})"


def concatenate(a, b, t):
    """``a 1_[0,t) + b 1_[t,inf)``.

    Two piecewise-constant inputs give a piecewise-constant result with merged
    breakpoints; rational inputs with a rational ``t`` stay rational.
    """
    t = _parse_number(t)
    if float(t) < 0:
        raise InvalidArgument("concatenation time must be nonnegative")
    if isinstance(a, PiecewiseConstant) and isinstance(b, PiecewiseConstant):
        if a.dim != b.dim:
            raise InvalidSpec("cannot concatenate generators of different dimension")
        tf = float(t)
        bps, mats = [], []
        for bp, m in zip(a.breakpoints, a.exact_matrices):
            if float(bp) < tf:
                bps.append(bp)
                mats.append(m)
        if tf > 0 or not bps:
            j = int(b.index_at(tf))
            bps.append(t if bps else 0)
            mats.append(b.exact_matrices[j])
        for bp, m in zip(b.breakpoints, b.exact_matrices):
            if float(bp) > tf:
                bps.append(bp)
                mats.append(m)
        return PiecewiseConstant(bps, mats)
    return Concatenated(a, b, t)


def check_lipschitz(gen, probe, n_pairs=50, seed=0):
    """Largest observed ``|a^{1/2}(x) - a^{1/2}(y)| / ||x - y||_inf`` over sampled path pairs.

    Returns ``(ratio, ok)``; ``ok`` is None when no constant was declared.
    """
    values, grid = probe.values, probe.grid
    rng = np.random.default_rng(seed)
    n = values.shape[0]
    i = rng.integers(0, n, n_pairs)
    j = rng.integers(0, n, n_pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    sx = spd_power(gen.along(values[i], grid), 0.5)
    sy = spd_power(gen.along(values[j], grid), 0.5)
    diff = np.max(np.abs(sx - sy), axis=(-1, -2))
    dist = np.maximum.accumulate(np.max(np.abs(values[i] - values[j]), axis=-1), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dist > 0, diff / dist, 0.0)
    worst = float(np.max(ratio)) if ratio.size else 0.0
    ok = None if gen.lipschitz is None else worst <= gen.lipschitz * (1 + 1e-9)
    return worst, ok


# --- stopping rules --------------------------------------------------------


class StoppingRule:
    """Grid-valued stopping rule; ``fires`` is the condition checked at ``t_k``."""

    deterministic = False

    def fires(self, values, idx, k, t):
        """Condition at ``t_k`` for paths ``idx`` (reads ``values[idx, :k+1]`` at most)."""
        raise NotImplementedError

    def value_set(self, grid):
        """Finite set of admissible realized values on ``grid`` (including ``inf``)."""
        return [float(x) for x in grid.times] + [INF]


@dataclass(frozen=True)
class AtTime(StoppingRule):
    """Deterministic time ``t``."""

    t: float
    deterministic = True

    def fires(self, values, idx, k, t):
        return np.full(len(idx), float(t) >= float(self.t) - TIME_RTOL * max(1.0, float(self.t)))

    def value_set(self, grid):
        k = grid.ceil_index(float(self.t))
        return ([float(grid.times[k])] if k <= grid.N else []) + [INF]


@dataclass(frozen=True)
class FirstHitting(StoppingRule):
    """First grid time at which coordinate ``coord`` is ``>= level`` (mode
    ``"above"``), ``<= level`` (``"below"``) or ``|x| >= level`` (``"abs"``)."""

    level: float
    coord: int = 0
    mode: str = "abs"

    def __post_init__(self):
        if self.mode not in ("above", "below", "abs"):
            raise InvalidSpec(f"unknown hitting mode {self.mode!r}")

    def condition(self, x):
        v = x[..., self.coord]
        if self.mode == "above":
            return v >= self.level
        if self.mode == "below":
            return v <= self.level
        return np.abs(v) >= self.level

    def fires(self, values, idx, k, t):
        return self.condition(values[idx, k])


# --- partition events ------------------------------------------------------


class Event:
    """Predicate of the path on ``[0, tau]``; ``test(values, idx, k)`` with ``k`` the index of ``tau``."""

    def test(self, values, idx, k):
        raise NotImplementedError


@dataclass(frozen=True)
class Always(Event):
    def test(self, values, idx, k):
        return np.ones(len(idx), dtype=bool)


@dataclass(frozen=True)
class SignAt(Event):
    """``x_coord(tau) > 0`` (``positive``) or ``<= 0``."""

    coord: int = 0
    positive: bool = True

    def test(self, values, idx, k):
        v = values[idx, k, self.coord]
        return v > 0 if self.positive else v <= 0


@dataclass(frozen=True)
class ThresholdAt(Event):
    """``x_coord(tau) >= level`` (``above``) or ``< level``."""

    level: float
    coord: int = 0
    above: bool = True

    def test(self, values, idx, k):
        v = values[idx, k, self.coord]
        return v >= self.level if self.above else v < self.level


@dataclass(frozen=True)
class CompareAt(Event):
    """``x_i(tau) >= x_j(tau)`` (``greater``) or ``<``."""

    i: int = 0
    j: int = 1
    greater: bool = True

    def test(self, values, idx, k):
        c = values[idx, k, self.i] >= values[idx, k, self.j]
        return c if self.greater else ~c


class Predicate(Event):
    """User predicate ``f(history, k) -> bool array`` on the path up to ``tau``."""

    def __init__(self, f, description="predicate"):
        self.f = f
        self.description = description

    def test(self, values, idx, k):
        return np.asarray(self.f(_rows(values, idx, k), k), dtype=bool)


# --- separable coefficients ------------------------------------------------


@dataclass
class Level:
    stop: StoppingRule
    branches: list  # [(Event, Generator)]


@dataclass
class SeparableCoefficient:
    """Finite-level separable coefficient; build with :func:`build_separable`."""

    levels: list
    dim: int
    name: str = ""
    _tables: dict = field(default_factory=dict, repr=False)

    @property
    def generators(self):
        return [g for lvl in self.levels for _, g in lvl.branches]

    @property
    def path_independent(self):
        """True when the coefficient is one deterministic function of time."""
        return all(
            lvl.stop.deterministic and len(lvl.branches) == 1 and isinstance(lvl.branches[0][0], Always)
            and lvl.branches[0][1].deterministic
            for lvl in self.levels
        )

    def time_table(self, grid):
        """``(N + 1, d, d)`` values of a path-independent coefficient."""
        key = (id(grid), "a")
        if key not in self._tables:
            idx = np.zeros(grid.N + 1, dtype=int)
            for n, lvl in enumerate(self.levels[1:], start=1):
                k = grid.ceil_index(float(lvl.stop.t))
                idx[k:] = n
            tabs = [lvl.branches[0][1].table(grid) for lvl in self.levels]
            out = np.empty((grid.N + 1, self.dim, self.dim))
            for n, tab in enumerate(tabs):
                out[idx == n] = tab[idx == n]
            self._tables[key] = (grid, out)
        return self._tables[key][1]

    def tracker(self, n, grid):
        return LevelTracker(self, n, grid)

    def along(self, values, grid):
        """Coefficient along each path, shape ``(n, N + 1, d, d)``, plus the level tracker."""
        values = np.asarray(values, dtype=float)
        n = values.shape[0]
        if self.path_independent:
            tr = LevelTracker(self, n, grid)
            for k in range(grid.N + 1):
                tr.update(values, k)
            return np.broadcast_to(self.time_table(grid), (n, grid.N + 1, self.dim, self.dim)), tr
        out = np.empty((n, grid.N + 1, self.dim, self.dim))
        tr = LevelTracker(self, n, grid)
        for k in range(grid.N + 1):
            tr.update(values, k)
            out[:, k] = tr.coefficient(values, k)
        return out, tr

    def __repr__(self):
        return f"SeparableCoefficient({self.name or 'unnamed'}, levels={len(self.levels)}, d={self.dim})"


class LevelTracker:
    """Causal bookkeeping of active level and partition branch per path.

    ``update(values, k)`` must be called for ``k = 0, 1, ...`` in order; only
    ``values[:, :k + 1]`` is read at step ``k``.
    """

    def __init__(self, coef, n, grid):
        self.coef = coef
        self.grid = grid
        self.n = n
        self.level = np.zeros(n, dtype=int)
        self.branch = np.full(n, -1, dtype=int)
        self.tau_index = np.full((n, len(coef.levels)), -1, dtype=int)
        self.level_path = np.zeros((n, grid.N + 1), dtype=int)
        self.branch_path = np.zeros((n, grid.N + 1), dtype=int)
        self._k = -1

    def _resolve(self, values, k, idx, lvl):
        branches = self.coef.levels[lvl].branches
        if len(branches) == 1 and isinstance(branches[0][0], Always):
            self.branch[idx] = 0
            return
        hits = np.stack([np.asarray(ev.test(values, idx, k), dtype=bool) for ev, _ in branches], axis=1)
        count = hits.sum(axis=1)
        if np.any(count != 1):
            bad = idx[count != 1]
            raise PartitionViolation(
                f"level {lvl}: {bad.size} path(s) match {sorted(set(count[count != 1].tolist()))} events",
                bad,
            )
        self.branch[idx] = np.argmax(hits, axis=1)

    def update(self, values, k):
        if k != self._k + 1:
            raise InvalidArgument("tracker must advance one step at a time")
        self._k = k
        t = self.grid.times[k]
        if k == 0:
            self.tau_index[:, 0] = 0
            self._resolve(values, 0, np.arange(self.n), 0)
        else:
            nlev = len(self.coef.levels)
            for lvl in range(nlev - 1):
                cand = np.nonzero(self.level == lvl)[0]
                if cand.size == 0:
                    continue
                nxt = self.coef.levels[lvl + 1].stop
                fire = np.asarray(nxt.fires(values, cand, k, t), dtype=bool)
                idx = cand[fire]
                if idx.size:
                    self.level[idx] = lvl + 1
                    self.tau_index[idx, lvl + 1] = k
                    self._resolve(values, k, idx, lvl + 1)
        self.level_path[:, k] = self.level
        self.branch_path[:, k] = self.branch

    def coefficient(self, values, k):
        """Coefficient at ``t_k`` for every path (after :meth:`update` at ``k``)."""
        t = self.grid.times[k]
        out = np.empty((self.n, self.coef.dim, self.coef.dim))
        combo = self.level * 1_000_003 + self.branch
        first = combo[0]
        groups = [first] if np.all(combo == first) else np.unique(combo)
        for c in groups:
            idx = np.arange(self.n) if len(groups) == 1 else np.nonzero(combo == c)[0]
            lvl, br = divmod(int(c), 1_000_003)
            gen = self.coef.levels[lvl].branches[br][1]
            if gen.deterministic:
                out[idx] = _table(gen, self.grid)[k]
            else:
                out[idx] = gen.at_rows(values, idx, k, t)
        return out

    def tau_times(self):
        """Realized ``tau_n`` per path, ``inf`` where a level was never reached."""
        t = np.where(self.tau_index >= 0, self.grid.times[np.maximum(self.tau_index, 0)], INF)
        return t


_TABLE_CACHE = {}


def _table(gen, grid):
    key = (id(gen), id(grid))
    hit = _TABLE_CACHE.get(key)
    if hit is None or hit[0] is not gen or hit[1] is not grid:
        if len(_TABLE_CACHE) > 256:
            _TABLE_CACHE.clear()
        hit = (gen, grid, np.asarray(gen.table(grid)))
        _TABLE_CACHE[key] = hit
    return hit[2]


def build_separable(levels, grid=None, generating_class=None, name=""):
    """Validate and assemble a :class:`SeparableCoefficient`.

    ``levels`` is a list of ``(stop, branches)`` where ``branches`` is a list
    of ``(event, generator)`` or a single generator (one ``Always`` event).
    The first stop must be the time 0.  Deterministic stopping times must be
    strictly increasing and, when ``grid`` is given, lie on it.  With
    ``generating_class`` given, every generator must belong to it.
    """
    if not levels:
        raise InvalidSpec("need at least one level")
    built = []
    dim = None
    last_det = None
    for n, (stop, branches) in enumerate(levels):
        if not isinstance(stop, StoppingRule):
            stop = AtTime(float(stop))
        if isinstance(branches, Generator):
            branches = [(Always(), branches)]
        if not branches:
            raise InvalidSpec(f"level {n} has no branches")
        if n == 0 and not (stop.deterministic and float(stop.t) == 0.0):
            raise InvalidSpec("the first stopping time must be 0")
        if stop.deterministic:
            if last_det is not None and float(stop.t) <= last_det:
                raise InvalidSpec(f"deterministic stopping times must increase (level {n}: {stop.t} <= {last_det})")
            last_det = float(stop.t)
            if grid is not None:
                try:
                    grid.index_of(float(stop.t))
                except InvalidArgument:
                    if float(stop.t) <= grid.T:
                        raise InvalidSpec(f"stopping time {stop.t} is not a grid point") from None
        for ev, gen in branches:
            if not isinstance(ev, Event) or not isinstance(gen, Generator):
                raise InvalidSpec("branches must be (Event, Generator) pairs")
            if dim is None:
                dim = gen.dim
            elif gen.dim != dim:
                raise InvalidSpec("all generators must share one dimension")
            if generating_class is not None and not any(gen is g for g in generating_class):
                raise InvalidSpec(f"generator {gen!r} is not in the declared generating class")
        built.append(Level(stop, list(branches)))
    return SeparableCoefficient(built, dim, name)


def from_generator(gen, name=""):
    return build_separable([(AtTime(0.0), gen)], name=name)


def constant(m, name=""):
    """Constant coefficient (scalar or matrix)."""
    return from_generator(PiecewiseConstant.constant(m), name or f"const {np.asarray(m).tolist()}")


def piecewise(breakpoints, matrices, name=""):
    return from_generator(PiecewiseConstant(breakpoints, matrices), name)


def evaluate(a, path, t):
    """Coefficient ``a`` at grid time ``t`` along ``path`` (uses only ``path|[0, t]``)."""
    k = path.grid.index_of(t)
    values = path.values[None, : k + 1]
    grid = path.grid.prefix(k) if k < path.grid.N else path.grid
    tr = LevelTracker(a, 1, grid)
    for j in range(k + 1):
        tr.update(values, j)
    return tr.coefficient(values, k)[0]


def _integrals(a, values, grid):
    vals, _ = a.along(values, grid)
    incr = vals[:, :-1] * grid.dt[None, :, None, None]
    out = np.zeros((values.shape[0], grid.N + 1, a.dim, a.dim))
    np.cumsum(incr, axis=1, out=out[:, 1:])
    return out


def disagreement_times(a, b, values, grid, tol=None):
    """First disagreement time of ``int a ds`` and ``int b ds`` along each path.

    Integrals use the left-point rule.  The result is the left end ``t_k`` of
    the first step whose increment separates the integrals by more than
    ``tol`` (entrywise max), i.e. the infimum of disagreement times for the
    piecewise-constant interpretation; ``inf`` when they never separate.
    """
    values = np.asarray(values, dtype=float)
    A = _integrals(a, values, grid)
    B = _integrals(b, values, grid)
    gap = np.max(np.abs(A - B), axis=(-1, -2))
    if tol is None:
        scale = np.maximum(np.max(np.abs(A), axis=(1, 2, 3)), np.max(np.abs(B), axis=(1, 2, 3)))
        tol = 1e-12 * (1.0 + scale)
    tol = np.broadcast_to(np.asarray(tol, dtype=float), (values.shape[0],))
    over = gap[:, 1:] > tol[:, None]
    first = np.argmax(over, axis=1)
    return np.where(over.any(axis=1), grid.times[first], INF)


def disagreement_time(a, b, path, tol=None):
    """Disagreement time on a single :class:`~quasisure.paths.Path`; ``inf`` if none."""
    return float(disagreement_times(a, b, path.values[None], path.grid, tol)[0])


@dataclass
class GeneratingClassReport:
    closure: list
    disagreement: list
    passed: bool

    def to_dict(self):
        return {"closure": self.closure, "disagreement": self.disagreement, "passed": self.passed}


def check_generating_class(gens, probe, times=None, tol=None):
    """Empirical generating-class audit on ``probe`` paths.

    (i) concatenation closure on ``(a, b, t)`` triples; (ii) constant
    disagreement time across probe paths for each pair.  Pairs involving a
    non-deterministic generator are marked ``empirical``.
    """
    if not gens:
        raise InvalidArgument("empty generator list")
    grid, values = probe.grid, probe.values
    if times is None:
        times = [float(grid.times[grid.N // 4]), float(grid.times[grid.N // 2])]
    closure = []
    for (ia, a), (ib, b), t in product(enumerate(gens), enumerate(gens), times):
        c = concatenate(a, b, t)
        k = grid.ceil_index(float(t))
        va, vb, vc = a.along(values, grid), b.along(values, grid), c.along(values, grid)
        ok = bool(np.array_equal(vc[:, :k], va[:, :k]) and np.array_equal(vc[:, k:], vb[:, k:]))
        kind_ok = (not (a.deterministic and b.deterministic)) or c.deterministic
        rational_ok = True
        if isinstance(a, PiecewiseConstant) and isinstance(b, PiecewiseConstant) and a.rational and b.rational:
            rational_ok = _is_rational(_parse_number(t)) <= c.rational
        closure.append(
            {"a": ia, "b": ib, "t": float(t), "consistent": ok and kind_ok and rational_ok,
             "rational_preserved": rational_ok}
        )
    disagreement = []
    for (ia, a), (ib, b) in product(enumerate(gens), repeat=2):
        if ib <= ia:
            continue
        th = disagreement_times(from_generator(a), from_generator(b), values, grid, tol)
        fin = np.isfinite(th)
        const = bool(np.all(fin) or not np.any(fin)) and (
            float(np.max(th[fin]) - np.min(th[fin])) == 0.0 if np.all(fin) else True
        )
        mode = "exact" if (a.deterministic and b.deterministic) else "empirical"
        disagreement.append(
            {"a": ia, "b": ib, "theta_min": float(np.min(th)), "theta_max": float(np.max(th)),
             "constant": const, "mode": mode}
        )
    passed = all(c["consistent"] for c in closure) and all(d["constant"] for d in disagreement)
    return GeneratingClassReport(closure, disagreement, passed)


# --- configuration ---------------------------------------------------------


STATE_RULES = {
    # a(t, x) = base + amp * sin(x_coord)^2, Lipschitz constant of sqrt(a) <= amp / (2 sqrt(base))
    "sin2": lambda p: StateRule(
        lambda t, x, b=p.get("base", 1.0), A=p.get("amp", 0.5), c=p.get("coord", 0): b + A * np.sin(x[..., c:c + 1]) ** 2,
        dim=1,
        lipschitz=p.get("amp", 0.5) / (2 * math.sqrt(p.get("base", 1.0))),
        description=f"{p.get('base', 1.0)} + {p.get('amp', 0.5)} sin^2(x)",
    ),
}


def generator_from_config(spec, dim=None):
    """Build a generator from a JSON-style dict.

    Kinds: ``{"constant": m}``, ``{"kind": "piecewise", "breakpoints": [...],
    "matrices": [...]}`` and ``{"kind": "rule", "name": "sin2", ...}``.
    """
    if not isinstance(spec, dict):
        return PiecewiseConstant.constant(spec)
    if "constant" in spec:
        return PiecewiseConstant.constant(_matrix(spec["constant"]))
    kind = spec.get("kind")
    if kind == "piecewise":
        return PiecewiseConstant(spec["breakpoints"], [_matrix(m) for m in spec["matrices"]])
    if kind == "rule":
        name = spec.get("name")
        if name not in STATE_RULES:
            raise InvalidSpec(f"unknown rule {name!r}; known: {sorted(STATE_RULES)}")
        return STATE_RULES[name](spec)
    raise InvalidSpec(f"unknown generator spec {spec!r}")


def _matrix(m):
    if isinstance(m, (int, float, str)):
        return [[m]]
    return m


def stop_from_config(spec):
    if isinstance(spec, (int, float)):
        return AtTime(float(spec))
    kind = spec.get("kind")
    if kind == "time":
        return AtTime(float(_parse_number(spec["t"])))
    if kind == "hit":
        return FirstHitting(float(spec["level"]), int(spec.get("coord", 0)), spec.get("mode", "abs"))
    raise InvalidSpec(f"unknown stopping rule {spec!r}")


def event_from_config(spec):
    if spec is None:
        return Always()
    kind = spec.get("kind")
    if kind == "always":
        return Always()
    if kind == "sign":
        return SignAt(int(spec.get("coord", 0)), bool(spec.get("positive", True)))
    if kind == "threshold":
        return ThresholdAt(float(spec["level"]), int(spec.get("coord", 0)), bool(spec.get("above", True)))
    if kind == "compare":
        return CompareAt(int(spec.get("i", 0)), int(spec.get("j", 1)), bool(spec.get("greater", True)))
    raise InvalidSpec(f"unknown event {spec!r}")


def coefficient_from_config(spec, grid=None):
    """Separable coefficient from JSON: either a generator spec or ``{"levels": [...]}``.

    Each level: ``{"stop": ..., "branches": [{"when": event, "generator": gen}, ...]}``
    or ``{"stop": ..., "generator": gen}``.
    """
    if isinstance(spec, dict) and "levels" in spec:
        levels = []
        for lv in spec["levels"]:
            stop = stop_from_config(lv.get("stop", 0.0))
            if "generator" in lv:
                branches = [(Always(), generator_from_config(lv["generator"]))]
            else:
                branches = [(event_from_config(b.get("when")), generator_from_config(b["generator"]))
                            for b in lv["branches"]]
            levels.append((stop, branches))
        return build_separable(levels, grid=grid, name=spec.get("name", ""))
    gen = generator_from_config(spec)
    return build_separable([(AtTime(0.0), gen)], grid=grid, name=spec.get("name", "") if isinstance(spec, dict) else str(spec))


def as_coefficient(x):
    """Accept a SeparableCoefficient, a Generator, a number/matrix, or a config dict."""
    if isinstance(x, SeparableCoefficient):
        return x
    if isinstance(x, Generator):
        return from_generator(x)
    if isinstance(x, dict):
        return coefficient_from_config(x)
    return constant(x)
