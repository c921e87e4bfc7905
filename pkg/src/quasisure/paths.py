"""Time grids, discretized paths and seeded path ensembles.

Paths live on a shared :class:`Grid`; every calculus routine in the package
works on grid increments only.  Ensembles are the empirical stand-in for a
probability measure: a stack of paths plus nonnegative weights.

Random numbers come from counter-based Philox streams keyed by
``(seed, path index)``, so path ``i`` of an ensemble is the same no matter how
many paths are drawn or how the work is split across threads.
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

#: relative tolerance used when matching a time to a grid point
TIME_RTOL = 1e-12

_MAGIC = b"QSPE"
_HEADER = struct.Struct("<4sIIIIq")
_FORMAT_VERSION = 1


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """Ordered time points ``0 = t_0 < t_1 < ... < t_N = T``."""

    times: np.ndarray

    def __post_init__(self):
        t = _frozen(self.times)
        if t.ndim != 1 or t.size < 1:
            raise InvalidArgument("grid needs at least one time point")
        if t[0] != 0.0:
            raise InvalidArgument("grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise InvalidArgument("grid times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        """Step sizes, shape ``(N,)``."""
        return np.diff(self.times)

    @property
    def uniform(self) -> bool:
        h = self.dt
        if h.size == 0:
            return True
        return bool(np.all(np.abs(h - h[0]) <= TIME_RTOL * max(1.0, self.T)))

    def index_of(self, t: float) -> int:
        """Index of grid time ``t``; off-grid times raise :class:`InvalidArgument`."""
        tol = TIME_RTOL * max(1.0, self.T)
        k = int(np.searchsorted(self.times, t - tol))
        if k <= self.N and abs(self.times[k] - t) <= tol:
            return k
        raise InvalidArgument(f"time {t!r} is not a grid point")

    def ceil_index(self, t: float) -> int:
        """Index of the first grid time ``>= t`` (``N + 1`` when ``t > T``)."""
        tol = TIME_RTOL * max(1.0, self.T)
        return int(np.searchsorted(self.times, t - tol))

    def prefix(self, k: int) -> "Grid":
        return Grid(self.times[: k + 1])

    def same_as(self, other: "Grid") -> bool:
        return self is other or (
            self.N == other.N
            and np.allclose(self.times, other.times, rtol=0, atol=TIME_RTOL * max(1.0, self.T))
        )

    def __repr__(self):
        return f"Grid(N={self.N}, T={self.T:g}, uniform={self.uniform})"


@dataclass(frozen=True, eq=False)
class Path:
    """A single discretized path, ``values`` of shape ``(N + 1, d)``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim == 1:
            v = _frozen(v[:, None])
        if v.ndim != 2 or v.shape[0] != self.grid.N + 1 or v.shape[1] < 1:
            raise InvalidArgument(
                f"path values must have shape (N+1, d) = ({self.grid.N + 1}, d), got {v.shape}"
            )
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def canonical(self) -> bool:
        """True when the path starts at the origin."""
        return bool(np.all(self.values[0] == 0.0))

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Paths on one shared grid with normalized weights.

    ``values`` has shape ``(n, N + 1, d)``.  ``provenance`` records how the
    ensemble was produced (seed, path ids, sampler description).
    """

    grid: Grid
    values: np.ndarray
    weights: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim == 2:
            v = _frozen(v[:, :, None])
        if v.ndim != 3 or v.shape[1] != self.grid.N + 1 or v.shape[0] < 1:
            raise InvalidArgument(f"ensemble values must have shape (n, N+1, d), got {v.shape}")
        n = v.shape[0]
        if self.weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise InvalidArgument("weights must be n finite nonnegative numbers")
            s = w.sum()
            if s <= 0:
                raise InvalidArgument("weights sum to zero")
            if abs(s - 1.0) > 1e-12:
                w = w / s
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "provenance", dict(self.provenance))

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i) -> Path:
        return Path(self.grid, self.values[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def paths(self) -> list:
        return list(self)

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def terminal(self) -> np.ndarray:
        return self.values[:, -1, :]

    def with_weights(self, weights, **provenance) -> "PathEnsemble":
        prov = dict(self.provenance)
        prov.update(provenance)
        return PathEnsemble(self.grid, self.values, weights, prov)

    def subset(self, idx) -> "PathEnsemble":
        idx = np.asarray(idx)
        prov = dict(self.provenance)
        ids = np.asarray(prov.get("path_ids", np.arange(self.n)))
        prov["path_ids"] = ids[idx].tolist()
        return PathEnsemble(self.grid, self.values[idx], self.weights[idx], prov)


def make_grid(T: float, N: int) -> Grid:
    """Uniform grid on ``[0, T]`` with ``N`` steps of size ``T / N``."""
    if not (T > 0) or not np.isfinite(T):
        raise InvalidArgument(f"horizon must be positive, got {T!r}")
    if int(N) != N or N < 1:
        raise InvalidArgument(f"step count must be a positive integer, got {N!r}")
    N = int(N)
    times = T * (np.arange(N + 1) / N)
    return Grid(times)


def path_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for path ``index`` under ``seed``.

    Distinct ``stream`` values give non-overlapping substreams of the same
    (seed, index) key.
    """
    if seed < 0 or index < 0 or stream < 0:
        raise InvalidArgument("seed, index and stream must be nonnegative")
    bg = np.random.Philox(key=[int(seed), int(index)], counter=[0, 0, 0, int(stream)])
    return np.random.Generator(bg)


def _brownian_block(grid, d, seed, ids, out):
    sq = np.sqrt(grid.dt)[:, None]
    for j, i in enumerate(ids):
        z = path_rng(seed, int(i)).standard_normal((grid.N, d))
        np.cumsum(z * sq, axis=0, out=out[j, 1:, :])


def brownian_values(grid: Grid, d: int, ids, seed: int, threads: int = 1) -> np.ndarray:
    """Brownian path values for the given path ids, shape ``(len(ids), N + 1, d)``."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((ids.size, grid.N + 1, d))
    if threads <= 1 or ids.size < 2 * threads:
        _brownian_block(grid, d, seed, ids, out)
        return out
    bounds = np.linspace(0, ids.size, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            pool.submit(_brownian_block, grid, d, seed, ids[lo:hi], out[lo:hi])
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ]
        for f in futures:
            f.result()
    return out


def sample_brownian(grid: Grid, d: int, n: int, seed: int, threads: int = 1, start: int = 0) -> PathEnsemble:
    """Draw ``n`` independent ``d``-dimensional Brownian paths on ``grid``.

    Path ``i`` (global id ``start + i``) depends only on ``(seed, start + i)``.
    """
    if int(d) != d or d < 1:
        raise InvalidArgument(f"dimension must be a positive integer, got {d!r}")
    if int(n) != n or n < 1:
        raise InvalidArgument(f"path count must be a positive integer, got {n!r}")
    ids = np.arange(start, start + int(n))
    values = brownian_values(grid, int(d), ids, seed, threads)
    prov = {"sampler": "brownian", "seed": int(seed), "path_ids": ids.tolist()}
    return PathEnsemble(grid, values, None, prov)


def restrict(path, t: float):
    """Truncate a path (or ensemble) to the sub-grid ``[0, t]``; ``t`` must be on the grid.

    Restricting to ``t = 0`` yields a single-point path on the degenerate grid ``[0]``.
    """
    k = path.grid.index_of(t)
    sub = path.grid.prefix(k)
    if isinstance(path, PathEnsemble):
        return PathEnsemble(sub, path.values[:, : k + 1], path.weights, path.provenance)
    return Path(sub, path.values[: k + 1])


# --- serialization -------------------------------------------------------


def write_csv(ensemble: PathEnsemble, fname) -> None:
    """One row per (path, time): ``path_id, t, x_1, ..., x_d``."""
    ids = ensemble.provenance.get("path_ids", list(range(ensemble.n)))
    d = ensemble.dim
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "t"] + [f"x_{j + 1}" for j in range(d)])
        for pid, vals in zip(ids, ensemble.values):
            for t, x in zip(ensemble.grid.times, vals):
                w.writerow([pid, repr(float(t))] + [repr(float(v)) for v in x])


def read_csv(fname) -> PathEnsemble:
    with open(fname, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = len(header) - 2
        rows = [(int(row[0]), float(row[1]), [float(v) for v in row[2:]]) for row in r]
    ids = []
    for pid, _, _ in rows:
        if not ids or ids[-1] != pid:
            ids.append(pid)
    n = len(ids)
    npts = len(rows) // n
    times = np.array([row[1] for row in rows[:npts]])
    values = np.array([row[2] for row in rows], dtype=float).reshape(n, npts, d)
    return PathEnsemble(Grid(times), values, None, {"path_ids": ids})


def write_binary(ensemble: PathEnsemble, fname) -> None:
    """Little-endian float64 dump with a fixed header (d, N, n, seed)."""
    seed = ensemble.provenance.get("seed", -1)
    with open(fname, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _FORMAT_VERSION, ensemble.dim, ensemble.grid.N, ensemble.n, int(seed)))
        fh.write(np.asarray(ensemble.grid.times, dtype="<f8").tobytes())
        fh.write(np.asarray(ensemble.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ensemble.values, dtype="<f8").tobytes())


def read_binary(fname) -> PathEnsemble:
    with open(fname, "rb") as fh:
        magic, version, d, N, n, seed = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC or version != _FORMAT_VERSION:
            raise InvalidArgument(f"{fname}: not a path-ensemble file")
        times = np.frombuffer(fh.read(8 * (N + 1)), dtype="<f8")
        weights = np.frombuffer(fh.read(8 * n), dtype="<f8")
        values = np.frombuffer(fh.read(8 * n * (N + 1) * d), dtype="<f8").reshape(n, N + 1, d)
    prov = {} if seed < 0 else {"seed": seed}
    return PathEnsemble(Grid(times), values, weights, prov)
