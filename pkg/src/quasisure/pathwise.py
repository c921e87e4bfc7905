"""Measure-free stochastic calculus on grid paths.

Every routine here acts on a single :class:`~quasisure.paths.Path`, a
:class:`~quasisure.paths.PathEnsemble`, or a raw array of shape
``(n, N + 1, d)``; the result comes back in the same container.  Integrals
use left-point (non-anticipating) evaluation only, so the pathwise integral
agrees with the Ito integral under every martingale measure at once.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, UnsupportedDimension
from .paths import Grid, Path, PathEnsemble


def _unpack(X, grid=None):
    """Return ``(values[n, N+1, d], grid, rewrap)`` for any path container."""
    if isinstance(X, PathEnsemble):
        return X.values, X.grid, lambda v, prov=None: PathEnsemble(
            X.grid, v, X.weights, dict(X.provenance, **(prov or {}))
        )
    if isinstance(X, Path):
        return X.values[None], X.grid, lambda v, prov=None: Path(X.grid, v[0])
    v = np.asarray(X, dtype=float)
    if grid is None:
        raise InvalidArgument("a grid is required for raw arrays")
    if v.ndim == 2:
        return v[None], grid, lambda w, prov=None: w[0]
    return v, grid, lambda w, prov=None: w


# --- integrands ------------------------------------------------------------


class Integrand:
    """An adapted rule producing left-point integrand values.

    Use one of the constructors:

    * :meth:`constant` -- a fixed scalar, row vector or matrix;
    * :meth:`markov` -- ``f(t, x)`` of the current time and state, vectorized;
    * :meth:`adapted` -- ``f(history, k, t)`` called once per step with the
      path history up to ``t_k`` only (adapted by construction);
    * :meth:`from_paths` -- ``f(values, times)`` returning all left-point
      values at once.  Nothing stops such a rule from peeking ahead; use
      :func:`is_adapted` to test it.

    Row-valued integrands (shape ``d``) give scalar integrals, matrix-valued
    ones (shape ``d x d``) give ``d``-dimensional integrals.
    """

    def __init__(self, kind, fn, description=""):
        self.kind = kind
        self.fn = fn
        self.description = description

    @classmethod
    def constant(cls, c):
        c = np.asarray(c, dtype=float)
        return cls("constant", c, f"constant {c.tolist()}")

    @classmethod
    def markov(cls, f, description="markov"):
        return cls("markov", f, description)

    @classmethod
    def adapted(cls, f, description="adapted"):
        return cls("adapted", f, description)

    @classmethod
    def from_paths(cls, f, description="path functional"):
        return cls("full", f, description)

    def evaluate(self, values, times):
        """Integrand at ``t_0, ..., t_{N-1}``: shape ``(n, N, d)`` or ``(n, N, d, d)``."""
        n, npts, d = values.shape
        N = npts - 1
        if self.kind == "constant":
            c = self.fn
            if c.ndim == 0:
                c = np.full(d, float(c))
            if c.shape not in ((d,), (d, d)):
                raise InvalidArgument(f"integrand shape {c.shape} incompatible with path dimension {d}")
            return np.broadcast_to(c, (n, N) + c.shape)
        if self.kind == "markov":
            out = np.asarray(self.fn(times[None, :-1], values[:, :-1]), dtype=float)
        elif self.kind == "full":
            out = np.asarray(self.fn(values, times), dtype=float)
        else:
            first = np.asarray(self.fn(values[:, :1], 0, times[0]), dtype=float)
            out = np.empty((n, N) + first.shape[1:])
            out[:, 0] = first
            for k in range(1, N):
                out[:, k] = self.fn(values[:, : k + 1], k, times[k])
        if out.ndim == 2 and d == 1:
            out = out[..., None]
        if out.shape[:2] != (n, N) or out.shape[2:] not in ((d,), (d, d)):
            raise InvalidArgument(
                f"integrand shape {out.shape[2:]} incompatible with path dimension {d}"
            )
        return np.broadcast_to(out, (n, N) + out.shape[2:])


def is_adapted(fn, values, k, seed=0, scale=1.0):
    """Perturb-and-compare test of adaptedness at step ``k``.

    ``fn`` maps an array of paths ``(n, N + 1, d)`` to an array indexed by time
    on axis 1.  The entries at times ``<= t_k`` must not change when the paths
    are modified strictly after ``t_k``.
    """
    values = np.asarray(values, dtype=float)
    before = np.asarray(fn(values))
    bumped = values.copy()
    rng = np.random.default_rng(seed)
    bumped[:, k + 1 :] += scale * rng.standard_normal(bumped[:, k + 1 :].shape)
    after = np.asarray(fn(bumped))
    return bool(np.array_equal(before[:, : k + 1], after[:, : k + 1]))


# --- integrals -------------------------------------------------------------


def _integrate(h, dx):
    if h.ndim == 3:
        incr = np.einsum("nkd,nkd->nk", h, dx)[..., None]
    else:
        incr = np.einsum("nkij,nkj->nki", h, dx)
    out = np.zeros((dx.shape[0], dx.shape[1] + 1, incr.shape[2]))
    np.cumsum(incr, axis=1, out=out[:, 1:])
    return out


def ito_integral(H, X, grid=None):
    """Left-point integral ``I_{k+1} = I_k + H(X|[0,t_k], t_k) . (X_{k+1} - X_k)``, ``I_0 = 0``."""
    values, grid, wrap = _unpack(X, grid)
    if not isinstance(H, Integrand):
        H = Integrand.constant(H)
    h = H.evaluate(values, grid.times)
    return wrap(_integrate(h, np.diff(values, axis=1)))


@dataclass(frozen=True, eq=False)
class MatrixPath:
    """Symmetric matrices along a grid; ``values`` has shape ``(..., N + 1, d, d)``.

    ``burn_in`` flags grid points whose value is not a genuine trailing
    estimate (see :func:`qv_density`).
    """

    grid: Grid
    values: np.ndarray
    burn_in: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim < 3 or v.shape[-3] != self.grid.N + 1 or v.shape[-1] != v.shape[-2]:
            raise InvalidArgument(f"matrix path shape {v.shape} does not fit the grid")
        b = np.zeros(self.grid.N + 1, dtype=bool) if self.burn_in is None else np.asarray(self.burn_in, bool)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "burn_in", b)

    @property
    def dim(self):
        return self.values.shape[-1]

    def scalar(self):
        """Values of a ``1 x 1`` matrix path as a plain array."""
        if self.dim != 1:
            raise UnsupportedDimension("scalar view requires d = 1")
        return self.values[..., 0, 0]


def _squeeze_like(X, v):
    return v[0] if isinstance(X, Path) or (not isinstance(X, PathEnsemble) and np.ndim(X) == 2) else v


def quadratic_variation(X, grid=None):
    """Running sum of increment outer products ``sum dX dX^T``."""
    values, grid, _ = _unpack(X, grid)
    dx = np.diff(values, axis=1)
    q = np.zeros(values.shape[:2] + (values.shape[2], values.shape[2]))
    np.cumsum(dx[..., :, None] * dx[..., None, :], axis=1, out=q[:, 1:])
    return MatrixPath(grid, _squeeze_like(X, q))


def quadratic_variation_identity(X, grid=None):
    """``X X^T - X_0 X_0^T - (J + J^T)`` with ``J = int X dX^T`` (left point).

    On a grid this equals :func:`quadratic_variation` up to rounding.
    """
    values, grid, _ = _unpack(X, grid)
    d = values.shape[2]
    dx = np.diff(values, axis=1)
    J = np.zeros(values.shape[:2] + (d, d))
    np.cumsum(values[:, :-1, :, None] * dx[:, :, None, :], axis=1, out=J[:, 1:])
    outer = values[..., :, None] * values[..., None, :]
    q = outer - outer[:, :1] - (J + np.swapaxes(J, -1, -2))
    return MatrixPath(grid, _squeeze_like(X, q))


def terminal_qv(values):
    """Total realized covariation ``sum dX dX^T`` per path, shape ``(n, d, d)``."""
    dx = np.diff(np.asarray(values, dtype=float), axis=1)
    return np.einsum("nki,nkj->nij", dx, dx)


def default_window(N):
    return int(math.ceil(math.sqrt(N)))


def qv_density(X, window=None, grid=None):
    """Finite-window quotient estimate of the quadratic-variation density.

    For ``k >= w``: ``(Q_k - Q_{k-w}) / (t_k - t_{k-w})`` (trailing window).
    For ``k < w`` the window looks forward, ``(Q_{k+w} - Q_k) / (t_{k+w} - t_k)``,
    and those points are flagged in ``burn_in``.
    """
    values, grid, _ = _unpack(X, grid)
    N = grid.N
    w = default_window(N) if window is None else int(window)
    if w < 1 or w > N:
        raise InvalidArgument(f"window {w} outside [1, {N}]")
    q = quadratic_variation(values, grid).values
    t = grid.times
    out = np.empty_like(q)
    out[:, w:] = (q[:, w:] - q[:, :-w]) / (t[w:] - t[:-w])[:, None, None]
    m = min(w, N + 1 - w)
    out[:, :m] = (q[:, w : w + m] - q[:, :m]) / (t[w : w + m] - t[:m])[:, None, None]
    if m < w:
        out[:, m:w] = out[:, w : w + 1]
    burn = np.zeros(N + 1, dtype=bool)
    burn[:w] = True
    return MatrixPath(grid, _squeeze_like(X, out), burn)


def local_time(X, level, grid=None):
    """Tanaka local time ``2 L = |X_t - x| - |X_0 - x| - int sgn(X - x) dX`` with ``sgn(0) = 0``."""
    values, grid, wrap = _unpack(X, grid)
    if values.shape[2] != 1:
        raise UnsupportedDimension("local time is defined for scalar paths only")
    dev = values - level
    sgn_int = _integrate(np.sign(dev[:, :-1]), np.diff(values, axis=1))
    L = 0.5 * (np.abs(dev) - np.abs(dev[:, :1]) - sgn_int)
    return wrap(L)


def ito_residual(f, df, d2f, A, H, B, a_hat, grid=None):
    """Largest grid deviation from Ito's formula for ``X = A + int H dB``.

    Returns ``max_k |f(X_k) - f(A_0) - sum f'(X)(dA + H dB) - 1/2 sum H^T a_hat H f''(X) dt|``
    per path (a float for a single path).  ``A`` is a scalar finite-variation
    path, ``a_hat`` a :class:`MatrixPath` (or array broadcastable to
    ``(n, N + 1, d, d)``).
    """
    bvals, grid, _ = _unpack(B, grid)
    avals, _, _ = _unpack(A, grid)
    if avals.shape[2] != 1:
        raise InvalidArgument("the finite-variation part must be scalar")
    if not isinstance(H, Integrand):
        H = Integrand.constant(H)
    n, npts, d = bvals.shape
    h = H.evaluate(bvals, grid.times)
    if h.ndim != 3:
        raise InvalidArgument("Ito residual needs a row-valued integrand")
    dB = np.diff(bvals, axis=1)
    avals = np.broadcast_to(avals, (n, npts, 1))
    X = avals[..., 0] + _integrate(h, dB)[..., 0]
    ah = a_hat.values if isinstance(a_hat, MatrixPath) else np.asarray(a_hat, dtype=float)
    ah = np.broadcast_to(ah, (n, npts, d, d))
    xl = X[:, :-1]
    dA = np.diff(avals[..., 0], axis=1)
    stoch = np.einsum("nkd,nkd->nk", h, dB)
    quad = np.einsum("nki,nkij,nkj->nk", h, ah[:, :-1], h)
    incr = df(xl) * (dA + stoch) + 0.5 * quad * d2f(xl) * grid.dt[None, :]
    pred = np.zeros_like(X)
    np.cumsum(incr, axis=1, out=pred[:, 1:])
    res = np.max(np.abs(f(X) - f(avals[:, :1, 0]) - pred), axis=1)
    return float(res[0]) if isinstance(B, Path) else res


@dataclass
class GirsanovResult:
    """Reweighted ensemble of ``W~ = W - int phi dt`` plus raw densities."""

    ensemble: PathEnsemble
    Z: np.ndarray
    excluded: np.ndarray

    @property
    def n_excluded(self):
        return int(self.excluded.sum())


def girsanov_weights(phi, W):
    """Density ``Z_T = exp(int phi dW - 1/2 int |phi|^2 dt)`` per path.

    Paths with a non-finite density are dropped (never clipped) and counted.
    """
    if not isinstance(W, PathEnsemble):
        raise InvalidArgument("girsanov_weights expects a PathEnsemble")
    if not isinstance(phi, Integrand):
        phi = Integrand.constant(phi)
    values, grid = W.values, W.grid
    p = phi.evaluate(values, grid.times)
    if p.ndim != 3:
        raise InvalidArgument("phi must be vector valued")
    dW = np.diff(values, axis=1)
    dt = grid.dt[None, :]
    with np.errstate(over="ignore", invalid="ignore"):
        logz = np.einsum("nkd,nkd->n", p, dW) - 0.5 * np.sum(np.einsum("nkd,nkd->nk", p, p) * dt, axis=1)
        Z = np.exp(logz)
    bad = ~np.isfinite(Z)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} path(s) with non-finite Girsanov density excluded", RuntimeWarning)
    drift = np.zeros_like(values)
    np.cumsum(p * dt[..., None], axis=1, out=drift[:, 1:])
    tilde = values - drift
    keep = ~bad
    ids = np.asarray(W.provenance.get("path_ids", np.arange(W.n)))
    prov = dict(W.provenance, path_ids=ids[keep].tolist(), girsanov=phi.description)
    ens = PathEnsemble(grid, tilde[keep], Z[keep], prov)
    return GirsanovResult(ens, np.where(keep, Z, np.nan), bad)


def ito_refinement_study(N_coarse=1000, factor=4, n=1000, T=1.0, seed=0, a=1.0):
    """RMS over paths of the ``f(x) = x^2`` residual for ``X = sqrt(a) B`` at two grid sizes.

    Both grids are driven by the same fine Brownian paths (the coarse path is
    the fine path sampled every ``factor`` steps).  The density passed to the
    residual is the true constant ``a``.  Returns the two RMS values and
    their ratio coarse / fine.
    """
    from .paths import make_grid, sample_brownian

    fine = make_grid(T, N_coarse * factor)
    coarse = make_grid(T, N_coarse)
    B = sample_brownian(fine, 1, n, seed).values * math.sqrt(a)
    sq = (lambda x: x**2, lambda x: 2 * x, lambda x: 2 + 0 * x)
    out = {}
    for name, grid, vals in (("coarse", coarse, B[:, ::factor]), ("fine", fine, B)):
        r = ito_residual(*sq, np.zeros((grid.N + 1, 1)), Integrand.constant(1.0), vals, a, grid=grid)
        out[name] = float(np.sqrt(np.mean(r**2)))
    out["ratio"] = out["coarse"] / out["fine"]
    return out
