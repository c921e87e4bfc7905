"""Uncertain-volatility superhedging.

The traded asset is ``S = S0 exp(X - 1/2 int a ds)`` where ``X`` is the
canonical process and ``a`` the squared volatility; rates are zero.  Tools:

* a trinomial lattice with per-node choice of volatility (dynamic programming),
  hedge extraction and the discrete Doob-Meyer split;
* an explicit finite-difference solver for the Black-Scholes-Barenblatt PDE;
* Monte-Carlo lower bounds over a finite coefficient list;
* path simulation of a hedge to audit quasi-sure dominance.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .coefficients import as_coefficient
from .errors import InternalError, InvalidArgument, InvalidSpec
from .measures import MeasureSampler
from .paths import make_grid, path_rng

TIE_TOL = 1e-12


# --- payoffs ---------------------------------------------------------------


@dataclass(frozen=True)
class Payoff:
    """Nonnegative claim on the terminal spot (``markovian``) or on the spot path."""

    kind: str
    params: tuple = ()
    markovian: bool = True

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        p = self.params
        if self.kind == "call":
            out = np.maximum(s - p[0], 0.0)
        elif self.kind == "put":
            out = np.maximum(p[0] - s, 0.0)
        elif self.kind == "butterfly":
            k1, k2, k3 = p
            out = np.maximum(s - k1, 0.0) - (k3 - k1) / (k3 - k2) * np.maximum(s - k2, 0.0) \
                + (k2 - k1) / (k3 - k2) * np.maximum(s - k3, 0.0)
            out = np.maximum(out, 0.0)  # clears -0.0 and rounding below zero
        elif self.kind == "constant":
            out = np.full(s.shape, float(p[0]))
        else:
            raise InvalidSpec(f"unknown payoff kind {self.kind!r}")
        return out

    @classmethod
    def call(cls, K):
        return cls("call", (float(K),))

    @classmethod
    def put(cls, K):
        return cls("put", (float(K),))

    @classmethod
    def butterfly(cls, k1, k2, k3):
        if not k1 < k2 < k3:
            raise InvalidSpec("butterfly strikes must increase")
        return cls("butterfly", (float(k1), float(k2), float(k3)))

    @classmethod
    def constant(cls, c):
        if c < 0:
            raise InvalidSpec("claims must be nonnegative")
        return cls("constant", (float(c),))

    @classmethod
    def linear(cls, K):
        """``S_T - K`` is unbounded below and therefore rejected."""
        raise InvalidSpec("linear payoff S - K is not nonnegative; use a deep in-the-money call")

    @classmethod
    def from_config(cls, spec):
        kind = spec.get("kind")
        if kind == "call":
            return cls.call(spec["K"])
        if kind == "put":
            return cls.put(spec["K"])
        if kind == "butterfly":
            return cls.butterfly(*spec["strikes"])
        if kind in ("constant", "zero"):
            return cls.constant(spec.get("value", 0.0))
        if kind == "linear":
            return cls.linear(spec.get("K", 0.0))
        raise InvalidSpec(f"unknown payoff {spec!r}")

    def to_dict(self):
        return {"kind": self.kind, "params": list(self.params)}


# --- closed forms ----------------------------------------------------------


def black_scholes(S, K, T, sigma, kind="call"):
    """Zero-rate Black-Scholes price of a call or put."""
    S, K, T, sigma = (np.asarray(x, dtype=float) for x in (S, K, T, sigma))
    vol = sigma * np.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.where(vol > 0, (np.log(S / K) + 0.5 * vol**2) / np.where(vol > 0, vol, 1.0), np.inf * np.sign(S - K))
    d2 = d1 - vol
    call = S * ndtr(d1) - K * ndtr(d2)
    call = np.where(vol > 0, call, np.maximum(S - K, 0.0))
    out = call if kind == "call" else call - S + K
    return float(out) if np.ndim(out) == 0 else out


def black_scholes_delta(S, K, tau, sigma):
    """Call delta ``Phi(d1)`` at time-to-expiry ``tau``."""
    vol = sigma * np.sqrt(tau)
    return ndtr((np.log(S / K) + 0.5 * vol**2) / vol)


def butterfly_bs(S, strikes, T, sigma):
    k1, k2, k3 = strikes
    w2 = (k3 - k1) / (k3 - k2)
    w3 = (k2 - k1) / (k3 - k2)
    return black_scholes(S, k1, T, sigma) - w2 * black_scholes(S, k2, T, sigma) + w3 * black_scholes(S, k3, T, sigma)


# --- lattice ---------------------------------------------------------------


@dataclass
class Lattice:
    """Recombining log-spot trinomial lattice shared by every volatility in ``sigmas``.

    Node ``j`` of layer ``m`` (``-m <= j <= m``) has spot ``S0 u^j`` with
    ``u = exp(sigma_max sqrt(3 dt))``.  For each volatility the up/down
    probabilities match a zero mean and variance ``sigma^2 dt`` of the
    relative spot increment exactly.
    """

    S0: float
    T: float
    M: int
    sigmas: tuple

    def __post_init__(self):
        if self.M < 1 or self.T <= 0 or self.S0 <= 0:
            raise InvalidArgument("lattice needs M >= 1, T > 0, S0 > 0")
        sig = np.asarray(self.sigmas, dtype=float)
        if sig.ndim != 1 or sig.size == 0 or np.any(sig < 0):
            raise InvalidSpec("volatilities must be a nonempty list of nonnegative numbers")
        self.sigmas = tuple(float(s) for s in sig)
        self.dt = self.T / self.M
        smax = max(sig.max(), 1e-8)
        self.dx = smax * math.sqrt(3 * self.dt)
        self.u = math.exp(self.dx)
        alpha, beta = self.u - 1.0, 1.0 - 1.0 / self.u
        v = sig**2 * self.dt
        pu = v / (alpha * (alpha + beta))
        pd = v / (beta * (alpha + beta))
        self.probs = np.stack([pd, 1.0 - pu - pd, pu], axis=1)  # [sigma, (down, mid, up)]
        self.rel = np.array([-beta, 0.0, alpha])

    def spots(self, m):
        return self.S0 * np.exp(self.dx * np.arange(-m, m + 1))

    def check_moments(self, tol=1e-12):
        """Per-volatility branch audit: probabilities, mean 0, variance ``sigma^2 dt``."""
        p = self.probs
        mean = p @ self.rel
        var = p @ self.rel**2
        target = np.asarray(self.sigmas) ** 2 * self.dt
        ok = (
            np.all(p >= 0) and np.all(p <= 1)
            and np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=tol)
            and np.all(np.abs(mean) <= tol)
            and np.all(np.abs(var - target) <= tol * np.maximum(target, 1e-300))
        )
        return bool(ok), {"mean": mean.tolist(), "variance": var.tolist(), "target": target.tolist()}


@dataclass
class ValueProcess:
    """Per-layer node values, argmax volatility index, per-volatility expectations and hedge."""

    lattice: Lattice
    payoff: Payoff
    V: list
    argmax: list
    attains: list
    expect: list
    hedge: list = field(default=None)

    @property
    def value(self):
        return float(self.V[0][0])


def _children(V_next):
    """Child values (down, mid, up) of every node of the previous layer."""
    return np.stack([V_next[:-2], V_next[1:-1], V_next[2:]], axis=-1)


def dp_value(lattice: Lattice, payoff: Payoff) -> ValueProcess:
    """Backward recursion ``V = max_sigma E_sigma[V(children)]`` (ties to the lowest index)."""
    if not payoff.markovian:
        raise InvalidSpec("the lattice prices Markovian (terminal-spot) payoffs only")
    M = lattice.M
    VT = payoff(lattice.spots(M))
    if np.any(VT < 0):
        raise InvalidSpec("payoff is negative on the lattice")
    V = [None] * (M + 1)
    arg = [None] * M
    att = [None] * M
    exp = [None] * M
    V[M] = VT
    P = lattice.probs
    for m in range(M - 1, -1, -1):
        E = np.einsum("jb,sb->sj", _children(V[m + 1]), P)  # [sigma, node]
        arg[m] = np.argmax(E, axis=0)  # first index of the exact maximum
        best = E[arg[m], np.arange(E.shape[1])]
        tie = E >= best - TIE_TOL * np.maximum(1.0, np.abs(best))
        att[m] = tie
        exp[m] = E
        V[m] = best
    vp = ValueProcess(lattice, payoff, V, arg, att, exp)
    vp.hedge = extract_hedge(vp, lattice)
    return vp


def extract_hedge(vp: ValueProcess, lattice: Lattice = None):
    """``H = (V_up - V_down) / (S_up - S_down)`` per node (the projection of the value increment on the spot increment).

    Returns a list of per-layer arrays; nodes with equal child spots get 0
    and are counted in ``vp.degenerate``.
    """
    lat = lattice or vp.lattice
    H = []
    degenerate = 0
    for m in range(lat.M):
        s = lat.spots(m + 1)
        ds = s[2:] - s[:-2]
        dv = vp.V[m + 1][2:] - vp.V[m + 1][:-2]
        bad = ds <= 0
        degenerate += int(bad.sum())
        H.append(np.where(bad, 0.0, dv / np.where(bad, 1.0, ds)))
    vp.degenerate = degenerate
    return H


@dataclass
class DoobMeyer:
    """Lattice Doob-Meyer split of ``V`` under volatility ``sigma_index``.

    ``dK[m][j]`` is predictable; ``dM[m][j, b]`` is the martingale increment
    along branch ``b`` (down, mid, up); ``dN`` is the part of ``dM`` orthogonal
    to the hedge gains ``H dS``.
    """

    sigma_index: int
    dK: list
    dM: list
    dN: list
    min_dK: float
    max_abs_mean_dM: float

    def along(self, vp, branches):
        """Accumulate ``(V, V_0 + sum H dS + sum dN - sum dK)`` along one branch sequence."""
        lat = vp.lattice
        j = 0
        v0 = vp.V[0][0]
        acc = v0
        for m, b in enumerate(branches):
            s = lat.spots(m)[j + m]
            ds = s * lat.rel[b]
            acc = acc + vp.hedge[m][j + m] * ds + self.dN[m][j + m, b] - self.dK[m][j + m]
            j += b - 1
        return float(vp.V[len(branches)][j + len(branches)]), float(acc)


def doob_meyer_on_lattice(vp: ValueProcess, sigma_index: int, tol=1e-12) -> DoobMeyer:
    """``dK = V - E_sigma[V(children)] >= 0`` and ``dM = dV + dK`` node by node.

    ``sigma_index="argmax"`` uses the optimal volatility of each node.
    """
    lat = vp.lattice
    use_arg = isinstance(sigma_index, str)
    if use_arg and sigma_index != "argmax":
        raise InvalidArgument(f"unknown volatility selector {sigma_index!r}")
    if not use_arg and not 0 <= sigma_index < len(lat.sigmas):
        raise InvalidArgument(f"sigma index {sigma_index} out of range")
    dK, dM, dN = [], [], []
    worst_mean = 0.0
    min_dk = math.inf
    for m in range(lat.M):
        kids = _children(vp.V[m + 1])
        sel = vp.argmax[m] if use_arg else np.full(vp.V[m].shape, sigma_index)
        p = lat.probs[sel]
        k = vp.V[m] - vp.expect[m][sel, np.arange(sel.size)]
        scale = np.maximum(1.0, np.abs(vp.V[m]))
        if np.any(k < -tol * scale):
            raise InternalError(f"negative compensator increment {k.min()} at layer {m}")
        k = np.maximum(k, 0.0)
        mart = kids - vp.V[m][:, None] + k[:, None]
        gains = vp.hedge[m][:, None] * lat.spots(m)[:, None] * lat.rel[None, :]
        dK.append(k)
        dM.append(mart)
        dN.append(mart - gains)
        worst_mean = max(worst_mean, float(np.max(np.abs(np.einsum("jb,jb->j", mart, p)))))
        min_dk = min(min_dk, float(k.min()))
    return DoobMeyer(sigma_index, dK, dM, dN, min_dk, worst_mean)


def self_financing_error(vp: ValueProcess, dm: DoobMeyer, n_paths=200, seed=0):
    """Largest gap between ``V`` and its accumulated decomposition over random branch paths."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_paths):
        br = rng.integers(0, 3, vp.lattice.M)
        v, acc = dm.along(vp, br)
        worst = max(worst, abs(v - acc))
    return worst


# --- Black-Scholes-Barenblatt ------------------------------------------------


@dataclass
class FDResult:
    value: float
    S: np.ndarray
    V: np.ndarray
    n_steps: int
    refined: bool


def bsb_fd_price(payoff, sigma_lo, sigma_hi, S0, T, S_max=None, J=400, n_steps=None):
    """Explicit scheme for ``V_t + 1/2 max_{sigma in [lo, hi]} sigma^2 S^2 V_SS = 0``.

    The volatility is picked pointwise from the sign of the discrete second
    difference; boundaries extrapolate linearly.  A requested step count
    violating the stability bound is refined with a warning.
    """
    if not (0 < sigma_lo <= sigma_hi):
        raise InvalidArgument("need 0 < sigma_lo <= sigma_hi")
    if not payoff.markovian:
        raise InvalidSpec("the PDE oracle needs a terminal-spot payoff")
    if S_max is None:
        strikes = [p for p in payoff.params] if payoff.kind != "constant" else []
        S_max = 4.0 * max([S0] + strikes)
    S = np.linspace(0.0, S_max, J + 1)
    dS = S[1] - S[0]
    stable = int(math.ceil(T * (sigma_hi * S_max) ** 2 / dS**2 * 1.05))
    refined = False
    if n_steps is None:
        n_steps = stable
    elif n_steps < stable:
        warnings.warn(f"explicit scheme unstable with {n_steps} steps; refining to {stable}", RuntimeWarning)
        n_steps, refined = stable, True
    dt = T / n_steps
    V = payoff(S).astype(float)
    coef = 0.5 * dt * (S[1:-1] / dS) ** 2
    hi2, lo2 = sigma_hi**2, sigma_lo**2
    for _ in range(n_steps):
        d2 = V[2:] - 2.0 * V[1:-1] + V[:-2]
        V[1:-1] += coef * np.where(d2 >= 0, hi2, lo2) * d2
        V[0] = 2 * V[1] - V[2]
        V[-1] = 2 * V[-2] - V[-3]
    value = float(np.interp(S0, S, V))
    return FDResult(value, S, V, n_steps, refined)


# --- Monte-Carlo ---------------------------------------------------------------


def _terminal_spots(coef, n, grid, S0, seed, threads=1):
    X, A = MeasureSampler(coef, seed, grid, threads).sample(n, with_coefficient=True)
    ia = A[:, :-1, 0, 0] @ grid.dt
    return S0 * np.exp(X.values[:, -1, 0] - 0.5 * ia)


def _mean_se(x):
    n = x.size
    mean = math.fsum(x.tolist()) / n
    if np.all(x == x[0]):
        return float(x[0]), 0.0
    return mean, float(np.std(x, ddof=1) / math.sqrt(n))


def mc_lower_bound(payoff, coefficients, n, S0=100.0, T=1.0, N=64, seed=0, threads=1):
    """Best Monte-Carlo payoff mean over a finite coefficient list (a lower bound on the superhedging price).

    Coefficients are squared volatilities of the log spot.  Returns a dict with
    the best mean, its SE, the argmax index and every per-coefficient estimate.
    """
    grid = make_grid(T, N)
    means, ses = [], []
    for i, c in enumerate(coefficients):
        sT = _terminal_spots(as_coefficient(c), n, grid, S0, seed + 7919 * i, threads)
        m, s = _mean_se(payoff(sT))
        means.append(m)
        ses.append(s)
    best = int(np.argmax(means))
    return {"best_mean": means[best], "se": ses[best], "argmax": best, "means": means, "ses": ses}


# --- hedge verification ------------------------------------------------------


@dataclass(frozen=True)
class BSDeltaHedge:
    """Markov hedge ``H(t, S) = Phi(d1)`` with volatility ``sigma``."""

    sigma: float
    K: float
    T: float

    @property
    def description(self):
        return f"bs_delta(sigma={self.sigma}, K={self.K})"

    def __call__(self, t, s):
        tau = np.maximum(self.T - np.asarray(t, dtype=float), 1e-300)
        return black_scholes_delta(s, self.K, tau, self.sigma)

    def prepare(self, t):
        """Vectorized ``log S -> H`` on the fixed time grid ``t``."""
        vol = self.sigma * np.sqrt(np.maximum(self.T - t, 1e-300))
        inv = 1.0 / vol
        shift = 0.5 * vol - math.log(self.K) * inv
        return lambda logs: ndtr(logs * inv + shift)


def bs_delta_hedge(sigma, K, T):
    return BSDeltaHedge(float(sigma), float(K), float(T))


def lattice_hedge(vp: ValueProcess):
    """Markov hedge read off the lattice (nearest earlier layer, linear in log spot)."""
    lat = vp.lattice

    def h(t, s):
        m = min(int(t / lat.dt + 1e-9), lat.M - 1)
        x = np.log(s / lat.S0) / lat.dx
        nodes = np.arange(-m, m + 1)
        return np.interp(x, nodes, vp.hedge[m])

    h.description = "lattice_hedge"
    return h


def _hedge_chunk(sig, S0, T, N, seed, ids, hedges, payoff):
    dt = T / N
    t = np.arange(N) * dt
    out = np.empty((len(hedges), len(ids)))
    fast = [hasattr(h, "prepare") for h in hedges]
    prepared = [h.prepare(t) if f else None for h, f in zip(hedges, fast)]
    for c, pid in enumerate(ids):
        z = path_rng(seed, int(pid)).standard_normal(N)
        logS = np.empty(N + 1)
        logS[0] = math.log(S0)
        np.cumsum(sig * math.sqrt(dt) * z - 0.5 * sig * sig * dt, out=logS[1:])
        logS[1:] += logS[0]
        S = np.exp(logS)
        dS = np.diff(S)
        pay = float(payoff(S[-1:])[0])
        for h, f in enumerate(prepared):
            out[h, c] = float(np.dot(f(logS[:-1]) if fast[h] else hedges[h](t, S[:-1]), dS)) - pay
    return out


def verify_superhedge(price, hedge, payoff, sigmas, n, S0=100.0, T=1.0, N=2**19, seed=0, eps=None, threads=1,
                      max_fraction=0.01):
    """Simulate ``price + sum H dS - payoff`` under each constant volatility.

    ``price`` and ``hedge`` may be lists (evaluated on the same paths).
    A strategy passes when, under every volatility, the fraction of paths
    below ``-eps`` is at most ``max_fraction``; ``eps`` defaults to 0.5% of
    the price.
    """
    prices = list(price) if np.ndim(price) else [price]
    hedges = list(hedge) if isinstance(hedge, (list, tuple)) else [hedge]
    if len(hedges) == 1 and len(prices) > 1:
        hedges = hedges * len(prices)
    if len(prices) != len(hedges):
        raise InvalidArgument("one hedge per price")
    unique = []
    slot = []
    for h in hedges:
        match = [k for k, u in enumerate(unique) if u is h or u == h]
        if match:
            slot.append(match[0])
        else:
            slot.append(len(unique))
            unique.append(h)
    results = [[] for _ in prices]
    for i, sig in enumerate(sigmas):
        ids = np.arange(n)
        chunks = np.array_split(ids, max(1, threads))
        sseed = seed + 104729 * i
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(lambda c: _hedge_chunk(sig, S0, T, N, sseed, c, unique, payoff), chunks))
        else:
            parts = [_hedge_chunk(sig, S0, T, N, sseed, ids, unique, payoff)]
        base = np.concatenate(parts, axis=1)
        for h, p in enumerate(prices):
            e = 0.005 * p if eps is None else eps
            pnl = p + base[slot[h]]
            frac = float(np.mean(pnl < -e))
            results[h].append(
                {
                    "sigma": float(sig),
                    "min": float(pnl.min()),
                    "p01": float(np.quantile(pnl, 0.01)),
                    "mean": float(pnl.mean()),
                    "fraction_below": frac,
                    "eps": float(e),
                    "passed": frac <= max_fraction,
                }
            )
    reports = [{"price": float(p), "records": r, "passed": all(x["passed"] for x in r)} for p, r in zip(prices, results)]
    return reports if len(reports) > 1 else reports[0]
