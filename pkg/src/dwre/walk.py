"""The walk F(x, z) = (T_z x, z -/+ 1), its induced maps, and ensembles.

Gate membership is decided on the state *before* the map is applied.  All
per-walker work goes through :class:`SiteKernel`, whose arithmetic mirrors
:meth:`ExpandingMap.lift` term by term so scalar, vectorized, direct and
induced paths produce bit-identical states.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .circle_maps import TWO_PI, Verdict, verify_gt1
from .environment import Environment, RandomSource, WindowError

CHUNK = 8192


class HorizonError(RuntimeError):
    """A walker did not reach its target within the 3n + 10 step cap."""

    def __init__(self, msg, x0=None):
        super().__init__(msg)
        self.x0 = x0


class SiteKernel:
    """Alphabet parameters as arrays plus the window's site table."""

    def __init__(self, env: Environment):
        pairs = env.alphabet
        self.env = env
        self.lo, self.hi = env.window
        self.table = env.table()
        self.deg = np.array([float(p.map.degree) for p in pairs])
        self.amp = np.array([p.map.amplitude / TWO_PI for p in pairs])
        self.phase = np.array([p.map.phase for p in pairs])
        self.glo = np.array([p.gate.arc.start for p in pairs])
        self.gw = np.array([p.gate.arc.length for p in pairs])
        nterm = max(len(p.map.perturbation) for p in pairs)
        self.pert = []
        for t in range(nterm):
            coef, freq, ph = [], [], []
            for p in pairs:
                if t < len(p.map.perturbation):
                    q = p.map.perturbation[t]
                    k = TWO_PI * q.frequency
                    coef.append(q.amplitude / (k * k))
                    freq.append(k)
                    ph.append(q.phase)
                else:
                    coef.append(0.0)
                    freq.append(TWO_PI)
                    ph.append(0.0)
            self.pert.append((np.array(coef), np.array(freq), np.array(ph)))
        self.single = len(pairs) == 1

    def site_index(self, z):
        """Alphabet index for site(s) z; sites below the window clamp to it."""
        z = np.asarray(z)
        if np.any(z > self.hi):
            raise WindowError(f"site {int(np.max(z))} is above the window [{self.lo}, {self.hi}]")
        if self.single:
            return np.zeros(z.shape, dtype=np.int64) if z.ndim else 0
        return self.table[np.maximum(z, self.lo) - self.lo]

    def apply(self, j, x):
        """T_j(x) mod 1 for alphabet index (array) j."""
        if self.single:
            j = 0
        y = self.deg[j] * x + self.amp[j] * np.sin(TWO_PI * (x + self.phase[j]))
        for coef, k, ph in self.pert:
            y = y + coef[j] * np.sin(k[j] * (x + ph[j]))
        r = y - np.floor(y)
        return np.where(r >= 1.0, 0.0, r)

    def in_gate(self, j, x):
        if self.single:
            j = 0
        return np.remainder(x - self.glo[j], 1.0) < self.gw[j]


def kernel(env: Environment) -> SiteKernel:
    return env.memo("kernel", lambda: SiteKernel(env))


def gt1_verdict(env: Environment) -> Verdict:
    """(gt-1) over every neighbouring alphabet pattern that occurs in the window."""

    def build():
        t = env.table()
        m = len(env.alphabet)
        codes = np.unique(t[:-1] * m + t[1:]) if len(t) > 1 else np.array([t[0] * m + t[0]])
        v = Verdict.PASS
        for c in codes:
            prev, cur = divmod(int(c), m)
            v = v & verify_gt1(env.alphabet[cur], env.alphabet[prev])[0]
        return v

    return env.memo("gt1", build)


# ------------------------------------------------------------------ scalar API


@dataclass(frozen=True)
class WalkerState:
    x: float
    z: int
    t: int = 0


def step_F(state: WalkerState, env: Environment) -> WalkerState:
    k = kernel(env)
    j = k.site_index(state.z)
    x = np.float64(state.x)
    g = bool(k.in_gate(j, x))
    return WalkerState(float(k.apply(j, x)), state.z - 1 if g else state.z + 1, state.t + 1)


def induced_step(x: float, n: int, env: Environment) -> tuple[float, int]:
    """(G_n x, r_n x).  Iterates F when (gt-1) is not verified."""
    if gt1_verdict(env).ok:
        xs, r = _induced(kernel(env), np.array([x], dtype=float), n)
        return float(xs[0]), int(r[0])
    s = WalkerState(x, n)
    while s.z != n + 1:
        s = step_F(s, env)
        if s.t > 1000:
            raise HorizonError(f"no arrival at site {n + 1} from x={x!r}", x)
    return s.x, s.t


def _induced(k: SiteKernel, x: np.ndarray, n: int):
    jn, jp = k.site_index(n), k.site_index(n - 1)
    g = k.in_gate(jn, x)
    y = k.apply(jn, x)
    if np.any(g):
        y[g] = k.apply(jn, k.apply(jp, y[g]))
    return y, 1 + 2 * g.astype(np.int64)


@dataclass
class HittingRecord:
    n: int
    tau: int
    returns: list[int] | None = None


def hitting_time(x: float, n: int, env: Environment, mode: str = "induced") -> HittingRecord:
    if n < 1:
        raise ValueError("target site must be >= 1")
    if mode == "induced" and gt1_verdict(env).ok:
        k = kernel(env)
        xs, rs = np.array([x], dtype=float), []
        for s in range(n):
            xs, r = _induced(k, xs, s)
            rs.append(int(r[0]))
        return HittingRecord(n, sum(rs), rs)
    if mode not in ("induced", "direct"):
        raise ValueError(f"unknown mode {mode!r}")
    tau = hitting_times(np.array([x], dtype=float), [n], env, mode="direct")[0, 0]
    return HittingRecord(n, int(tau))


# -------------------------------------------------------------- vector kernels


def hitting_times(x0: np.ndarray, ns: Sequence[int], env: Environment, mode: str = "induced") -> np.ndarray:
    """tau_n(x) for every n in ``ns`` (ascending) and every x; shape (len(ns), len(x))."""
    ns = np.asarray(ns, dtype=np.int64)
    if ns.size == 0 or np.any(np.diff(ns) < 0) or ns[0] < 0:
        raise ValueError("ns must be a non-empty ascending list of non-negative sites")
    k = kernel(env)
    x = np.array(x0, dtype=float, copy=True)
    out = np.zeros((len(ns), len(x)), dtype=np.int64)
    nmax = int(ns[-1])
    if mode == "induced" and gt1_verdict(env).ok:
        tau = np.zeros(len(x), dtype=np.int64)
        j = 0
        while j < len(ns) and ns[j] == 0:
            j += 1
        for s in range(nmax):
            x, r = _induced(k, x, s)
            tau += r
            while j < len(ns) and ns[j] == s + 1:
                out[j] = tau
                j += 1
        return out
    z = np.zeros(len(x), dtype=np.int64)
    ptr = np.searchsorted(ns, 0, side="right")
    ptr = np.full(len(x), ptr, dtype=np.int64)
    active = ptr < len(ns)
    cap = 3 * nmax + 10
    t = 0
    while np.any(active):
        if t >= cap:
            bad = np.flatnonzero(active)[0]
            raise HorizonError(f"walker from x={x0[bad]!r} did not reach site {nmax} in {cap} steps",
                               float(x0[bad]))
        idx = np.flatnonzero(active)
        xa, za = x[idx], z[idx]
        j = k.site_index(za)
        g = k.in_gate(j, xa)
        x[idx] = k.apply(j, xa)
        z[idx] = za + np.where(g, -1, 1)
        t += 1
        h = idx[z[idx] == ns[ptr[idx]]]
        while h.size:
            # repeated targets share one arrival time
            out[ptr[h], h] = t
            ptr[h] += 1
            h = h[ptr[h] < len(ns)]
            h = h[ns[ptr[h]] == z[h]]
        active = ptr < len(ns)
    return out


def hitting_sums(x0: np.ndarray, z_max: int, env: Environment) -> np.ndarray:
    """Integer sums of tau_z and tau_z**2 over x0 for z = 0..z_max; shape (2, z_max + 1).

    Exact integer arithmetic keeps chunked, threaded accumulation bit-identical.
    """
    k = kernel(env)
    out = np.zeros((2, z_max + 1), dtype=np.int64)
    if gt1_verdict(env).ok:
        x = np.array(x0, dtype=float, copy=True)
        tau = np.zeros(len(x), dtype=np.int64)
        for s in range(z_max):
            x, r = _induced(k, x, s)
            tau += r
            out[0, s + 1] = tau.sum()
            out[1, s + 1] = (tau * tau).sum()
        return out
    taus = hitting_times(x0, np.arange(1, z_max + 1), env, mode="direct")
    out[0, 1:] = taus.sum(axis=1)
    out[1, 1:] = (taus * taus).sum(axis=1)
    return out


def positions(x0: np.ndarray, times: Sequence[int], env: Environment):
    """(z_t, z*_t) at each t in ``times`` (ascending); arrays of shape (len(times), len(x))."""
    times = np.asarray(times, dtype=np.int64)
    if times.size == 0 or np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be a non-empty ascending list of non-negative integers")
    k = kernel(env)
    x = np.array(x0, dtype=float, copy=True)
    z = np.zeros(len(x), dtype=np.int64)
    zs = np.zeros(len(x), dtype=np.int64)
    out_z = np.zeros((len(times), len(x)), dtype=np.int64)
    out_s = np.zeros_like(out_z)
    j = 0
    for t in range(int(times[-1]) + 1):
        while j < len(times) and times[j] == t:
            out_z[j], out_s[j] = z, zs
            j += 1
        if t == times[-1]:
            break
        a = k.site_index(z)
        g = k.in_gate(a, x)
        x = k.apply(a, x)
        z += np.where(g, -1, 1)
        np.maximum(zs, z, out=zs)
    return out_z, out_s


def ballistic_violations(x0: np.ndarray, t: int, env: Environment) -> dict:
    """Count breaches of z_n >= ceil(n/3) - 1 and z_n >= z_m - 1 (m < n) up to time t.

    ``linear_gt1`` counts breaches of the weaker z_n >= floor(n/3) - 1, which
    follows from (gt-1) alone (tau_j <= 3j); the ceiling form also needs the
    deeper no-return condition.  ``linear_first_step`` is the part of
    ``linear`` at n = 1, i.e. walkers that start inside the gate of site 0.
    """
    k = kernel(env)
    x = np.array(x0, dtype=float, copy=True)
    z = np.zeros(len(x), dtype=np.int64)
    zs = z.copy()
    lin = lin1 = first = back = 0
    worst_back = 0
    for n in range(1, t + 1):
        a = k.site_index(z)
        g = k.in_gate(a, x)
        x = k.apply(a, x)
        z += np.where(g, -1, 1)
        c = int(np.count_nonzero(z < -(-n // 3) - 1))
        lin += c
        if n == 1:
            first = c
        lin1 += int(np.count_nonzero(z < n // 3 - 1))
        drop = zs - z
        back += int(np.count_nonzero(drop > 1))
        worst_back = max(worst_back, int(drop.max()))
        np.maximum(zs, z, out=zs)
    return {"linear": lin, "linear_gt1": lin1, "linear_first_step": first, "backtrack": back,
            "max_backtrack": worst_back, "samples": len(x), "t": t}


# ------------------------------------------------------------------ trajectory


@dataclass
class Trajectory:
    x0: float
    x: np.ndarray
    z: np.ndarray
    zstar: np.ndarray

    @property
    def t(self) -> int:
        return len(self.z) - 1

    def lag_check(self, lag: int) -> int:
        """Number of times with z*_{t-lag} > z_t."""
        if len(self.z) <= lag:
            return 0
        return int(np.count_nonzero(self.zstar[:-lag] > self.z[lag:]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "z", "zstar"])
            for i in range(len(self.z)):
                w.writerow([i, repr(float(self.x[i])), int(self.z[i]), int(self.zstar[i])])


def run_to_time(x: float, t: int, env: Environment, check_lag: int | None = 10) -> Trajectory:
    """Full path up to time t; with ``check_lag`` asserts z*_{t-lag} <= z_t <= z*_t."""
    s = WalkerState(float(x), 0)
    xs, zs = [s.x], [0]
    for _ in range(t):
        s = step_F(s, env)
        xs.append(s.x)
        zs.append(s.z)
    z = np.array(zs, dtype=np.int64)
    tr = Trajectory(float(x), np.array(xs), z, np.maximum.accumulate(z))
    if check_lag is not None and gt1_verdict(env).ok and tr.lag_check(check_lag):
        raise AssertionError(f"z*_(t-{check_lag}) > z_t along the path from x={x!r}")
    return tr


# -------------------------------------------------------------------- ensembles


def initial_points(N_s: int, sampler: str = "uniform", seed: int = 0) -> np.ndarray:
    """Stratified midpoints or seeded uniforms drawn chunk by chunk."""
    if N_s < 1:
        raise ValueError("need at least one sample")
    if sampler == "stratified":
        return (np.arange(N_s) + 0.5) / N_s
    if sampler != "uniform":
        raise ValueError(f"unknown sampler {sampler!r}")
    parts = []
    for c in range(math.ceil(N_s / CHUNK)):
        size = min(CHUNK, N_s - c * CHUNK)
        parts.append(RandomSource(seed, (1, c)).generator().random(size))
    return np.concatenate(parts)


def resolve_threads(threads: int) -> int:
    return max(1, os.cpu_count() or 1) if threads <= 0 else int(threads)


def chunk_map(fn, x0: np.ndarray, threads: int = 1, chunk: int = CHUNK) -> list:
    """``fn`` on fixed-size chunks of x0, in chunk order whatever the thread count."""
    pieces = [x0[i:i + chunk] for i in range(0, len(x0), chunk)]
    nt = resolve_threads(threads)
    if nt == 1 or len(pieces) == 1:
        return [fn(p) for p in pieces]
    with ThreadPoolExecutor(nt) as pool:
        return list(pool.map(fn, pieces))


def chunked(fn, x0: np.ndarray, threads: int = 1, chunk: int = CHUNK):
    """:func:`chunk_map` with the results stitched along the last axis."""
    res = chunk_map(fn, x0, threads, chunk)
    if isinstance(res[0], tuple):
        return tuple(np.concatenate([r[i] for r in res], axis=-1) for i in range(len(res[0])))
    return np.concatenate(res, axis=-1)


@dataclass
class EnsembleResult:
    observable: str
    at: list[int]
    x0: np.ndarray
    values: np.ndarray  # shape (len(at), N_s)
    sampler: str
    seed: int

    @property
    def N_s(self) -> int:
        return len(self.x0)

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=1)

    @property
    def var(self) -> np.ndarray:
        return self.values.var(axis=1, ddof=1)

    def summary(self) -> dict:
        return {
            "observable": self.observable,
            "at": list(self.at),
            "N_s": self.N_s,
            "sampler": self.sampler,
            "seed": self.seed,
            "mean": [float(m) for m in self.mean],
            "variance": [float(v) for v in self.var],
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x0"] + [f"{self.observable}_{a}" for a in self.at])
            for i in range(self.N_s):
                w.writerow([repr(float(self.x0[i]))] + [int(v) for v in self.values[:, i]])


def ensemble(env: Environment, observable: str, at, N_s: int, sampler: str = "uniform", seed: int = 0,
             threads: int = 1, mode: str = "induced") -> EnsembleResult:
    """Evaluate ``tau`` (at sites), ``z`` or ``zstar`` (at times) over N_s initial points."""
    if N_s < 2:
        raise ValueError("an ensemble needs N_s >= 2")
    at = [int(a) for a in np.atleast_1d(at)]
    x0 = initial_points(N_s, sampler, seed)
    if observable == "tau":
        vals = chunked(lambda p: hitting_times(p, at, env, mode), x0, threads)
    elif observable in ("z", "zstar"):
        zz, zs = chunked(lambda p: positions(p, at, env), x0, threads)
        vals = zz if observable == "z" else zs
    else:
        raise ValueError(f"unknown observable {observable!r}")
    return EnsembleResult(observable, at, x0, vals, sampler, seed)
