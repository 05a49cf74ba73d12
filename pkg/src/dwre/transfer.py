"""Ulam discretization of transfer operators and the checks built on it.

Grid functions live on ``m`` equal cells of the circle.  A density is a
vector with grid mean 1; an observable is a vector evaluated cellwise.
``A[i, j]`` is the fraction of cell ``j`` that the map sends into cell ``i``,
so ``A @ f`` pushes densities forward and ``A.T @ g`` is the cell-averaged
composition ``g o T``.

Site ``k`` of an environment contributes the induced map ``G_k``.  Starting
from the uniform density at site 0, ``rho_{k+1} = P_k rho_k`` is the law of
the internal state on first arrival at site ``k + 1``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .circle_maps import Arc, ExpandingMap, MapConstants, SitePair
from .environment import Environment

FLOOR = 1e-12


class MinorationError(RuntimeError):
    """A density dropped below half the verified lower bound."""


# ---------------------------------------------------------------- maps


class InducedMap:
    """G(x) = T_n T_{n-1} T_n x on the gate of site n, T_n x elsewhere."""

    def __init__(self, site: SitePair, prev: SitePair):
        self.site, self.prev = site, prev

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        t = self.site.map
        y = t(x)
        g = self.site.gate.contains(x)
        if np.any(g):
            y = np.where(g, t(self.prev.map(y)), y)
        return y

    def return_time(self, x):
        return 1 + 2 * self.site.gate.contains(x).astype(np.int64)

    def lift_gate(self, x):
        t = self.site.map
        return t.lift(self.prev.map.lift(t.lift(x)))

    def pieces(self, m: int):
        """Cells cut at the gate endpoints, each with the lift that is monotone on it."""
        arc = self.site.gate.arc
        edges = np.arange(m + 1) / m
        if arc.empty:
            return [(edges[:-1], edges[1:], np.arange(m), self.site.map.lift)]
        cuts = np.unique(np.concatenate([edges, [arc.start, (arc.start + arc.length) % 1.0]]))
        cuts = np.append(cuts[cuts < 1.0], 1.0)
        u, v = cuts[:-1], cuts[1:]
        keep = v > u
        u, v = u[keep], v[keep]
        cell = np.minimum((u * m).astype(np.int64), m - 1)
        inside = arc.contains(0.5 * (u + v))
        return [(u[~inside], v[~inside], cell[~inside], self.site.map.lift),
                (u[inside], v[inside], cell[inside], self.lift_gate)]

    def descriptor(self) -> dict:
        return {"site": self.site.to_dict(), "prev": self.prev.to_dict()}


class MapPieces:
    """Adapter giving a single expanding map the ``pieces`` interface."""

    def __init__(self, tmap: ExpandingMap):
        self.tmap = tmap

    def __call__(self, x):
        return self.tmap(x)

    def pieces(self, m: int):
        e = np.arange(m + 1) / m
        return [(e[:-1], e[1:], np.arange(m), self.tmap.lift)]


def _invert(lift, lo, hi, target, iters=60):
    """Bisection for lift(x) = target on [lo, hi] (lift increasing)."""
    a, b = lo.copy(), hi.copy()
    for _ in range(iters):
        mid = 0.5 * (a + b)
        below = lift(mid) < target
        a = np.where(below, mid, a)
        b = np.where(below, b, mid)
    return 0.5 * (a + b)


def _exact_entries(pieces, m):
    rows, cols, vals = [], [], []
    for u, v, cell, lift in pieces:
        if len(u) == 0:
            continue
        a, b = lift(u), lift(v)
        k0 = np.floor(a * m).astype(np.int64) + 1
        k1 = np.ceil(b * m).astype(np.int64) - 1
        cnt = np.maximum(k1 - k0 + 1, 0)
        # grid-line crossings inside each piece, flattened
        pid = np.repeat(np.arange(len(u)), cnt)
        off = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        k = k0[pid] + off
        roots = _invert(lift, u[pid], v[pid], k / m) if len(pid) else np.empty(0)
        # breakpoints per piece: u, roots..., v
        starts = np.cumsum(cnt + 2) - (cnt + 2)
        pts = np.empty(int((cnt + 2).sum()))
        pts[starts] = u
        pts[starts + cnt + 1] = v
        inner = np.repeat(starts + 1, cnt) + off
        pts[inner] = roots
        seg_piece = np.repeat(np.arange(len(u)), cnt + 1)
        seg_start = np.delete(np.arange(len(pts)), starts + cnt + 1)
        lo, hi = pts[seg_start], pts[seg_start + 1]
        img = np.floor(a[seg_piece] * m).astype(np.int64) + (seg_start - starts[seg_piece])
        rows.append(np.remainder(img, m))
        cols.append(cell[seg_piece])
        vals.append((hi - lo) * m)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


# ------------------------------------------------------------ operator


@dataclass
class UlamOperator:
    matrix: sp.csr_matrix
    label: str = ""

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, f):
        return self.matrix @ f

    def koopman(self, g):
        return self.matrix.T @ g

    def column_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=0)).ravel()

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.matrix.indptr, self.matrix.indices, self.matrix.data):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def export_csv(self, path, site=None) -> None:
        """Dense matrix with a one-line header of grid size, site and hash."""
        with open(path, "w", newline="") as fh:
            fh.write(f"# m={self.m} site={site} hash={self.digest()} label={self.label}\n")
            w = csv.writer(fh)
            for row in self.matrix.toarray():
                w.writerow([repr(float(v)) for v in row])

    def export_npz(self, path) -> None:
        sp.save_npz(path, self.matrix.tocsr())


def build_ulam(fmap, m: int, refinement: int = 64, label: str = "", method: str = "auto") -> UlamOperator:
    """Ulam matrix on ``m`` cells.

    ``exact`` inverts the monotone lift at every grid line, giving the true
    cell-to-cell fractions; it needs ``fmap.pieces`` (or an ExpandingMap).
    ``sample`` bins ``refinement`` stratified points per cell; its entries are
    multiples of 1/refinement, which adds O(m / refinement) spurious grid
    variation.  Columns are renormalized to sum to one either way.
    """
    if m < 2 or m & (m - 1):
        raise ValueError("grid size must be a power of two")
    if refinement < 16:
        raise ValueError("need at least 16 subsamples per cell")
    if isinstance(fmap, ExpandingMap):
        fmap = MapPieces(fmap)
    if method == "auto":
        method = "exact" if hasattr(fmap, "pieces") else "sample"
    if method == "exact":
        i, j, w = _exact_entries(fmap.pieces(m), m)
    elif method == "sample":
        R = refinement
        j = np.repeat(np.arange(m), R)
        s = np.tile((np.arange(R) + 0.5) / R, m)
        y = np.asarray(fmap((j + s) / m), dtype=float)
        i = np.minimum((y * m).astype(np.int64), m - 1)
        w = np.full(m * R, 1.0 / R)
    else:
        raise ValueError(f"unknown method {method!r}")
    A = sp.csc_matrix((w, (i, j)), shape=(m, m))
    A.sum_duplicates()
    A.eliminate_zeros()
    colsum = np.asarray(A.sum(axis=0)).ravel()
    A = A @ sp.diags(1.0 / colsum)
    return UlamOperator(sp.csr_matrix(A), label)


def site_operator(env: Environment, n: int, m: int = 4096, refinement: int = 64) -> UlamOperator:
    """Ulam operator of G_n, shared between sites with the same local pattern."""
    a, b = env.index(n - 1), env.index(n)
    return env.memo(("ulam", a, b, m, refinement),
                    lambda: build_ulam(InducedMap(env.alphabet[b], env.alphabet[a]), m, refinement,
                                       label=f"G[{a}->{b}]"))


def env_operators(env: Environment, m: int = 4096, refinement: int = 64) -> Callable[[int], UlamOperator]:
    return lambda k: site_operator(env, k, m, refinement)


def push_density(ops: Sequence[UlamOperator], f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    for op in ops:
        if op.m != len(f):
            raise ValueError(f"grid mismatch: operator has {op.m} cells, vector has {len(f)}")
        f = op(f)
    return f


def iter_densities(env: Environment, n: int, m: int = 4096, refinement: int = 64):
    """Yield rho_0 = 1, rho_1, ..., rho_n."""
    rho = np.ones(m)
    yield rho
    for k in range(n):
        rho = site_operator(env, k, m, refinement)(rho)
        yield rho


def gate_weights(arc: Arc, m: int) -> np.ndarray:
    """Length of each cell covered by the arc (cells of length 1/m)."""
    w = np.zeros(m)
    if arc.empty:
        return w
    a, b = arc.start, arc.start + arc.length
    for lo, hi in ((a, min(b, 1.0)), (0.0, b - 1.0)) if b > 1.0 else ((a, b),):
        i0, i1 = int(math.floor(lo * m)), min(int(math.ceil(hi * m)), m)
        cells = np.arange(i0, i1)
        w[cells] += np.clip(np.minimum(hi, (cells + 1) / m) - np.maximum(lo, cells / m), 0.0, None)
    return w


def gate_mass(env: Environment, k: int, rho: np.ndarray) -> float:
    m = len(rho)
    j = env.index(k)
    w = env.memo(("gatew", j, m), lambda: gate_weights(env.alphabet[j].gate.arc, m))
    return float(np.dot(w, rho))


# ---------------------------------------------------------------- BV tools


def variation(f: np.ndarray) -> float:
    """Circular grid variation: sum of |f_i - f_{i+1}| including the wrap."""
    f = np.asarray(f, dtype=float)
    return float(np.abs(np.diff(f, append=f[:1])).sum())


def l1(f: np.ndarray) -> float:
    return float(np.mean(np.abs(f)))


def l2(f: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(f))))


def bv_norm(f: np.ndarray) -> float:
    return variation(f) + l1(f)


def interval_indicator(a: float, b: float, m: int) -> np.ndarray:
    return gate_weights(Arc(a, b - a), m) * m


def standard_dictionary(m: int) -> dict[str, np.ndarray]:
    """Zero-mean test functions scaled to |f|_v = 1.

    Trigonometric modes are sampled at cell midpoints; indicators use exact
    cell averages.  Non-dyadic intervals and the sawtooth are included
    because the doubling operator kills low trig modes outright.
    """
    x = (np.arange(m) + 0.5) / m
    raw = {}
    for k in (1, 2, 3):
        raw[f"cos{k}"] = np.cos(2 * np.pi * k * x)
        raw[f"sin{k}"] = np.sin(2 * np.pi * k * x)
    for a, b in ((0.0, 0.5), (0.25, 0.5), (0.0, 1 / 3), (0.2, 0.45), (0.1, 0.7)):
        raw[f"ind[{a:.3g},{b:.3g})"] = interval_indicator(a, b, m)
    raw["sawtooth"] = x - 0.5
    out = {}
    for name, f in raw.items():
        f = f - f.mean()
        out[name] = f / bv_norm(f)
    return out


# ------------------------------------------------------------ mixing checks


@dataclass
class DecayCurve:
    l1: list[float]
    bv: list[float]
    rate_l1: float | None
    rate_bv: float | None
    D: float | None
    points_used: int

    @property
    def rejected(self) -> bool:
        return self.rate_l1 is None and self.rate_bv is None


@dataclass
class MixingReport:
    theta: float | None
    D: float | None
    curves: dict[str, DecayCurve]
    sigma: float | None = None
    covering_N: int | None = None

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "D": self.D,
            "sigma": self.sigma,
            "covering_N": self.covering_N,
            "curves": {k: {"rate_l1": c.rate_l1, "rate_bv": c.rate_bv, "D": c.D, "points_used": c.points_used,
                           "rejected": c.rejected, "l1": c.l1, "bv": c.bv} for k, c in self.curves.items()},
        }


def _fit_rate(vals: np.ndarray, floor: float = FLOOR, min_points: int = 5):
    idx = np.flatnonzero(vals > floor)
    # use the leading run above the floor; later points sit in roundoff
    if idx.size == 0 or idx[0] != 0:
        return None, 0
    run = np.flatnonzero(np.diff(idx) != 1)
    end = idx[run[0]] + 1 if run.size else idx[-1] + 1
    if end < min_points:
        return None, end
    n = np.arange(end)
    slope = np.polyfit(n, np.log(vals[:end]), 1)[0]
    return float(math.exp(slope)), end


def decay_rate(ops: Callable[[int], UlamOperator] | Sequence[UlamOperator], dictionary: dict[str, np.ndarray],
               n_max: int = 60) -> MixingReport:
    """Log-linear fit of ||P^n f||_1 and |P^n f|_v; theta is the largest fitted rate."""
    get = ops if callable(ops) else (lambda k: ops[k])
    curves = {}
    for name, f in dictionary.items():
        if abs(f.mean()) > 1e-12 or not np.any(f):
            raise ValueError(f"test function {name!r} must be non-zero with grid mean 0")
        fv = bv_norm(f)
        if fv > 1 + 1e-9:
            raise ValueError(f"test function {name!r} has |f|_v = {fv:.3g} > 1")
        g = f.copy()
        a, b = [l1(g)], [bv_norm(g)]
        for k in range(n_max):
            g = get(k)(g)
            a.append(l1(g))
            b.append(bv_norm(g))
        a, b = np.array(a), np.array(b)
        r1, p1 = _fit_rate(a)
        rv, pv = _fit_rate(b)
        rates = [r for r in (r1, rv) if r is not None]
        D = None
        if rates:
            th = max(rates)
            n = np.arange(max(p1, pv))
            D = float(np.max(b[: len(n)] / (th ** n * fv)))
        curves[name] = DecayCurve(a.tolist(), b.tolist(), r1, rv, D, max(p1, pv))
    fitted = [c for c in curves.values() if not c.rejected]
    theta = max((max(r for r in (c.rate_l1, c.rate_bv) if r is not None) for c in fitted), default=None)
    D = max((c.D for c in fitted), default=None)
    return MixingReport(theta, D, curves)


@dataclass
class MinDensityReport:
    sigma: float
    argmin: tuple[int, int]
    running_min: list[float]
    drift_last20: float
    still_decreasing: bool

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "argmin": list(self.argmin), "drift_last20": self.drift_last20,
                "still_decreasing": self.still_decreasing, "running_min": self.running_min}


def min_density(env: Environment, n_max: int = 100, m: int = 4096, refinement: int = 64) -> MinDensityReport:
    """Smallest cell value of rho_n over 1 <= n <= n_max."""
    best, arg, run = math.inf, (0, 0), []
    for n, rho in enumerate(iter_densities(env, n_max, m, refinement)):
        if n == 0:
            continue
        i = int(np.argmin(rho))
        if rho[i] < best:
            best, arg = float(rho[i]), (n, i)
        run.append(best)
    ref = run[-21] if len(run) > 20 else run[0]
    drift = (ref - run[-1]) / ref if ref > 0 else math.inf
    return MinDensityReport(best, arg, run, drift, drift >= 0.01)


def ly_bound_covering(tmap: ExpandingMap) -> float:
    """L^1 coefficient for V(P f) <= V(f)/gamma + C ||f||_1 when T covers the circle."""
    c = tmap.constants(strict=False)
    return c.K1 / c.gamma ** 2


def random_bv_functions(n: int, m: int, rng: np.random.Generator, vmin=0.1, vmax=10.0):
    """Piecewise-constant grid functions with variation log-uniform in [vmin, vmax]."""
    out = []
    for _ in range(n):
        pieces = int(rng.integers(2, 40))
        cuts = np.sort(rng.choice(np.arange(1, m), size=pieces - 1, replace=False))
        vals = rng.normal(size=pieces)
        f = np.repeat(vals, np.diff(np.concatenate([[0], cuts, [m]])))
        v = variation(f)
        if v == 0:
            continue
        target = math.exp(rng.uniform(math.log(vmin), math.log(vmax)))
        f = f * (target / v) + rng.uniform(-1, 1) * target
        out.append(f)
    return out


@dataclass
class LYReport:
    contraction: float
    C_fit: float
    worst_ratio: float
    violations: int
    trials: int
    slack: float
    holdout_violations: int
    C_reference: float | None = None
    reference_violations: int | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def ly_constants(op: UlamOperator, gamma: float, K: float, trials: int = 100, seed: int = 0,
                 C_reference: float | None = None) -> LYReport:
    """Check V(Pf) <= (3/gamma) V(f) + C ||f||_1 on random BV functions.

    C is the largest excess over the trials; a violation needs to beat it by
    more than the slack ``K (V(f) + ||f||_1) / m``.  A second, fresh batch is
    scored against the same C (``holdout_violations``) and, when given, an
    analytic ``C_reference`` is scored on both batches.
    """
    from .environment import RandomSource

    m = op.m
    lam = 3.0 / gamma
    fit_set = random_bv_functions(trials, m, RandomSource(seed, (2, 0)).generator())
    hold_set = random_bv_functions(trials, m, RandomSource(seed, (2, 1)).generator())
    stats = [(variation(f), l1(f), variation(op(f))) for f in fit_set + hold_set]
    fit, hold = stats[:len(fit_set)], stats[len(fit_set):]
    C = max(0.0, max((vp - lam * vf) / nf for vf, nf, vp in fit))

    def count(rows, c):
        return int(sum(vp > lam * vf + c * nf + K * (vf + nf) / m for vf, nf, vp in rows))

    worst = max(vp / (lam * vf + C * nf) for vf, nf, vp in fit)
    slack = max(K * (vf + nf) / m for vf, nf, _ in stats)
    ref = None if C_reference is None else count(stats, C_reference)
    return LYReport(lam, C, worst, count(fit, C), len(fit), slack, count(hold, C), C_reference, ref)


def distortion_bound(consts: MapConstants) -> float:
    """K0 = prod_{n >= 0} (1 + (K1/gamma) gamma^-n), stopped once a factor rounds to 1."""
    g = consts.gamma
    if g <= 1:
        raise ValueError("distortion product needs gamma > 1")
    c = consts.K1 / g
    if c == 0:
        return 1.0
    logk, n = 0.0, 0
    while True:
        term = c / g ** n
        if 1.0 + term == 1.0:
            break
        logk += math.log1p(term)
        n += 1
    return math.exp(logk)


# ------------------------------------------------------------ covering


def _lift_arc(tmap: ExpandingMap, s: float, L: float):
    a, b = tmap.lift([s, s + L])
    return float(a % 1.0), float(b - a)


def _merge(arcs):
    """Union of (start, length) arcs; returns None if it is the whole circle."""
    segs = []
    for s, L in arcs:
        if L >= 1.0:
            return None
        if s + L <= 1.0:
            segs.append((s, s + L))
        else:
            segs.append((s, 1.0))
            segs.append((0.0, s + L - 1.0))
    segs.sort()
    out = []
    for a, b in segs:
        if out and a <= out[-1][1] + 1e-15:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    if len(out) == 1 and out[0][0] <= 1e-15 and out[0][1] >= 1 - 1e-15:
        return None
    if len(out) >= 2 and out[0][0] <= 1e-15 and out[-1][1] >= 1 - 1e-15:
        first = out.pop(0)
        out[-1] = (out[-1][0], 1.0 + first[1])
    return [(a, b - a) for a, b in out]


def _split(s, L, gate: Arc):
    """Cut arc [s, s+L) into pieces inside / outside the gate."""
    if gate.empty:
        return [], [(s, L)]
    cuts = sorted({0.0, L} | {c for c in ((gate.start - s) % 1.0, (gate.start + gate.length - s) % 1.0)
                               if 0.0 < c < L})
    ins, outs = [], []
    for a, b in zip(cuts, cuts[1:]):
        mid = (s + (a + b) / 2) % 1.0
        (ins if gate.contains(mid) else outs).append(((s + a) % 1.0, b - a))
    return ins, outs


def covering_time(env: Environment, start: float, length: float, n_max: int = 200, first_site: int = 1):
    """Smallest N with G_{first+N-1} ... G_first (I) = circle; returns (N, bound, flagged)."""
    if length <= 0:
        raise ValueError("interval must have positive length")
    gammas = [p.map.expansion_lower_bound for p in env.alphabet]
    g = min(gammas)
    bound = math.ceil(math.log(1.0 / min(length, 1.0)) / math.log(g / 3.0)) + 2 if g > 3 else None
    arcs = _merge([(start % 1.0, length)])
    if arcs is None:
        return 0, bound, False
    for N in range(1, n_max + 1):
        n = first_site + N - 1
        site, prev = env.site(n), env.site(n - 1)
        new = []
        for s, L in arcs:
            ins, outs = _split(s, L, site.gate.arc)
            for a, b in outs:
                new.append(_lift_arc(site.map, a, b))
            for a, b in ins:
                a1, b1 = _lift_arc(site.map, a, b)
                a2, b2 = _lift_arc(prev.map, a1, b1) if b1 < 1 else (0.0, 1.0)
                new.append(_lift_arc(site.map, a2, b2) if b2 < 1 else (0.0, 1.0))
        arcs = _merge(new)
        if arcs is None:
            return N, bound, bound is not None and N > bound
    return None, bound, True


# --------------------------------------------------------- operator distance


def operator_distance(P: UlamOperator, Q: UlamOperator, dictionary: dict[str, np.ndarray]) -> dict:
    """Largest L^1 and L^2 gap of P f and Q f over the dictionary (lower bounds on d_1, d_2)."""
    if P.m != Q.m:
        raise ValueError("operators live on different grids")
    d1 = d2 = 0.0
    for f in dictionary.values():
        diff = P(f) - Q(f)
        d1, d2 = max(d1, l1(diff)), max(d2, l2(diff))
    return {"d1": d1, "d2": d2}


def positive_dictionary(m: int) -> dict[str, np.ndarray]:
    """Densities of small arcs and a few smooth bumps, scaled to |f|_v <= 1."""
    x = (np.arange(m) + 0.5) / m
    raw = {"one": np.ones(m)}
    for c in np.linspace(0.05, 0.95, 10):
        raw[f"arc@{c:.2f}"] = interval_indicator(c - 0.05, c + 0.05, m)
    for k in (1, 2, 3):
        raw[f"bump{k}"] = 1 + np.cos(2 * np.pi * k * x)
    return {k: f / bv_norm(f) for k, f in raw.items()}


# ------------------------------------------------------------- stationary


@dataclass
class StationaryDensity:
    h: np.ndarray
    depth: int
    rate: float | None
    converged: bool


def stationary_density(env: Environment, n: int, k_max: int = 200, m: int = 4096, refinement: int = 64,
                       tol: float = 1e-10) -> StationaryDensity:
    """h_n as the limit over k of P_{n-1} ... P_{n-k} 1."""
    prev = None
    diffs = []
    for k in range(1, k_max + 1):
        h = np.ones(m)
        for s in range(n - k, n):
            h = site_operator(env, s, m, refinement)(h)
        if prev is not None:
            d = bv_norm(h - prev)
            diffs.append(d)
            if d < tol:
                rate = _fit_rate(np.array(diffs), floor=tol / 10, min_points=3)[0]
                return StationaryDensity(h, k, rate, True)
        prev = h
    rate = _fit_rate(np.array(diffs), floor=tol / 10, min_points=3)[0] if diffs else None
    return StationaryDensity(prev, k_max, rate, False)


# ------------------------------------------------------------ decomposition


@dataclass
class MartingaleDecomposition:
    H: list[np.ndarray]
    psi: list[np.ndarray]
    rho: list[np.ndarray]
    psi_norms: list[float]
    H_bv_sup: float
    martingale_defect: float
    sigma: float

    def to_dict(self) -> dict:
        return {"psi_l2": self.psi_norms, "H_bv_sup": self.H_bv_sup, "martingale_defect": self.martingale_defect,
                "sigma": self.sigma}


def coboundary(env: Environment, observables: Callable[[int, np.ndarray], np.ndarray], n: int,
               m: int = 4096, refinement: int = 64, sigma: float | None = None) -> MartingaleDecomposition:
    """psi_k = f_k + H_k - (H_{k+1} o G_k) with H_k = Q_k / rho_k.

    ``Q_0 = 0`` and ``Q_{k+1} = P_k(Q_k + f_k rho_k)`` sums the pushed-forward
    series exactly; ``observables(k, rho_k)`` must return a grid function
    centred against ``rho_k``.  ``sigma`` is the verified density minimum.
    """
    if sigma is None:
        sigma = min_density(env, n + 1, m, refinement).sigma
    if not sigma > 0:
        raise MinorationError("density lower bound is not positive")
    Q = np.zeros(m)
    H, rhos, fs = [], [], []
    rho = np.ones(m)
    for k in range(n + 1):
        if rho.min() < sigma / 2:
            raise MinorationError(f"rho_{k} dips to {rho.min():.3g} < sigma/2")
        H.append(Q / rho)
        rhos.append(rho)
        if k == n:
            break
        f = np.asarray(observables(k, rho), dtype=float)
        if abs(np.mean(f * rho)) > 1e-9 * max(1.0, l1(f)):
            raise ValueError(f"observable at step {k} is not centred against rho_{k}")
        fs.append(f)
        op = site_operator(env, k, m, refinement)
        Q = op(Q + f * rho)
        rho = op(rho)
    psi = [fs[k] + H[k] - site_operator(env, k, m, refinement).koopman(H[k + 1]) for k in range(n)]
    norms = [float(np.sqrt(np.mean(p * p * r))) for p, r in zip(psi, rhos)]
    # exact operators give P_k(psi_k rho_k) = 0; on the grid the cell-averaged
    # composition leaves a defect of order |H|_v / m
    defect = max((float(np.max(np.abs(site_operator(env, k, m, refinement)(psi[k] * rhos[k]))))
                  for k in range(n)), default=0.0)
    return MartingaleDecomposition(H, psi, rhos, norms, max(bv_norm(h) for h in H), defect, float(sigma))


def trajectory_residual(env: Environment, dec: MartingaleDecomposition, observables: list[np.ndarray],
                        x0: np.ndarray, n: int) -> dict:
    """|sum f_k(x_k) - sum psi_k(x_k) - H_n(x_n) + H_0(x_0)| along true orbits."""
    from .walk import kernel, _induced

    m = len(dec.H[0])
    k_ = kernel(env)
    x = np.array(x0, dtype=float)
    acc = np.zeros(len(x))
    cell = np.minimum((x * m).astype(np.int64), m - 1)
    h0 = dec.H[0][cell]
    for k in range(n):
        cell = np.minimum((x * m).astype(np.int64), m - 1)
        acc += observables[k][cell] - dec.psi[k][cell]
        x, _ = _induced(k_, x, k)
    cell = np.minimum((x * m).astype(np.int64), m - 1)
    res = np.abs(acc - dec.H[n][cell] + h0)
    return {"l1": float(res.mean()), "max": float(res.max())}


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
