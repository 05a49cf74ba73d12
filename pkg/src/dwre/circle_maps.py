"""Expanding circle maps, gate arcs and the structural checks on a site window.

The built-in family is

    T(x) = d*x + a/(2*pi) * sin(2*pi*(x + phi)) + h(x)   (mod 1)

where ``h`` is a finite sum of :class:`Perturbation` terms.  With ``phi = 0``
and ``h = 0`` every member fixes ``x = 0``.

All arc computations use endpoint arithmetic on the lifted (increasing) map
and return a three-valued :class:`Verdict`.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
EPS_CHECK = 1e-9


class ConditionError(ValueError):
    """Raised when a map or gate violates a hard structural requirement."""


class ArcWrapError(ConditionError):
    """Raised when the image of an arc would cover the whole circle."""


class Verdict(str, enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    INCONCLUSIVE = "inconclusive"

    def __and__(self, other: "Verdict") -> "Verdict":
        if Verdict.FAIL in (self, other):
            return Verdict.FAIL
        if Verdict.INCONCLUSIVE in (self, other):
            return Verdict.INCONCLUSIVE
        return Verdict.PASS

    @property
    def ok(self) -> bool:
        return self is Verdict.PASS


def wrap(y):
    """Reduce to [0, 1).  Guards the ``y - floor(y) == 1.0`` rounding case."""
    y = np.asarray(y, dtype=float)
    r = y - np.floor(y)
    return np.where(r >= 1.0, 0.0, r)


@dataclass(frozen=True)
class Perturbation:
    """Smooth additive term ``amplitude/(2 pi k)^2 * sin(2 pi k (x + phase))``.

    The scaling makes ``max(|h|, |h'|, Lip(h')) == |amplitude|`` for one term,
    so ``amplitude`` is directly its C^{1+Lip} size.
    """

    amplitude: float
    frequency: int = 1
    phase: float = 0.0

    def __post_init__(self):
        if int(self.frequency) != self.frequency or self.frequency < 1:
            raise ConditionError("perturbation frequency must be a positive integer")

    def value(self, x):
        k = TWO_PI * self.frequency
        return (self.amplitude / (k * k)) * np.sin(k * (np.asarray(x) + self.phase))

    def derivative(self, x):
        k = TWO_PI * self.frequency
        return (self.amplitude / k) * np.cos(k * (np.asarray(x) + self.phase))

    @property
    def sup(self) -> float:
        return abs(self.amplitude) / (TWO_PI * self.frequency) ** 2

    @property
    def derivative_sup(self) -> float:
        return abs(self.amplitude) / (TWO_PI * self.frequency)

    @property
    def derivative_lipschitz(self) -> float:
        return abs(self.amplitude)


@dataclass(frozen=True)
class MapConstants:
    gamma: float
    K: float
    K1: float
    delta0: float = 0.0
    c: float = 1.0

    def __post_init__(self):
        if not (self.gamma <= self.K + 1e-15):
            raise ConditionError(f"gamma={self.gamma} exceeds K={self.K}")
        if self.K1 < 0:
            raise ConditionError("K1 must be non-negative")
        if not (0 < self.c <= 1):
            raise ConditionError("c must lie in (0, 1]")


@dataclass(frozen=True)
class ExpandingMap:
    degree: int
    amplitude: float = 0.0
    phase: float = 0.0
    perturbation: tuple[Perturbation, ...] = ()

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 1:
            raise ConditionError("degree must be a positive integer")
        object.__setattr__(self, "perturbation", tuple(self.perturbation))
        if self.expansion_lower_bound <= 0:
            raise ConditionError("map must be increasing: degree - |amplitude| - perturbation <= 0")

    def lift(self, x):
        """Lifted map on the real line; ``lift(x + 1) == lift(x) + degree``."""
        x = np.asarray(x, dtype=float)
        y = self.degree * x + (self.amplitude / TWO_PI) * np.sin(TWO_PI * (x + self.phase))
        for p in self.perturbation:
            y = y + p.value(x)
        return y

    def __call__(self, x):
        return wrap(self.lift(x))

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        dy = self.degree + self.amplitude * np.cos(TWO_PI * (x + self.phase))
        for p in self.perturbation:
            dy = dy + p.derivative(x)
        return dy

    @property
    def _pert_d(self) -> float:
        return sum(p.derivative_sup for p in self.perturbation)

    @property
    def expansion_lower_bound(self) -> float:
        return self.degree - abs(self.amplitude) - self._pert_d

    def constants(self, strict: bool = True, delta0: float = 0.0, c: float = 1.0) -> MapConstants:
        """Analytic (gamma, K, K1) for the closed-form family.

        Strict mode enforces gamma > 3; relaxed mode only gamma > 1.
        """
        gamma = self.expansion_lower_bound
        K = self.degree + abs(self.amplitude) + self._pert_d
        K1 = TWO_PI * abs(self.amplitude) + sum(p.derivative_lipschitz for p in self.perturbation)
        floor = 3.0 if strict else 1.0
        if gamma <= floor:
            raise ConditionError(f"gamma={gamma:.6g} <= {floor:g} ({'strict' if strict else 'relaxed'} mode)")
        return MapConstants(gamma=gamma, K=K, K1=K1, delta0=delta0, c=c)

    def to_dict(self) -> dict:
        d = {"degree": int(self.degree), "amplitude": float(self.amplitude), "phase": float(self.phase)}
        if self.perturbation:
            d["perturbation"] = [
                {"amplitude": p.amplitude, "frequency": p.frequency, "phase": p.phase}
                for p in self.perturbation
            ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExpandingMap":
        pert = tuple(Perturbation(**p) for p in d.get("perturbation", ()))
        return cls(int(d["degree"]), float(d.get("amplitude", 0.0)), float(d.get("phase", 0.0)), pert)


def evaluate(tmap: ExpandingMap, x: float) -> float:
    return float(tmap(x))


def derivative(tmap: ExpandingMap, x: float) -> float:
    return float(tmap.derivative(x))


def constants(tmap: ExpandingMap, strict: bool = True) -> MapConstants:
    return tmap.constants(strict=strict)


# ---------------------------------------------------------------- arcs / gates


@dataclass(frozen=True)
class Arc:
    """Half-open arc ``[start, start + length)`` on the circle."""

    start: float
    length: float

    def __post_init__(self):
        if self.length < 0:
            raise ConditionError("arc length must be non-negative")
        object.__setattr__(self, "start", float(wrap(self.start)))

    @property
    def empty(self) -> bool:
        return self.length == 0.0

    def contains(self, x):
        if self.length >= 1.0:
            return np.ones_like(np.asarray(x, dtype=float), dtype=bool)
        return np.remainder(np.asarray(x, dtype=float) - self.start, 1.0) < self.length


@dataclass(frozen=True)
class Gate:
    """Backward gate ``[center - width/2, center + width/2)`` mod 1."""

    center: float
    width: float

    def __post_init__(self):
        if not (0.0 <= self.width < 1.0):
            raise ConditionError("gate width must lie in [0, 1)")
        object.__setattr__(self, "center", float(wrap(self.center)))

    @property
    def lo(self) -> float:
        return float(wrap(self.center - self.width / 2.0))

    @property
    def arc(self) -> Arc:
        return Arc(self.lo, self.width)

    def contains(self, x):
        return self.arc.contains(x)

    def to_dict(self) -> dict:
        return {"center": self.center, "width": self.width}


@dataclass(frozen=True)
class SitePair:
    map: ExpandingMap
    gate: Gate

    def to_dict(self) -> dict:
        return {"family": self.map.to_dict(), "gate": self.gate.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SitePair":
        return cls(ExpandingMap.from_dict(d["family"]), Gate(**d["gate"]))


def image_interval(tmap: ExpandingMap, arc: Arc) -> Arc:
    """Image of an arc through the increasing lift.  Raises if it wraps."""
    if arc.empty:
        return arc
    a, b = tmap.lift([arc.start, arc.start + arc.length])
    if b - a >= 1.0:
        raise ArcWrapError(f"image of arc of length {arc.length:.3g} covers the circle")
    return Arc(float(a), float(b - a))


def arc_gap(a: Arc, b: Arc) -> float:
    """Signed clearance between two arcs; negative means they overlap."""
    if a.empty or b.empty:
        return math.inf
    d = (b.start - a.start) % 1.0
    return min(d - a.length, 1.0 - d - b.length)


def disjoint_verdict(a: Arc, b: Arc, margin: float = EPS_CHECK) -> tuple[Verdict, float]:
    g = arc_gap(a, b)
    if g > margin:
        return Verdict.PASS, g
    if g < -margin:
        return Verdict.FAIL, g
    return Verdict.INCONCLUSIVE, g


@dataclass
class ConditionReport:
    bgeom_ok: Verdict = Verdict.PASS
    gate_size_ok: Verdict = Verdict.PASS
    gt1_ok: Verdict = Verdict.PASS
    gt2_ok: Verdict = Verdict.PASS
    gt2_depth_checked: int = 0
    sites_checked: int = 0
    min_gap: float = math.inf
    witnesses: list = field(default_factory=list)

    @property
    def verdict(self) -> Verdict:
        return self.bgeom_ok & self.gate_size_ok & self.gt1_ok & self.gt2_ok

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "bgeom_ok": self.bgeom_ok.value,
            "gate_size_ok": self.gate_size_ok.value,
            "gt1_ok": self.gt1_ok.value,
            "gt2_ok": self.gt2_ok.value,
            "gt2_depth_checked": self.gt2_depth_checked,
            "sites_checked": self.sites_checked,
            "min_gap": None if math.isinf(self.min_gap) else self.min_gap,
            "witnesses": self.witnesses,
        }


def verify_gt1(site_n: SitePair, site_prev: SitePair, margin: float = EPS_CHECK):
    """Check T_n(W_n) misses W_{n-1} and T_{n-1} T_n (W_n) misses W_n.

    Returns ``(verdict, witness)`` where ``witness`` is None on a pass.
    """
    w = site_n.gate.arc
    if w.empty:
        return Verdict.PASS, None
    try:
        a1 = image_interval(site_n.map, w)
        v1, g1 = disjoint_verdict(a1, site_prev.gate.arc, margin)
        a2 = image_interval(site_prev.map, a1)
        v2, g2 = disjoint_verdict(a2, w, margin)
    except ArcWrapError as exc:
        return Verdict.INCONCLUSIVE, {"condition": "gt1", "reason": str(exc)}
    v = v1 & v2
    if v.ok:
        return v, None
    bad = (1, a1, g1) if not v1.ok else (2, a2, g2)
    return v, {
        "condition": "gt1",
        "step": bad[0],
        "image": [bad[1].start, bad[1].length],
        "gap": bad[2],
    }


def _gt2_chain(sites: Sequence[SitePair], N: int, margin: float):
    """``sites`` = (site n-1, site n, ..., site n+N).  Returns (verdict, min gap, witness)."""
    prev, cur = sites[0], sites[1]
    v, wit = verify_gt1(cur, prev, margin)
    if not v.ok:
        return v, -math.inf, wit
    if cur.gate.arc.empty:
        return Verdict.PASS, math.inf, None
    arc = image_interval(prev.map, image_interval(cur.map, cur.gate.arc))
    maps = [cur.map] + [s.map for s in sites[2:]]
    gmin = math.inf
    for k in range(1, N + 1):
        try:
            arc = image_interval(maps[k - 1], arc)
        except ArcWrapError as exc:
            return Verdict.INCONCLUSIVE, gmin, {"condition": "gt2", "depth": k, "reason": str(exc)}
        vk, g = disjoint_verdict(arc, sites[k + 1].gate.arc, margin)
        gmin = min(gmin, g)
        if not vk.ok:
            return vk, g, {"condition": "gt2", "depth": k, "image": [arc.start, arc.length], "gap": g}
    return Verdict.PASS, gmin, None


def verify_gt2(env, N: int, sites: Iterable[int] | None = None, margin: float = EPS_CHECK) -> ConditionReport:
    """(gt-1) and depth-N (gt-2) over a window of an environment.

    ``env`` needs ``site(n)``, ``index(n)`` and ``window``.  Sites whose
    local alphabet pattern was already checked are skipped.
    """
    lo, hi = env.window
    if sites is None:
        sites = range(lo + 1, hi - N + 1)
    rep = ConditionReport(gt2_depth_checked=N)
    seen: dict[tuple, tuple] = {}
    for n in sites:
        key = tuple(env.index(m) for m in range(n - 1, n + N + 1))
        if key not in seen:
            chain = [env.site(m) for m in range(n - 1, n + N + 1)]
            if N == 0:
                v, wit = verify_gt1(chain[1], chain[0], margin)
                g = math.inf
            else:
                v, g, wit = _gt2_chain(chain, N, margin)
            seen[key] = (v, g, wit)
        v, g, wit = seen[key]
        rep.sites_checked += 1
        rep.min_gap = min(rep.min_gap, g)
        if not v.ok:
            cond = wit["condition"] if wit else "gt2"
            if cond == "gt1":
                rep.gt1_ok = rep.gt1_ok & v
            rep.gt2_ok = rep.gt2_ok & v
            if len(rep.witnesses) < 20:
                rep.witnesses.append({"site": n, **(wit or {}), "verdict": v.value})
    return rep


def check_bgeom(pairs: Sequence[SitePair], consts: MapConstants | None, strict: bool = True):
    """Per-pair (BGeom) and (SmallGates) verdicts."""
    bg, gs, wits = Verdict.PASS, Verdict.PASS, []
    for i, p in enumerate(pairs):
        try:
            mc = p.map.constants(strict=strict)
        except ConditionError as exc:
            bg = Verdict.FAIL
            wits.append({"pair": i, "condition": "bgeom", "reason": str(exc)})
            continue
        if consts is not None:
            if mc.gamma < consts.gamma - 1e-12 or mc.K > consts.K + 1e-12 or mc.K1 > consts.K1 + 1e-12:
                bg = Verdict.FAIL
                wits.append({"pair": i, "condition": "bgeom", "gamma": mc.gamma, "K": mc.K, "K1": mc.K1})
            if consts.delta0 > 0:
                w = p.gate.width
                if not (consts.c * consts.delta0 - 1e-15 <= w <= consts.delta0 + 1e-15):
                    gs = Verdict.FAIL
                    wits.append({"pair": i, "condition": "small_gates", "width": w})
    return bg, gs, wits


def verify_model_b(sites: Sequence[SitePair], reference: SitePair, delta0: float, grid: int = 2**16):
    """Model B closeness check.

    Returns ``(ok, max_deviation, worst)`` where deviations are the sampled
    C^{1+Lip} distance of maps and the Hausdorff distance of gate arcs.
    """
    ref_ok = True
    w = reference.gate.arc
    try:
        a1 = image_interval(reference.map, w)
        a2 = image_interval(reference.map, a1)
        ref_ok = disjoint_verdict(a1, w)[0].ok and disjoint_verdict(a2, w)[0].ok
    except ArcWrapError:
        ref_ok = False
    x = (np.arange(grid) + 0.5) / grid
    f_ref, d_ref = reference.map.lift(x), reference.map.derivative(x)
    worst, worst_dev = None, 0.0
    for i, s in enumerate(sites):
        if s.map.degree != reference.map.degree:
            return False, math.inf, {"site": i, "reason": "degree mismatch"}
        df = s.map.lift(x) - f_ref
        dd = s.map.derivative(x) - d_ref
        lip = float(np.max(np.abs(np.diff(np.append(dd, dd[0])))) * grid)
        c1 = max(float(np.max(np.abs(df))), float(np.max(np.abs(dd))), lip)
        haus = max(_circ_dist(s.gate.lo, reference.gate.lo),
                   _circ_dist(s.gate.lo + s.gate.width, reference.gate.lo + reference.gate.width))
        dev = max(c1, haus)
        if dev > worst_dev:
            worst_dev, worst = dev, {"site": i, "map_distance": c1, "gate_hausdorff": haus}
    return ref_ok and worst_dev <= delta0, worst_dev, worst


def _circ_dist(a: float, b: float) -> float:
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


# ----------------------------------------------------------- gate placement


def _gap_vec(s1, l1, s2, l2):
    d = np.remainder(s2 - s1, 1.0)
    return np.minimum(d - l1, 1.0 - d - l2)


def admissible_centers(maps: Sequence[ExpandingMap], width: float, N: int, centers: np.ndarray) -> np.ndarray:
    """Minimum clearance of (gt-1)/(gt-2_N) over all alphabet sequences.

    Every site carries a gate of the same ``width`` centred at the candidate
    point, so each image in the chain T_n, T_{n-1}, T_n, T_{n+1}, ...,
    T_{n+N-1} is compared with that one arc.  ``-inf`` marks a wrapped image.
    """
    lo = np.remainder(centers - width / 2.0, 1.0)
    best = np.full(centers.shape, np.inf)
    for seq in itertools.product(range(len(maps)), repeat=max(N + 1, 2)):
        if N == 0:
            chain = [seq[1], seq[0]]
        else:
            chain = [seq[1], seq[0], seq[1]] + list(seq[2:N + 1])
        s, ln = lo.copy(), np.full(centers.shape, float(width))
        for j in chain:
            a = maps[j].lift(s)
            b = maps[j].lift(s + ln)
            s, ln = np.remainder(a, 1.0), b - a
            g = _gap_vec(s, ln, lo, width)
            best = np.minimum(best, np.where(ln >= 1.0, -np.inf, g))
    return best


def find_gate(maps: Sequence[ExpandingMap], widths: Iterable[float], N: int,
              centers: np.ndarray | None = None, min_gap: float = 0.0) -> Gate:
    """Largest admissible width (in the given order) and its best-clearance centre."""
    if centers is None:
        centers = (np.arange(1, 20000) / 20000.0)
    widths = list(widths)

    def attempt(w):
        gaps = admissible_centers(maps, w, N, centers)
        i = int(np.argmax(gaps))
        return (Gate(float(centers[i]), float(w)) if gaps[i] > max(min_gap, EPS_CHECK) else None)

    # shrinking a gate about a fixed centre only shrinks every image, so the
    # admissible widths form a tail of the descending list
    lo, hi = 0, len(widths) - 1
    found = attempt(widths[hi]) if widths else None
    if found is None:
        raise ConditionError("no admissible gate position; try a smaller delta0 or depth N")
    while lo < hi:
        mid = (lo + hi) // 2
        g = attempt(widths[mid])
        if g is None:
            lo = mid + 1
        else:
            hi, found = mid, g
    return found


def build_paper_example(consts: MapConstants, N: int, num_distinct_pairs: int = 1, degree: int = 4,
                        amplitudes: Sequence[float] | None = None, strict: bool = True) -> list[SitePair]:
    """Maps fixing 0 with a shared gate near a point whose orbit avoids it.

    Gate widths are searched downward from ``delta0`` to ``c * delta0``.
    """
    if consts.delta0 <= 0:
        raise ConditionError("delta0 must be positive")
    if amplitudes is None:
        amax = max(0.0, min(degree - consts.gamma, consts.K - degree))
        amplitudes = np.linspace(0.0, 0.8 * amax, num_distinct_pairs) if num_distinct_pairs > 1 else [0.0]
    if len(amplitudes) != num_distinct_pairs:
        raise ConditionError("need one amplitude per distinct pair")
    maps = [ExpandingMap(degree, float(a), 0.0) for a in amplitudes]
    for mp in maps:
        mc = mp.constants(strict=strict)
        if mc.gamma < consts.gamma - 1e-12 or mc.K > consts.K + 1e-12:
            raise ConditionError(f"map {mp} violates the requested (gamma, K)")
    hi, lo_w = consts.delta0, consts.c * consts.delta0
    widths = hi * 0.9 ** np.arange(0, 400)
    widths = widths[widths >= lo_w * (1 - 1e-12)]
    if len(widths) == 0 or widths[-1] > lo_w * (1 + 1e-9):
        widths = np.append(widths, lo_w)
    try:
        gate = find_gate(maps, widths, N)
    except ConditionError as exc:
        raise ConditionError(
            f"no admissible gate for delta0={consts.delta0}, N={N}; a smaller delta0 "
            f"(or c) is needed") from exc
    return [SitePair(mp, gate) for mp in maps]


def wrap_depth(gamma: float, width: float) -> int:
    """Number of map applications after which an arc of ``width`` must wrap."""
    if width <= 0:
        return math.inf
    return max(0, math.ceil(math.log(1.0 / width) / math.log(gamma)))
