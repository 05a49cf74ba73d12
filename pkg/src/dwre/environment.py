"""Site sequences of (map, gate) pairs.

An :class:`EnvironmentSpec` says how sites are chosen from a finite alphabet
of :class:`~dwre.circle_maps.SitePair`; :func:`realize` binds it to a seed.
Sites are addressed by alphabet index so walkers and operator caches can work
with small integer tables instead of pair objects.

Randomness comes from :class:`RandomSource`, a (seed, stream) pair backed by
numpy's Philox generator.  iid sites are drawn in fixed blocks of
``BLOCK`` sites whose stream id is the block number, so a site's value never
depends on the window size or on the order in which sites were queried.
"""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .circle_maps import ConditionError, MapConstants, SitePair, build_paper_example, check_bgeom

SCHEMA_VERSION = 1
BLOCK = 4096
KINDS = ("constant", "periodic", "iid", "counterexample", "explicit")


class SpecError(ValueError):
    """Invalid environment description; the message names the offending field."""


class WindowError(IndexError):
    """A site above the realized window was requested."""


@dataclass(frozen=True)
class RandomSource:
    """Counter-style splittable stream: equal (seed, stream) give equal draws."""

    seed: int
    stream: tuple[int, ...] = ()

    def spawn(self, i: int) -> "RandomSource":
        return RandomSource(self.seed, self.stream + (int(i),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def counterexample_gate(n: int) -> int:
    """0 for the first gate (block index k = floor(sqrt n) even), 1 otherwise."""
    if n < 0:
        raise ValueError("counterexample sites start at 0")
    return math.isqrt(n) & 1


def _zigzag(b: int) -> int:
    return 2 * b if b >= 0 else -2 * b - 1


@dataclass(frozen=True)
class EnvironmentSpec:
    """How sites are drawn.

    ``pattern`` holds the period for ``periodic`` and the full site list (one
    entry per site of the window, starting at ``window[0]``) for ``explicit``;
    both are alphabet indices.  ``counterexample`` uses alphabet entries 0 and
    1 as the two block types.
    """

    kind: str
    alphabet: tuple[SitePair, ...]
    window: tuple[int, int]
    weights: tuple[float, ...] | None = None
    pattern: tuple[int, ...] | None = None
    constants: MapConstants | None = None

    def __post_init__(self):
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        object.__setattr__(self, "window", (int(self.window[0]), int(self.window[1])))
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.pattern is not None:
            object.__setattr__(self, "pattern", tuple(int(p) for p in self.pattern))
        self.check()

    def check(self) -> None:
        if self.kind not in KINDS:
            raise SpecError(f"kind: expected one of {KINDS}, got {self.kind!r}")
        m = len(self.alphabet)
        if m == 0:
            raise SpecError("alphabet: must not be empty")
        lo, hi = self.window
        if not (lo <= 0 < hi):
            raise SpecError(f"window: need lo <= 0 < hi, got [{lo}, {hi}]")
        if self.kind == "iid":
            w = self.weights
            if w is None or len(w) != m:
                raise SpecError(f"weights: need {m} entries, one per alphabet pair")
            if any(not (x > 0) for x in w):
                raise SpecError("weights: every weight must be strictly positive")
            if abs(sum(w) - 1.0) > 1e-9:
                raise SpecError(f"weights: must sum to 1, got {sum(w):.12g}")
        if self.kind == "counterexample" and m != 2:
            raise SpecError("alphabet: counterexample needs exactly two pairs")
        if self.kind in ("periodic", "explicit"):
            p = self.pattern
            if not p:
                raise SpecError(f"pattern: required for kind {self.kind!r}")
            bad = [i for i, v in enumerate(p) if not (0 <= v < m)]
            if bad:
                raise SpecError(f"pattern[{bad[0]}]: index {p[bad[0]]} outside alphabet of size {m}")
            if self.kind == "explicit" and len(p) != hi - lo + 1:
                raise SpecError(f"pattern: explicit kind needs {hi - lo + 1} entries for window [{lo}, {hi}]")

    def validate_pairs(self, strict: bool = True):
        """(BGeom)/(SmallGates) verdicts of every alphabet pair."""
        return check_bgeom(self.alphabet, self.constants, strict=strict)

    def with_window(self, lo: int, hi: int) -> "EnvironmentSpec":
        if self.kind == "explicit":
            raise SpecError("window: explicit environments cannot be resized")
        return EnvironmentSpec(self.kind, self.alphabet, (lo, hi), self.weights, self.pattern, self.constants)

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "alphabet": [p.to_dict() for p in self.alphabet],
            "window": list(self.window),
        }
        if self.weights is not None:
            d["weights"] = list(self.weights)
        if self.pattern is not None:
            d["pattern"] = list(self.pattern)
        if self.constants is not None:
            c = self.constants
            d["constants"] = {"gamma": c.gamma, "K": c.K, "K1": c.K1, "delta0": c.delta0, "c": c.c}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentSpec":
        if not isinstance(d, dict):
            raise SpecError("<root>: expected an object")
        ver = d.get("schema_version", SCHEMA_VERSION)
        if ver != SCHEMA_VERSION:
            raise SpecError(f"schema_version: unsupported version {ver!r}")
        for key in ("kind", "alphabet", "window"):
            if key not in d:
                raise SpecError(f"{key}: missing required field")
        alphabet = []
        for i, p in enumerate(d["alphabet"]):
            try:
                alphabet.append(SitePair.from_dict(p))
            except (KeyError, TypeError, ValueError) as exc:
                raise SpecError(f"alphabet[{i}]: {exc}") from exc
        w = d["window"]
        if not (isinstance(w, (list, tuple)) and len(w) == 2):
            raise SpecError("window: expected [lo, hi]")
        consts = None
        if "constants" in d:
            try:
                consts = MapConstants(**d["constants"])
            except (TypeError, ConditionError) as exc:
                raise SpecError(f"constants: {exc}") from exc
        return cls(d["kind"], tuple(alphabet), (w[0], w[1]), d.get("weights"), d.get("pattern"), consts)


class Environment:
    """A spec bound to a seed.  Sites are realized lazily and memoized.

    Sites below ``window[0]`` reuse the pair at ``window[0]``: the walk
    started at 0 never looks left of site -1, so those sites cannot change its
    law.  Sites above ``window[1]`` raise :class:`WindowError`.
    """

    def __init__(self, spec: EnvironmentSpec, seed: int = 0):
        self.spec = spec
        self.seed = int(seed)
        self._blocks: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()
        self._cache: dict = {}

    @property
    def window(self) -> tuple[int, int]:
        return self.spec.window

    @property
    def alphabet(self) -> tuple[SitePair, ...]:
        return self.spec.alphabet

    def _iid_block(self, b: int) -> np.ndarray:
        blk = self._blocks.get(b)
        if blk is None:
            with self._lock:
                blk = self._blocks.get(b)
                if blk is None:
                    rng = RandomSource(self.seed, (0, _zigzag(b))).generator()
                    cdf = np.cumsum(self.spec.weights)
                    cdf[-1] = 1.0
                    u = rng.random(BLOCK)
                    blk = np.searchsorted(cdf, u, side="right").astype(np.int64)
                    self._blocks[b] = blk
        return blk

    def indices(self, start: int, stop: int) -> np.ndarray:
        """Alphabet indices of sites ``start .. stop - 1``."""
        lo, hi = self.window
        if stop - 1 > hi:
            raise WindowError(f"site {stop - 1} is above the window [{lo}, {hi}]")
        n = np.maximum(np.arange(start, stop, dtype=np.int64), lo)
        kind = self.spec.kind
        if kind == "constant":
            return np.zeros(n.shape, dtype=np.int64)
        if kind == "periodic":
            p = np.asarray(self.spec.pattern, dtype=np.int64)
            return p[np.remainder(n, len(p))]
        if kind == "explicit":
            return np.asarray(self.spec.pattern, dtype=np.int64)[n - lo]
        if kind == "counterexample":
            k = np.floor(np.sqrt(np.maximum(n, 0).astype(float))).astype(np.int64)
            # guard the float sqrt at perfect squares
            k -= (k * k > np.maximum(n, 0)).astype(np.int64)
            k += ((k + 1) * (k + 1) <= np.maximum(n, 0)).astype(np.int64)
            return k & 1
        out = np.empty(n.shape, dtype=np.int64)
        if n.size == 0:
            return out
        blocks = np.floor_divide(n, BLOCK)
        for b in np.unique(blocks):
            sel = blocks == b
            out[sel] = self._iid_block(int(b))[n[sel] - b * BLOCK]
        return out

    def index(self, n: int) -> int:
        return int(self.indices(n, n + 1)[0])

    def site(self, n: int) -> SitePair:
        return self.alphabet[self.index(n)]

    def table(self) -> np.ndarray:
        """Alphabet index of every window site, ``window[0]`` first."""
        lo, hi = self.window
        return self.indices(lo, hi + 1)

    def memo(self, key, build):
        """Thread-safe per-environment cache for derived objects."""
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        val = build()
        with self._lock:
            return self._cache.setdefault(key, val)

    def to_dict(self) -> dict:
        return {**self.spec.to_dict(), "seed": self.seed, "sites": self.table().tolist()}


def realize(spec: EnvironmentSpec, seed: int = 0) -> Environment:
    return Environment(spec, seed)


def serialize(env: Environment, path: str | Path) -> None:
    Path(path).write_text(json.dumps(env.to_dict(), indent=1))


def deserialize(path: str | Path) -> Environment:
    """Load an environment file, checking any stored site table against the seed."""
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"line {exc.lineno}: {exc.msg}") from exc
    return from_dict(d)


def from_dict(d: dict) -> Environment:
    spec = EnvironmentSpec.from_dict(d)
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or not (0 <= seed < 2**64):
        raise SpecError(f"seed: expected an unsigned 64-bit integer, got {seed!r}")
    env = Environment(spec, seed)
    if "sites" in d:
        stored = np.asarray(d["sites"], dtype=np.int64)
        if not np.array_equal(stored, env.table()):
            raise SpecError("sites: stored table does not match the one regenerated from seed")
    return env


def constant_spec(pair: SitePair, window=(-1, 10_000), constants=None) -> EnvironmentSpec:
    return EnvironmentSpec("constant", (pair,), window, constants=constants)


def iid_spec(pairs: Sequence[SitePair], weights: Sequence[float], window=(-1, 10_000),
             constants=None) -> EnvironmentSpec:
    return EnvironmentSpec("iid", tuple(pairs), window, weights=tuple(weights), constants=constants)


def counterexample_spec(first: SitePair, second: SitePair, window=(-1, 10_000)) -> EnvironmentSpec:
    return EnvironmentSpec("counterexample", (first, second), window)


def relaxed_pair(width: float = 0.2, center: float = 0.25, amplitude: float = 0.9, phase: float = 0.25,
                 degree: int = 2) -> SitePair:
    """Wide-gate pair for the relaxed regime (gamma > 1).

    With the defaults the gate [0.15, 0.35) satisfies (gt-1) and any gate
    with the same centre and a smaller width is nested inside it, so pairs
    differing only in width can be mixed freely.
    """
    from .circle_maps import ExpandingMap, Gate

    return SitePair(ExpandingMap(degree, amplitude, phase), Gate(center, width))


def paper_example_constants(delta0: float = 0.005, c: float = 0.002, amplitude: float = 0.3,
                            degree: int = 4) -> MapConstants:
    a = abs(amplitude)
    return MapConstants(gamma=degree - a, K=degree + a, K1=2 * math.pi * a, delta0=delta0, c=c)


def paper_example_spec(delta0: float = 0.005, N: int = 5, amplitudes: Sequence[float] = (0.3,),
                       c: float = 0.002, window=(-1, 10_000), weights=None) -> EnvironmentSpec:
    """Fixed-point construction with degree-4 maps; iid when several amplitudes are given."""
    consts = paper_example_constants(delta0, c, max(abs(a) for a in amplitudes))
    pairs = build_paper_example(consts, N, len(amplitudes), amplitudes=list(amplitudes))
    if len(pairs) == 1:
        return constant_spec(pairs[0], window, consts)
    w = weights or [1.0 / len(pairs)] * len(pairs)
    return iid_spec(pairs, w, window, consts)


def _srw_spec(window):
    from .circle_maps import ExpandingMap, Gate

    return constant_spec(SitePair(ExpandingMap(2, 0.0, 0.0), Gate(0.25, 0.5)), window)


BUILTINS = {
    "srw": _srw_spec,
    "paper-example": lambda window: paper_example_spec(window=window),
    "relaxed": lambda window: constant_spec(relaxed_pair(0.2), window),
    "nested-iid": lambda window: iid_spec((relaxed_pair(0.2), relaxed_pair(0.1)), (0.5, 0.5), window),
    "counterexample": lambda window: counterexample_spec(relaxed_pair(0.0), relaxed_pair(0.2), window),
}


def builtin_spec(name: str, window=(-1, 10_000)) -> EnvironmentSpec:
    """Named environments used by the command line and the acceptance runs.

    ``srw`` is the doubling map with a half-circle gate; ``relaxed`` and
    ``nested-iid`` use the wide gates of :func:`relaxed_pair`.
    """
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise SpecError(f"env: unknown builtin {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(window)


def extend(env: Environment, hi: int) -> Environment:
    """The same realization with the window raised to at least ``hi``.

    Site values do not depend on the window, so the sites already present
    are unchanged.
    """
    lo, old = env.window
    if hi <= old:
        return env
    return Environment(env.spec.with_window(lo, hi), env.seed)
