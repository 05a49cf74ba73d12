"""Verdicts: CLT tests, variance growth, the scale function, drifts, and the
non-normality certificate for the square-block environment.

KS thresholds are calibrated on the simple random walk (exact binomial law)
at the same ``n`` and sample count, since the limit theorems come without
rates.  Scale tables and drift series are cached on the environment.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .circle_maps import SitePair
from .environment import Environment, EnvironmentSpec, RandomSource, realize
from .transfer import gate_mass, iter_densities, site_operator
from .walk import chunk_map, chunked, hitting_sums, hitting_times, initial_points, positions


class DegenerateError(ValueError):
    """Zero variance or an otherwise undefined statistic."""


# ----------------------------------------------------------------- KS


def studentize(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    sd = x.std()
    if not sd > 0:
        raise DegenerateError("samples have zero variance")
    s = (x - x.mean()) / sd
    # second pass removes the residual rounding in the mean and scale
    s = s - s.mean()
    return s / s.std()


def ks_normal(samples) -> float:
    """sup |F_n - Phi| for the studentized samples."""
    x = np.asarray(samples, dtype=float)
    if x.size < 100:
        raise ValueError("KS test needs at least 100 samples")
    return float(sps.kstest(studentize(x), "norm").statistic)


def srw_ks(n: int, N_s: int, seed: int = 0) -> float:
    """KS of N_s draws of the n-step simple random walk, 2 Bin(n, 1/2) - n."""
    rng = RandomSource(seed, (3, n, N_s)).generator()
    return ks_normal(2 * rng.binomial(n, 0.5, N_s) - n)


def calibrated_threshold(n: int, N_s: int, factor: float = 1.5, seeds: int = 5) -> float:
    """``factor`` times the mean SRW KS over a few seeds at matched (n, N_s)."""
    return factor * float(np.mean([srw_ks(n, N_s, s) for s in range(seeds)]))


@dataclass
class CLTReport:
    label: str
    n: int
    N_s: int
    mean: float
    variance: float
    ks: float
    threshold: float
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.variance > 0 and self.ks < self.threshold

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = "pass" if self.passed else "fail"
        return d


def _report(label, n, values, threshold, **extra) -> CLTReport:
    v = np.asarray(values, dtype=float)
    var = float(v.var(ddof=1))
    if not var > 0:
        raise DegenerateError(f"{label}: zero variance")
    return CLTReport(label, n, len(v), float(v.mean()), var, ks_normal(v), threshold, extra)


# ------------------------------------------------------------ hitting times


def hitting_clt(env: Environment, n: int, N_s: int, seed: int = 0, threshold: float | None = None,
                threads: int = 1, sampler: str = "uniform") -> CLTReport:
    x0 = initial_points(N_s, sampler, seed)
    tau = chunked(lambda p: hitting_times(p, [n], env)[0], x0, threads)
    if threshold is None:
        threshold = calibrated_threshold(n, N_s)
    return _report("hitting", n, tau, threshold, per_step_mean=float(tau.mean() / n),
                   per_step_variance=float(tau.var(ddof=1) / n))


@dataclass
class VarianceGrowth:
    n: list[int]
    variance: list[float]
    slope: float
    C_hat: float
    ci: tuple[float, float]
    tail_from: int
    bound_tau: dict | None = None

    @property
    def passed(self) -> bool:
        return self.C_hat > 0 and self.ci[0] > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = "pass" if self.passed else "fail"
        return d


def variance_growth(env: Environment, n_grid: Sequence[int], N_s: int, seed: int = 0, tail_from: int | None = None,
                    bootstrap: int = 200, threads: int = 1, drift_grid: int | None = 1024) -> VarianceGrowth:
    """sigma_n^2 on ``n_grid``; C_hat = min over the tail of sigma_n^2 / n with a bootstrap CI.

    The slope is the least-squares slope of sigma_n^2 against n on the tail
    half of the grid.  ``bound_tau`` reports 3 - a_k over the grid range (the
    centred return time on the gate), computed by quadrature.
    """
    ns = sorted(int(n) for n in n_grid)
    x0 = initial_points(N_s, "uniform", seed)
    tau = chunked(lambda p: hitting_times(p, ns, env), x0, threads)
    var = tau.var(axis=1, ddof=1)
    if tail_from is None:
        tail_from = ns[len(ns) // 2]
    tail = [i for i, n in enumerate(ns) if n >= tail_from]
    if not tail:
        raise ValueError("no grid point in the tail")
    nn = np.array(ns, dtype=float)
    half = list(range(len(ns) // 2, len(ns)))
    slope = float(np.polyfit(nn[half], var[half], 1)[0]) if len(half) >= 2 else float(var[-1] / nn[-1])
    C_hat = float(min(var[i] / nn[i] for i in tail))
    rng = RandomSource(seed, (4,)).generator()
    boots = []
    sub = tau[tail]
    for _ in range(bootstrap):
        idx = rng.integers(0, N_s, N_s)
        v = sub[:, idx].var(axis=1, ddof=1)
        boots.append(float(np.min(v / nn[tail])))
    ci = (float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975))) if boots else (math.nan, math.nan)
    bt = None
    if drift_grid:
        a = drift_series(env, ns[-1], drift_grid)
        t = 3.0 - a
        bt = {"min": float(t.min()), "max": float(t.max()), "within_1_2": bool(t.min() >= 1 and t.max() <= 2)}
    return VarianceGrowth(ns, [float(v) for v in var], slope, C_hat, ci, tail_from, bt)


# ------------------------------------------------------------ constants


def model_a_constants(c: float, theta: float, D_prime: float, C_bar: float, M: float) -> tuple[int, float]:
    """Smallest N >= 1 with theta^N < c (1 - theta) / (2 D'), and delta0 = c / (3 (4 C M + C^2))."""
    if not 0 <= theta < 1:
        raise ValueError("theta must lie in [0, 1)")
    target = c * (1 - theta) / (2 * D_prime)
    N = 1
    while theta ** N >= target:
        N += 1
    return N, c / (3 * (4 * C_bar * M + C_bar ** 2))


# ------------------------------------------------------------ drift / scale


def drift_series(env: Environment, m_max: int, m: int = 4096, start: int = 0) -> np.ndarray:
    """a_k = 1 + 2 * (gate mass of rho_k) for k = start .. start + m_max - 1 (quadrature).

    ``start > 0`` restarts from the uniform density at that site, which is the
    history-truncated series used for the depth check.
    """
    key = ("drift", m_max, m, start)

    def build():
        out = np.empty(m_max)
        rho = np.ones(m)
        for k in range(m_max):
            s = start + k
            out[k] = 1.0 + 2.0 * gate_mass(env, s, rho)
            rho = site_operator(env, s, m)(rho)
        return out

    return env.memo(key, build)


@dataclass
class ScaleFunction:
    S: np.ndarray          # S(z) for z = 0..z_max
    stderr: np.ndarray
    var_tau: np.ndarray    # var(tau_z)
    N_s: int
    seed: int

    @property
    def z_max(self) -> int:
        return len(self.S) - 1

    def __call__(self, z):
        z = np.asarray(z)
        if np.any(z > self.z_max):
            raise ValueError(f"site beyond the scale table (z_max={self.z_max})")
        # the walk only dips below 0 briefly; there S is extended with slope 1
        return np.where(z >= 0, self.S[np.maximum(z, 0)], z)

    def inverse(self, s):
        """Z(s) = max{z : S(z) <= s}."""
        return np.searchsorted(self.S, np.asarray(s, dtype=float), side="right") - 1

    def sigma_hat(self, n: float) -> float:
        return float(math.sqrt(self.var_tau[int(self.inverse(n))]))

    def to_dict(self) -> dict:
        return {"N_s": self.N_s, "seed": self.seed, "S": self.S.tolist(), "stderr": self.stderr.tolist(),
                "var_tau": self.var_tau.tolist()}


def scale_function(env: Environment, z_max: int, N_s: int, seed: int = 0, threads: int = 1) -> ScaleFunction:
    """Monte Carlo table S(z) = E tau_z with standard errors."""
    lo, hi = env.window
    if z_max > hi:
        raise ValueError(f"z_max={z_max} is beyond the window [{lo}, {hi}]")

    def build():
        x0 = initial_points(N_s, "uniform", seed)
        sums = sum(chunk_map(lambda p: hitting_sums(p, z_max, env), x0, threads))
        s1 = sums[0].astype(float)
        s2 = sums[1].astype(float)
        mean = s1 / N_s
        var = np.maximum(s2 / N_s - mean ** 2, 0.0) * N_s / (N_s - 1)
        return ScaleFunction(mean, np.sqrt(var / N_s), var, N_s, seed)

    return env.memo(("scale", z_max, N_s, seed), build)


def scale_clt(env: Environment, n: int, N_s: int, seed: int = 0, table: ScaleFunction | None = None,
              threshold: float | None = None, probes: int = 20, threads: int = 1) -> CLTReport:
    """KS of (S(z_n) - n) / sigma_hat_n plus the z* / tau duality and lag checks."""
    if table is None:
        table = scale_function(env, min(n + 10, env.window[1]), N_s, seed + 1, threads)
    if table.z_max < n:
        raise ValueError("scale table must reach z_max >= n")
    sig = table.sigma_hat(n)
    if not sig > 0:
        raise DegenerateError("sigma_hat is zero")
    x0 = initial_points(N_s, "uniform", seed)
    times = sorted({max(n - 10, 0), max(n - 3, 0), n})
    zz, zs = chunked(lambda p: positions(p, times, env), x0, threads)
    zn, zsn = zz[-1], zs[-1]
    lag10 = int(np.count_nonzero(zs[0] > zn)) + int(np.count_nonzero(zn > zsn))
    lag3 = int(np.count_nonzero(zs[times.index(max(n - 3, 0))] > zn))
    # duality {z*_n >= j} = {tau_j <= n} on the same initial points
    qs = np.unique(np.quantile(zsn, np.linspace(0.02, 0.98, probes)).astype(np.int64))
    qs = qs[qs >= 1]
    taus = chunked(lambda p: hitting_times(p, qs, env), x0, threads)
    dual = []
    for j, t in zip(qs, taus):
        p1 = float(np.mean(zsn >= j))
        p2 = float(np.mean(t <= n))
        tol = 2 * math.sqrt(max(p1 * (1 - p1), 1e-12) / N_s)
        dual.append({"site": int(j), "p_zstar": p1, "p_tau": p2, "tol": tol, "ok": abs(p1 - p2) <= tol})
    vals = (table(zn) - n) / sig
    if threshold is None:
        threshold = calibrated_threshold(n, N_s)
    return _report("scale", n, vals, threshold, sigma_hat=sig, lag10_violations=lag10, lag3_violations=lag3,
                   duality=dual, duality_ok=all(d["ok"] for d in dual))


@dataclass
class DriftEstimate:
    a_series: np.ndarray
    a: float
    a_err: float
    autocov: list[float]
    autocov_floor: float
    decays: bool
    D2: float
    D2_err: float
    sigma2_tau: float | None = None
    sigma2_tau_err: float | None = None

    def position_variance(self) -> tuple[float, float]:
        """(quenched, annealed) variance per unit time of the position."""
        s2 = self.sigma2_tau or 0.0
        return s2 / self.a ** 3, (s2 + self.D2) / self.a ** 3

    def to_dict(self) -> dict:
        return {"a": self.a, "a_err": self.a_err, "D2": self.D2, "D2_err": self.D2_err,
                "sigma2_tau": self.sigma2_tau, "sigma2_tau_err": self.sigma2_tau_err,
                "autocov": self.autocov, "autocov_floor": self.autocov_floor, "decays": self.decays,
                "a_series_head": self.a_series[:50].tolist()}


def _batch_means(x: np.ndarray, nb: int = 20):
    b = len(x) // nb
    means = x[: b * nb].reshape(nb, b).mean(axis=1)
    return b, means


def drift_estimates(env: Environment, m_max: int, m: int = 1024, N_s: int = 0, seed: int = 0,
                    burn: int = 100, max_lag: int = 20, threads: int = 1) -> DriftEstimate:
    """a_k series by quadrature, its limit, autocovariance and long-run variance D^2.

    With ``N_s > 0`` the quenched hitting-time variance rate sigma^2 is added
    from a Monte Carlo run to site ``m_max``.
    """
    a = drift_series(env, m_max + burn, m)[burn:]
    b, means = _batch_means(a)
    a_bar = float(a.mean())
    a_err = float(means.std(ddof=1) / math.sqrt(len(means)))
    c = a - a_bar
    ac = [float(np.dot(c[: len(c) - L], c[L:]) / len(c)) for L in range(max_lag + 1)]
    floor = 3 * ac[0] / math.sqrt(len(c)) if ac[0] > 0 else 0.0
    decays = ac[0] == 0 or abs(ac[-1]) <= max(floor, 1e-12)
    D2 = float(b * means.var(ddof=1))
    D2_err = D2 * math.sqrt(2.0 / (len(means) - 1))
    s2 = s2e = None
    if N_s:
        x0 = initial_points(N_s, "uniform", seed)
        tau = chunked(lambda p: hitting_times(p, [m_max], env)[0], x0, threads).astype(float)
        v = tau.var(ddof=1)
        s2 = float(v / m_max)
        k4 = float(np.mean((tau - tau.mean()) ** 4))
        s2e = float(math.sqrt(max(k4 - v * v, 0.0) / N_s) / m_max)
    return DriftEstimate(a, a_bar, a_err, ac, floor, bool(decays), D2, D2_err, s2, s2e)


def truncation_curve(env: Environment, site: int, depths: Sequence[int], m: int = 1024) -> list[float]:
    """|a_{site,k} - a_site| where a_{site,k} starts the density at site - k."""
    full = drift_series(env, site + 1, m)[site]
    return [abs(float(drift_series(env, k + 1, m, start=site - k)[k]) - full) for k in depths]


# --------------------------------------------------------- position CLTs


def quenched_clt(env: Environment, n: int, N_s: int, drift: DriftEstimate, table: ScaleFunction, seed: int = 0,
                 threshold: float | None = None, threads: int = 1) -> CLTReport:
    """(z_n - b_n) / (sigma sqrt n) with b_n = Z(n) from the environment's scale table."""
    s2z, _ = drift.position_variance()
    if not s2z > 0:
        raise DegenerateError("quenched variance is zero")
    b_n = int(table.inverse(n))
    x0 = initial_points(N_s, "uniform", seed)
    zn = chunked(lambda p: positions(p, [n], env)[0], x0, threads)[0]
    vals = (zn - b_n) / math.sqrt(s2z * n)
    K = int(n ** 0.6)
    ks_ = np.arange(-K, K + 1)
    zz = np.clip(b_n + ks_, 0, table.z_max)
    lin = np.abs(table.S[zz] - n - (zz - b_n) * drift.a)
    if threshold is None:
        threshold = calibrated_threshold(n, N_s)
    return _report("quenched", n, vals, threshold, b_n=b_n, sigma2_position=s2z,
                   median_offset=float(np.median(zn) - b_n), spread=float(zn.std()),
                   local_linearity_max=float(lin.max()), local_linearity_window=K)


def annealed_clt(spec: EnvironmentSpec, n: int, N_s: int, N_env: int, seed: int = 0,
                 threshold: float | None = None, threads: int = 1) -> CLTReport:
    """Pool z_n over N_env environment draws with N_s // N_env walkers each."""
    per = max(N_s // N_env, 2)
    samples, means, variances = [], [], []
    for e in range(N_env):
        env = realize(spec, RandomSource(seed, (5, e)).generator().integers(0, 2**63))
        x0 = initial_points(per, "uniform", seed + 7919 * (e + 1))
        zn = chunked(lambda p: positions(p, [n], env)[0], x0, threads)[0]
        samples.append(zn)
        means.append(zn.mean())
        variances.append(zn.var(ddof=1))
    z = np.concatenate(samples).astype(float)
    v_hat = float(z.mean() / n)
    s2 = float(z.var(ddof=1) / n)
    # the pooled variance splits into mean within-environment variance and
    # variance of environment means; its error is driven by the latter
    between = float(np.var(means, ddof=1))
    within = float(np.mean(variances))
    s2_err = math.sqrt((2 * between ** 2 / (N_env - 1)) + float(np.var(variances, ddof=1)) / N_env) / n
    if threshold is None:
        threshold = calibrated_threshold(n, len(z))
    vals = (z - v_hat * n) / math.sqrt(s2 * n)
    return _report("annealed", n, vals, threshold, speed=v_hat, sigma2=s2, sigma2_err=s2_err,
                   within=within / n, between=between / n, N_env=N_env, per_env=per)


# ----------------------------------------------------------- counterexample


@dataclass
class CounterexampleReport:
    a_first: float
    a_second: float
    a_diff_se: float
    rows: list[dict]
    min_ks: float
    min_contrast: float

    @property
    def passed(self) -> bool:
        return self.min_ks > 0.05 and self.min_contrast > 3.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = "pass" if self.passed else "fail"
        return d


class PreconditionError(ValueError):
    pass


def _constant_drift(pair: SitePair, m_sites: int, N_s: int, seed: int, threads: int):
    from .environment import constant_spec

    env = realize(constant_spec(pair, (-1, m_sites + 1)))
    x0 = initial_points(N_s, "uniform", seed)
    tau = chunked(lambda p: hitting_times(p, [m_sites], env)[0], x0, threads).astype(float)
    return float(tau.mean() / m_sites), float(tau.std(ddof=1) / math.sqrt(N_s) / m_sites)


def _ks_at_tk(env, k_list, N_s, seed, table_N_s, threads, offsets=(-2, 0, 2)):
    zmax = (max(k_list) + 1) ** 2 + 50
    table = scale_function(env, zmax, table_N_s, seed + 1, threads)
    tks = {k: int(math.floor(table.S[k * k])) for k in k_list}
    times = sorted({tks[k] + d for k in k_list for d in offsets})
    x0 = initial_points(N_s, "uniform", seed)
    zz, _ = chunked(lambda p: positions(p, times, env), x0, threads)
    out = {}
    for k in k_list:
        for d in offsets:
            z = zz[times.index(tks[k] + d)]
            out[(k, d)] = (ks_normal((z - k * k) / k), tks[k])
    return out


def counterexample_check(first: SitePair, second: SitePair, k_list: Sequence[int], N_s: int, seed: int = 0,
                         table_N_s: int = 20000, drift_sites: int = 2000, threads: int = 1,
                         control_weights=(0.5, 0.5)) -> CounterexampleReport:
    """Minimized KS of (z_{t_k} - k^2) / k on square blocks versus an iid control.

    The location/scale minimization uses the sample mean and deviation, so the
    statistic is ``ks_normal`` of the raw positions.
    """
    from .environment import counterexample_spec, iid_spec

    a1, e1 = _constant_drift(first, drift_sites, 20000, seed, threads)
    a2, e2 = _constant_drift(second, drift_sites, 20000, seed, threads)
    se = math.hypot(e1, e2)
    if not abs(a1 - a2) > 5 * se:
        raise PreconditionError(f"drifts {a1:.4f} and {a2:.4f} are not distinguishable (se {se:.2g})")
    hi = int(3 * (max(k_list) + 1) ** 2 + 100)
    ce = realize(counterexample_spec(first, second, (-1, hi)))
    ctl = realize(iid_spec((first, second), control_weights, (-1, hi)), seed)
    r_ce = _ks_at_tk(ce, k_list, N_s, seed, table_N_s, threads)
    r_ct = _ks_at_tk(ctl, k_list, N_s, seed, table_N_s, threads)
    rows = []
    for (k, d), (ks, tk) in r_ce.items():
        kc, tkc = r_ct[(k, d)]
        rows.append({"k": k, "offset": d, "t_k": tk + d, "ks": ks, "t_k_control": tkc + d, "ks_control": kc,
                     "contrast": ks / kc})
    return CounterexampleReport(a1, a2, se, rows, min(r["ks"] for r in rows), min(r["contrast"] for r in rows))
