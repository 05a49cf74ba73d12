"""Command line entry point.

Every command writes one JSON report.  The report embeds the resolved run
configuration and a digest of the library sources, and contains no
timestamps, so equal configurations give byte-identical files.

Exit codes: 0 pass, 1 fail, 2 inconclusive or degenerate, 3 usage or input
error.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .circle_maps import ConditionError, Verdict, check_bgeom, verify_gt2
from .environment import (SpecError, WindowError, builtin_spec, deserialize, extend, from_dict,
                          realize)

EXIT_PASS, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_USAGE = 0, 1, 2, 3


def source_digest() -> str:
    """sha256 over the package sources, tagged with the version."""
    h = hashlib.sha256(__version__.encode())
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:16]}"


@dataclasses.dataclass
class RunConfig:
    command: str
    env: str
    env_seed: int | None
    seed: int
    threads: int
    grid: int
    samples: int
    out: str | None
    force: bool
    params: dict

    def to_dict(self) -> dict:
        # where the report goes and how many threads made it do not affect it
        d = dataclasses.asdict(self)
        del d["threads"], d["out"]
        return d


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Verdict):
        return obj.value
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def render(report: dict) -> str:
    return json.dumps(_plain(report), sort_keys=True, indent=2) + "\n"


class Failure(Exception):
    """Raised by commands to exit with a given code after writing a message."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def load_env(name: str, env_seed: int | None):
    if name.startswith("builtin:"):
        return realize(builtin_spec(name.split(":", 1)[1]), env_seed or 0)
    path = Path(name)
    if not path.is_file():
        raise Failure(EXIT_USAGE, f"env: file not found: {name}")
    if env_seed is None:
        return deserialize(path)
    d = json.loads(path.read_text())
    d.pop("sites", None)
    d["seed"] = env_seed
    return from_dict(d)


def precheck(env, relaxed: bool = True) -> dict:
    """Minimal admissibility: expansion of every pair and (gt-1) on all neighbours."""
    from .walk import gt1_verdict

    bg, _, wits = check_bgeom(env.alphabet, None, strict=not relaxed)
    g1 = gt1_verdict(env)
    return {"bgeom": bg, "gt1": g1, "verdict": bg & g1, "witnesses": wits}


class Context:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._env = None

    @property
    def env(self):
        if self._env is None:
            self._env = load_env(self.cfg.env, self.cfg.env_seed)
        return self._env

    def need(self, hi: int):
        """Environment whose window reaches site ``hi``."""
        self._env = extend(self.env, hi)
        return self._env

    def require_admissible(self):
        if self.cfg.force:
            return
        chk = precheck(self.env)
        if not chk["verdict"].ok:
            raise Failure(EXIT_FAIL, f"environment failed the admissibility check ({_plain(chk)}); "
                          "rerun with --force to proceed anyway")

    def emit(self, result: dict, verdict: Verdict | bool | None, csv_writer=None) -> int:
        if isinstance(verdict, bool):
            verdict = Verdict.PASS if verdict else Verdict.FAIL
        report = {"config": self.cfg.to_dict(), "library": source_digest(), "result": result,
                  "verdict": None if verdict is None else verdict.value}
        text = render(report)
        if self.cfg.out:
            out = Path(self.cfg.out)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text)
            if csv_writer is not None:
                csv_writer(out.with_suffix(".csv"))
        else:
            click.echo(text, nl=False)
        if verdict is None or verdict is Verdict.PASS:
            return EXIT_PASS
        return EXIT_FAIL if verdict is Verdict.FAIL else EXIT_INCONCLUSIVE


def _int_list(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


GLOBALS = ("env", "env_seed", "seed", "threads", "grid", "samples", "out", "force")


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON file with option values; command-line flags override it.")
@click.option("--env", default="builtin:paper-example", show_default=True,
              help="Environment file, or builtin:NAME (srw, paper-example, relaxed, nested-iid, counterexample).")
@click.option("--env-seed", type=int, default=None, help="Realization seed, overriding the one in the file.")
@click.option("--seed", type=int, default=0, show_default=True, help="Sampling seed.")
@click.option("--threads", type=click.IntRange(min=0), default=1, show_default=True, help="Worker threads; 0 = all CPUs.")
@click.option("--grid", type=int, default=4096, show_default=True, help="Transfer-operator grid size.")
@click.option("--samples", type=click.IntRange(min=2), default=100_000, show_default=True, help="Initial points.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report path (default: stdout).")
@click.option("--force", is_flag=True, help="Skip the admissibility precheck.")
@click.pass_context
def cli(ctx, config_path, **opts):
    file_cfg: dict = {}
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise Failure(EXIT_USAGE, f"config: file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise Failure(EXIT_USAGE, f"config: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(file_cfg, dict):
            raise Failure(EXIT_USAGE, "config: expected a JSON object")
        unknown = set(file_cfg) - set(GLOBALS) - set(cli.commands)
        if unknown:
            raise Failure(EXIT_USAGE, f"config: unknown keys {sorted(unknown)}")
        for key in GLOBALS:
            if key in file_cfg and ctx.get_parameter_source(key) is click.core.ParameterSource.DEFAULT:
                opts[key] = file_cfg[key]
        # per-command sections become click defaults, so explicit flags still win
        ctx.default_map = {k: v for k, v in file_cfg.items() if k in cli.commands}
    ctx.obj = opts


def _context(ctx, params: dict) -> Context:
    o = ctx.obj
    cfg = RunConfig(ctx.info_name, o["env"], o["env_seed"], o["seed"], o["threads"], o["grid"], o["samples"],
                    o["out"], o["force"], params)
    grid = cfg.grid
    if grid < 16 or grid & (grid - 1):
        raise Failure(EXIT_USAGE, f"grid: must be a power of two >= 16, got {grid}")
    return Context(cfg)


@cli.command()
@click.option("--nmax", type=click.IntRange(min=0), default=5, show_default=True, help="(gt-2) depth.")
@click.option("--relaxed", is_flag=True, help="Expansion gamma > 1 instead of gamma > 3.")
@click.option("--model-a", "model_a", default=None,
              help="c,theta,D',C,M: also check gate widths against the resulting delta0 bound.")
@click.pass_context
def verify(ctx, nmax, relaxed, model_a):
    """Check the geometric conditions over the environment window."""
    from .statistics import model_a_constants

    c = _context(ctx, {"nmax": nmax, "relaxed": relaxed, "model_a": model_a})
    env = c.env
    rep = verify_gt2(env, nmax)
    rep.bgeom_ok, rep.gate_size_ok, wits = check_bgeom(env.alphabet, env.spec.constants, strict=not relaxed)
    rep.witnesses.extend(wits)
    result = rep.to_dict()
    verdict = rep.verdict
    if model_a:
        try:
            vals = [float(t) for t in model_a.split(",")]
            N, dbar = model_a_constants(*vals)
        except (ValueError, TypeError) as exc:
            raise Failure(EXIT_USAGE, f"model-a: {exc}") from None
        widest = max(p.gate.width for p in env.alphabet)
        result["model_a"] = {"N": N, "delta0_bound": dbar, "widest_gate": widest}
        if widest > dbar:
            click.echo(f"warning: gate width {widest:.3g} exceeds the delta0 bound {dbar:.3g}", err=True)
            verdict = verdict & Verdict.FAIL
    return c.emit(result, verdict)


@cli.command()
@click.option("--observable", type=click.Choice(["tau", "z", "zstar"]), default="tau", show_default=True)
@click.option("--at", "at", default="100", show_default=True, help="Comma-separated sites (tau) or times (z, zstar).")
@click.option("--sampler", type=click.Choice(["uniform", "stratified"]), default="uniform", show_default=True)
@click.option("--mode", type=click.Choice(["induced", "direct"]), default="induced", show_default=True)
@click.pass_context
def simulate(ctx, observable, at, sampler, mode):
    """Ensemble of hitting times or positions; per-sample values go to a CSV next to --out."""
    from .walk import ensemble

    points = _int_list(at)
    if not points:
        raise click.BadParameter("--at needs at least one value")
    c = _context(ctx, {"observable": observable, "at": points, "sampler": sampler, "mode": mode})
    c.need(max(points) + 1)
    c.require_admissible()
    res = ensemble(c.env, observable, points, c.cfg.samples, sampler, c.cfg.seed, c.cfg.threads, mode)
    return c.emit(res.summary(), None, res.to_csv)


@cli.command()
@click.option("--nmax", type=click.IntRange(min=5), default=60, show_default=True, help="Composition length.")
@click.option("--min-steps", type=click.IntRange(min=21), default=100, show_default=True)
@click.option("--ly-trials", type=click.IntRange(min=0), default=100, show_default=True)
@click.pass_context
def mixing(ctx, nmax, min_steps, ly_trials):
    """Decay rate on the standard dictionary, minimum density and the Lasota-Yorke fit."""
    from .transfer import decay_rate, env_operators, ly_constants, min_density, site_operator, standard_dictionary

    c = _context(ctx, {"nmax": nmax, "min_steps": min_steps, "ly_trials": ly_trials})
    env = c.need(max(nmax, min_steps) + 2)
    c.require_admissible()
    m = c.cfg.grid
    rep = decay_rate(env_operators(env, m), standard_dictionary(m), nmax)
    md = min_density(env, min_steps, m)
    rep.sigma = md.sigma
    result = {"decay": rep.to_dict(), "min_density": md.to_dict()}
    if ly_trials:
        mc = env.site(1).map.constants(strict=False)
        result["lasota_yorke"] = ly_constants(site_operator(env, 1, m), mc.gamma, mc.K, ly_trials, c.cfg.seed).to_dict()
    if rep.theta is None:
        verdict = Verdict.INCONCLUSIVE
    else:
        verdict = Verdict.PASS if rep.theta < 0.9 and md.sigma > 0 and not md.still_decreasing else Verdict.FAIL
    return c.emit(result, verdict)


def _threshold_opt(f):
    return click.option("--threshold", type=float, default=None,
                        help="KS pass threshold (default: 1.5 x the SRW value at matched n, samples).")(f)


@cli.command()
@click.option("--n", "n", type=click.IntRange(min=1), default=2000, show_default=True)
@_threshold_opt
@click.pass_context
def clt(ctx, n, threshold):
    """Hitting-time CLT at site n."""
    from .statistics import hitting_clt

    c = _context(ctx, {"n": n, "threshold": threshold})
    c.need(n + 1)
    c.require_admissible()
    rep = hitting_clt(c.env, n, c.cfg.samples, c.cfg.seed, threshold, c.cfg.threads)
    return c.emit(rep.to_dict(), rep.passed)


@cli.command()
@click.option("--zmax", type=click.IntRange(min=1), default=6010, show_default=True)
@click.option("--n", "n", type=click.IntRange(min=0), default=6000, show_default=True,
              help="Time for the scale CLT; 0 tabulates only.")
@_threshold_opt
@click.pass_context
def scale(ctx, zmax, n, threshold):
    """Scale function table and, unless --n 0, the scale CLT."""
    from .statistics import scale_clt, scale_function

    if n > zmax:
        raise click.BadParameter("--n must not exceed --zmax")
    c = _context(ctx, {"zmax": zmax, "n": n, "threshold": threshold})
    env = c.need(zmax + 1)
    c.require_admissible()
    table = scale_function(env, zmax, c.cfg.samples, c.cfg.seed + 1, c.cfg.threads)
    result = {"table": table.to_dict()}
    verdict = None
    if n:
        rep = scale_clt(env, n, c.cfg.samples, c.cfg.seed, table, threshold, threads=c.cfg.threads)
        result["clt"] = rep.to_dict()
        ok = rep.passed and rep.extra["duality_ok"] and rep.extra["lag10_violations"] == 0
        verdict = Verdict.PASS if ok else Verdict.FAIL
    return c.emit(result, verdict)


@cli.command()
@click.option("--nmax", type=click.IntRange(min=40), default=6000, show_default=True, help="Sites in the drift series.")
@click.pass_context
def drift(ctx, nmax):
    """Drift series a_k, its mean, autocovariance, D^2 and the hitting-time variance rate."""
    from .statistics import drift_estimates

    c = _context(ctx, {"nmax": nmax})
    env = c.need(nmax + 200)
    c.require_admissible()
    est = drift_estimates(env, nmax, c.cfg.grid, c.cfg.samples, c.cfg.seed, threads=c.cfg.threads)
    return c.emit(est.to_dict(), Verdict.PASS if est.decays else Verdict.INCONCLUSIVE)


@cli.command()
@click.option("--n", "n", type=click.IntRange(min=100), default=6000, show_default=True)
@click.option("--table-samples", type=click.IntRange(min=2), default=20_000, show_default=True)
@_threshold_opt
@click.pass_context
def quenched(ctx, n, table_samples, threshold):
    """Quenched position CLT for the environment realization."""
    from .statistics import drift_estimates, quenched_clt, scale_function

    c = _context(ctx, {"n": n, "table_samples": table_samples, "threshold": threshold})
    env = c.need(n + 200)
    c.require_admissible()
    est = drift_estimates(env, n, 1024, table_samples, c.cfg.seed + 2, threads=c.cfg.threads)
    table = scale_function(env, n + 100, table_samples, c.cfg.seed + 1, c.cfg.threads)
    rep = quenched_clt(env, n, c.cfg.samples, est, table, c.cfg.seed, threshold, c.cfg.threads)
    return c.emit({"clt": rep.to_dict(), "drift": est.to_dict()}, rep.passed)


@cli.command()
@click.option("--n", "n", type=click.IntRange(min=100), default=6000, show_default=True)
@click.option("--n-env", type=click.IntRange(min=2), default=20, show_default=True)
@_threshold_opt
@click.pass_context
def annealed(ctx, n, n_env, threshold):
    """Annealed position CLT pooled over independent environment draws."""
    from .statistics import annealed_clt

    c = _context(ctx, {"n": n, "n_env": n_env, "threshold": threshold})
    env = c.need(n + 1)
    c.require_admissible()
    rep = annealed_clt(env.spec, n, c.cfg.samples, n_env, c.cfg.seed, threshold, c.cfg.threads)
    return c.emit(rep.to_dict(), rep.passed)


@cli.command()
@click.option("--klist", default="40,60,80", show_default=True)
@click.option("--table-samples", type=click.IntRange(min=2), default=20_000, show_default=True)
@click.pass_context
def counterexample(ctx, klist, table_samples):
    """Square-block environment built from the first two alphabet pairs, against an iid control."""
    from .statistics import counterexample_check

    ks = _int_list(klist)
    if not ks or min(ks) < 1:
        raise click.BadParameter("--klist needs positive integers")
    c = _context(ctx, {"klist": ks, "table_samples": table_samples})
    pairs = c.env.alphabet
    if len(pairs) != 2:
        raise Failure(EXIT_USAGE, f"env: counterexample needs a two-pair alphabet, got {len(pairs)}")
    c.require_admissible()
    rep = counterexample_check(pairs[0], pairs[1], ks, c.cfg.samples, c.cfg.seed, table_samples,
                               threads=c.cfg.threads)
    return c.emit(rep.to_dict(), rep.passed)


def main(argv=None) -> int:
    from .statistics import DegenerateError, PreconditionError
    from .transfer import MinorationError
    from .walk import HorizonError

    try:
        code = cli.main(args=argv, prog_name="dwre", standalone_mode=False)
    except click.exceptions.Exit as exc:
        code = exc.exit_code
    except click.ClickException as exc:
        exc.show()
        code = EXIT_USAGE
    except click.Abort:
        code = EXIT_USAGE
    except Failure as exc:
        click.echo(f"error: {exc}", err=True)
        code = exc.code
    except (DegenerateError, PreconditionError, MinorationError, HorizonError, ConditionError) as exc:
        click.echo(f"inconclusive: {exc}", err=True)
        code = EXIT_INCONCLUSIVE
    except (SpecError, WindowError) as exc:
        click.echo(f"error: {exc}", err=True)
        code = EXIT_USAGE
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
