"""Command-line interface: ``amp-lab {se,run,experiment,bounds}``.

Exit codes: 0 success, 1 a result check failed, 2 bad config or usage,
3 I/O error.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from . import __version__
from .amp import (
    general_recursion_vectors, projection_diagnostics, run_amp, verify_recursion_identities,
    write_diagnostics_csv, write_run_log,
)
from .conc import run_validation_suites
from .denoise import Denoiser
from .harness import LOSSES, ExperimentConfig, atomic_write, emit_report, run_experiment
from .model import NoiseSpec, SeedPlan, SignalPrior, build_instance
from .se import DEFAULT_ORDER, SingularityError, StoppingCriterion, run_state_evolution, write_trace_csv

log = logging.getLogger("amp_lab")

EXIT_OK, EXIT_RESULT, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
THREADS_ENV = "AMP_LAB_THREADS"
IDENTITY_TOL = 1e-8

SECTIONS = {
    "model": {"prior", "noise", "delta", "n"},
    "denoiser": None,  # validated by Denoiser.from_dict
    "se": {"t_max", "order", "stopping", "compute_tables"},
    "experiment": {"loss", "iterations", "n_grid", "trials", "epsilon", "seed", "threads",
                   "online_tau", "bound_trials", "bound_rate_scale"},
}

DEFAULT_DOCUMENT = {
    "model": {"prior": {"kind": "bernoulli_gaussian", "sparsity": 0.1, "variance": 1.0},
              "noise": {"distribution": "gaussian", "variance": 0.01}, "delta": 0.5, "n": 2000},
    "denoiser": {"family": "soft_threshold", "alpha": 1.5},
    "se": {"t_max": 30, "order": DEFAULT_ORDER, "stopping": None, "compute_tables": True},
    "experiment": {"loss": "squared", "iterations": 5, "n_grid": [100, 200, 400, 800], "trials": 2000,
                   "epsilon": [0.05], "seed": 0, "threads": 1, "online_tau": False,
                   "bound_trials": 100_000, "bound_rate_scale": 1.0},
}


class ConfigError(ValueError):
    pass


@dataclass
class CliConfig:
    """Parsed config document plus command-line overrides."""

    prior: SignalPrior
    noise: NoiseSpec
    delta: float
    n: int
    denoiser: Denoiser
    t_max: int
    order: int
    stopping: StoppingCriterion | None
    compute_tables: bool
    experiment: dict[str, Any] = field(default_factory=dict)

    def experiment_config(self) -> ExperimentConfig:
        e = self.experiment
        return ExperimentConfig(
            prior=self.prior, noise=self.noise, delta=self.delta, denoiser=self.denoiser,
            loss=LOSSES[e["loss"]], iterations=e["iterations"], stopping=self.stopping,
            t_max=self.t_max, n_grid=tuple(e["n_grid"]), trials=int(e["trials"]),
            epsilons=tuple(e["epsilon"]), seed=int(e["seed"]), threads=int(e["threads"]),
            online_tau=bool(e["online_tau"]), quad_order=self.order,
        )


def _signal_length(n: int, delta: float, where: str) -> int:
    N = n / delta
    if not (n >= 1 and abs(N - round(N)) < 1e-9 and round(N) >= 1):
        raise ConfigError(f"{where}: n = {n} and delta = {delta} do not give an integer signal length")
    return int(round(N))


def parse_config(doc: Mapping) -> CliConfig:
    """Validate a config document; every problem is reported with its field path."""
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    merged: dict[str, Any] = {}
    for name, allowed in SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, Mapping):
            raise ConfigError(f"{name}: section must be an object")
        if allowed is not None:
            extra = set(section) - allowed
            if extra:
                raise ConfigError(f"{name}: unknown key(s) {sorted(extra)}")
            merged[name] = {**DEFAULT_DOCUMENT[name], **section}
        else:
            merged[name] = dict(section) if section else dict(DEFAULT_DOCUMENT[name])

    def field_guard(path, fn):
        try:
            return fn()
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    m, s, e = merged["model"], merged["se"], merged["experiment"]
    prior = field_guard("model.prior", lambda: SignalPrior.from_dict(m["prior"]))
    noise = field_guard("model.noise", lambda: NoiseSpec.from_dict(m["noise"]))
    delta = field_guard("model.delta", lambda: float(m["delta"]))
    if not (math.isfinite(delta) and delta > 0):
        raise ConfigError("model.delta: must be positive")
    n = field_guard("model.n", lambda: _int(m["n"]))
    _signal_length(n, delta, "model.n")
    denoiser = field_guard("denoiser", lambda: Denoiser.from_dict(merged["denoiser"]))
    t_max = field_guard("se.t_max", lambda: _int(s["t_max"]))
    if t_max < 1:
        raise ConfigError("se.t_max: must be at least 1")
    order = field_guard("se.order", lambda: _int(s["order"]))
    if order < 2:
        raise ConfigError("se.order: must be at least 2")
    stopping = None
    if s["stopping"] is not None:
        stopping = field_guard("se.stopping", lambda: StoppingCriterion.from_dict(s["stopping"]))
    if e["loss"] not in LOSSES:
        raise ConfigError(f"experiment.loss: must be one of {sorted(LOSSES)}")
    if e["iterations"] is not None:
        e["iterations"] = field_guard("experiment.iterations", lambda: _int(e["iterations"]))
    e["n_grid"] = field_guard("experiment.n_grid", lambda: [_int(v) for v in e["n_grid"]])
    for v in e["n_grid"]:
        _signal_length(v, delta, "experiment.n_grid")
    e["epsilon"] = field_guard("experiment.epsilon", lambda: [float(v) for v in e["epsilon"]])
    for key in ("trials", "seed", "threads", "bound_trials"):
        e[key] = field_guard(f"experiment.{key}", lambda: _int(e[key]))
    e["bound_rate_scale"] = field_guard("experiment.bound_rate_scale", lambda: float(e["bound_rate_scale"]))
    cfg = CliConfig(prior, noise, delta, n, denoiser, t_max, order, stopping,
                    bool(s["compute_tables"]), e)
    field_guard("experiment", cfg.experiment_config)
    return cfg


def _int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ValueError(f"expected an integer, got {v!r}")
    return int(v)


def load_config(path: str | None) -> CliConfig:
    if path is None:
        return parse_config({})
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_config(doc)


def resolve_threads(flag: int | None, config_value: int, env: Mapping[str, str] = os.environ) -> int:
    """--threads beats AMP_LAB_THREADS beats the config file."""
    if flag is not None:
        value = flag
    elif env.get(THREADS_ENV):
        try:
            value = int(env[THREADS_ENV])
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    else:
        value = config_value
    if value < 1:
        raise ConfigError("thread count must be at least 1")
    return value


def _write_text(path: str, fill) -> None:
    buf = io.StringIO()
    fill(buf)
    atomic_write(path, buf.getvalue())


def _se_trace(cfg: CliConfig, t_max: int | None = None, tables: bool | None = None):
    return run_state_evolution(cfg.prior, cfg.noise, cfg.delta, cfg.denoiser, cfg.stopping,
                               t_max=t_max or cfg.t_max,
                               compute_tables=cfg.compute_tables if tables is None else tables,
                               order=cfg.order)


def cmd_se(cfg: CliConfig, args) -> int:
    trace = _se_trace(cfg)
    path = os.path.join(args.out, "se_trace.csv")
    _write_text(path, lambda fh: write_trace_csv(trace, fh))
    log.info("wrote %s (T* = %d, %s)", path, trace.T_star, trace.stop_reason)
    return EXIT_OK


def cmd_run(cfg: CliConfig, args) -> int:
    seed = int(cfg.experiment["seed"])
    iterations = cfg.experiment["iterations"]
    t_max = iterations if (iterations is not None and cfg.stopping is None) else cfg.t_max
    trace = _se_trace(cfg, t_max=t_max, tables=True)
    T = iterations if iterations is not None else trace.T_star
    n = cfg.n
    N = _signal_length(n, cfg.delta, "model.n")
    inst = build_instance(cfg.prior, cfg.noise, n, N, SeedPlan(seed, 0))
    run = run_amp(inst, cfg.denoiser, trace, T=T, online_tau=bool(cfg.experiment["online_tau"]))
    _write_text(os.path.join(args.out, "run_log.csv"), lambda fh: write_run_log(run, fh))
    rec = general_recursion_vectors(run, inst)
    report = verify_recursion_identities(rec, inst)
    status = EXIT_OK
    try:
        diag = projection_diagnostics(rec, trace)
        _write_text(os.path.join(args.out, "run_diagnostics.csv"), lambda fh: write_diagnostics_csv(diag, fh))
        if max(diag.orthogonality, diag.pythagoras) > IDENTITY_TOL:
            log.error("projection geometry check failed (%.3g, %.3g)", diag.orthogonality, diag.pythagoras)
            status = EXIT_RESULT
    except SingularityError as exc:
        log.error("projection diagnostics unavailable: %s", exc)
        status = EXIT_RESULT
    log.info("max identity residual %.3g", report.max_residual)
    if not report.ok(IDENTITY_TOL):
        log.error("recursion identity residual %.3g exceeds %g", report.max_residual, IDENTITY_TOL)
        status = EXIT_RESULT
    return status


def _plan(ecfg: ExperimentConfig) -> tuple[int, float]:
    """Trial count and a rough cost estimate in seconds."""
    T = ecfg.iterations or ecfg.t_max
    cost = 0.0
    for n in ecfg.n_grid:
        N = ecfg.signal_length(n)
        # matrix draw plus two matrix-vector products per iteration
        cost += ecfg.trials * n * N * (2.0e-8 + (T + 1) * 2.5e-9)
    return len(ecfg.n_grid) * ecfg.trials, cost


def cmd_experiment(cfg: CliConfig, args) -> int:
    ecfg = cfg.experiment_config()
    trials, cost = _plan(ecfg)
    if args.dry_run:
        print(f"n grid: {list(ecfg.n_grid)}")
        print(f"trials per n: {ecfg.trials}")
        print(f"trial count: {trials}")
        print(f"threads: {ecfg.threads}")
        print(f"estimated cost: {cost:.1f} s single-threaded")
        return EXIT_OK

    def progress(done, total):
        if done % max(1, total // 20) == 0:
            log.info("trial %d / %d", done, total)

    report = run_experiment(ecfg, progress=progress)
    paths = emit_report(report, args.out)
    log.info("wrote %s", ", ".join(sorted(paths.values())))
    if not report.complete:
        log.error("campaign interrupted; outputs are partial")
        return EXIT_RESULT
    if report.table.failures:
        log.warning("%d trial(s) failed", len(report.table.failures))
    return EXIT_OK


def cmd_bounds(cfg: CliConfig, args) -> int:
    e = cfg.experiment
    checks = run_validation_suites(int(e["bound_trials"]), int(e["seed"]), float(e["bound_rate_scale"]))
    path = os.path.join(args.out, "bounds.csv")

    def fill(fh):
        fh.write("suite,n,epsilon,empirical,bound,slack,trials,passed\n")
        for c in checks:
            fh.write(f"{c.suite},{c.n},{c.eps!r},{c.empirical!r},{c.bound!r},{c.slack!r},{c.trials},{c.passed}\n")

    _write_text(path, fill)
    failed = [c for c in checks if not c.passed]
    for c in failed:
        log.error("%s n=%d eps=%g: empirical %.4g above bound %.4g", c.suite, c.n, c.eps, c.empirical, c.bound)
    log.info("%d of %d bound checks passed", len(checks) - len(failed), len(checks))
    return EXIT_RESULT if failed else EXIT_OK


COMMANDS = {"se": cmd_se, "run": cmd_run, "experiment": cmd_experiment, "bounds": cmd_bounds}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amp-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config with model/denoiser/se/experiment sections")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    common.add_argument("--seed", type=int, metavar="U64", help="override experiment.seed")
    common.add_argument("--threads", type=int, metavar="INT", help=f"worker threads (else ${THREADS_ENV}, else config)")
    common.add_argument("--dry-run", action="store_true", help="print the trial plan and exit (experiment)")
    common.add_argument("--verbose", "-v", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("se", parents=[common], help="write the state-evolution table")
    sub.add_parser("run", parents=[common], help="one seeded AMP run with diagnostics")
    sub.add_parser("experiment", parents=[common], help="Monte Carlo deviation campaign")
    sub.add_parser("bounds", parents=[common], help="validate concentration bounds by simulation")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.experiment["seed"] = args.seed
        cfg.experiment["threads"] = resolve_threads(args.threads, int(cfg.experiment["threads"]))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.time()
    try:
        os.makedirs(args.out, exist_ok=True)
        code = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    log.info("%s finished in %.1f s", args.command, time.time() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
