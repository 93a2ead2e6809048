"""Seeded Monte Carlo experiments on AMP.

A campaign draws fresh (A, beta0, w) for every (n, trial), runs AMP with
state-evolution thresholds, and compares per-iteration losses with their
state-evolution targets. Trial seeds come from a single global counter
over the n grid, so a campaign with one trial at one n reproduces a
single seeded run exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .amp import (
    amp_step, general_recursion_vectors, initial_state, projection_diagnostics, run_amp,
    TauSource,
)
from .denoise import Denoiser
from .model import NoiseSpec, SeedPlan, SignalPrior, build_instance
from .se import (
    DEFAULT_ORDER, StateEvolutionTrace, StoppingCriterion, _s_kinks, gh_expect, run_state_evolution,
)

__all__ = [
    "Loss",
    "LOSSES",
    "ExperimentConfig",
    "TrialTable",
    "DeviationEstimate",
    "FitResult",
    "KSResult",
    "ExperimentReport",
    "se_target",
    "state_evolution_for",
    "run_trials",
    "deviation_probability",
    "wilson_interval",
    "exponential_fit",
    "gaussianity_check",
    "diagnostic_trials",
    "run_experiment",
    "emit_report",
    "atomic_write",
    "LOSS_COLUMNS",
    "DEVIATION_COLUMNS",
    "FIT_COLUMNS",
    "DIAGNOSTIC_COLUMNS",
]

LOSS_COLUMNS = ["n", "N", "trial", "t", "loss_name", "loss", "se_target"]
DEVIATION_COLUMNS = ["n", "t", "epsilon", "p_hat", "wilson_lo", "wilson_hi", "trials"]
FIT_COLUMNS = ["t", "epsilon", "slope", "intercept", "r_squared", "monotone", "zero_cells", "skipped"]
DIAGNOSTIC_COLUMNS = ["n", "trial", "metric", "value"]

KS_CRIT_1PCT = 1.63
KS_SLACK = 2.0


@dataclass(frozen=True)
class Loss:
    """Per-entry loss phi(estimate, truth), averaged over the N entries.

    ``fn`` maps two arrays to an array; the built-in squared and absolute
    losses are reduced exactly as the AMP run log reduces them.
    """

    name: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def average(self, est: np.ndarray, truth: np.ndarray) -> float:
        err = est - truth
        if self.name == "squared":
            return float(err @ err) / err.size
        if self.name == "absolute":
            return float(np.abs(err).sum()) / err.size
        return float(np.mean(self.fn(est, truth)))


LOSSES = {
    "squared": Loss("squared", lambda a, b: (a - b) ** 2),
    "absolute": Loss("absolute", lambda a, b: np.abs(a - b)),
}


@dataclass
class ExperimentConfig:
    """Everything that determines a campaign, given the master seed.

    ``iterations`` fixes the number of AMP iterations T (losses at
    t = 0..T-1); when None the state-evolution stopping time is used.
    """

    prior: SignalPrior
    noise: NoiseSpec
    delta: float
    denoiser: Denoiser
    loss: Loss = field(default_factory=lambda: LOSSES["squared"])
    iterations: int | None = 5
    stopping: StoppingCriterion | None = None
    t_max: int = 30
    n_grid: tuple[int, ...] = (250, 500)
    trials: int = 100
    epsilons: tuple[float, ...] = (0.05,)
    seed: int = 0
    threads: int = 1
    online_tau: bool = False
    quad_order: int = DEFAULT_ORDER

    def __post_init__(self):
        self.n_grid = tuple(int(n) for n in self.n_grid)
        self.epsilons = tuple(float(e) for e in self.epsilons)
        if not 0 < self.delta:
            raise ValueError("delta must be positive")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if not self.n_grid or any(n < 1 for n in self.n_grid):
            raise ValueError("n grid must hold positive sizes")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n grid must be strictly increasing")
        if any(not 0 < e < 1 for e in self.epsilons):
            raise ValueError("every epsilon must lie in (0, 1)")
        if self.iterations is None and self.stopping is None:
            raise ValueError("give either a fixed iteration count or a stopping rule")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def signal_length(self, n: int) -> int:
        return int(round(n / self.delta))

    def to_dict(self) -> dict:
        return {
            "model": {"prior": self.prior.to_dict(), "noise": self.noise.to_dict(), "delta": self.delta},
            "denoiser": self.denoiser.to_dict(),
            "se": {"t_max": self.t_max, "order": self.quad_order,
                   "stopping": self.stopping.to_dict() if self.stopping else None},
            "experiment": {
                "loss": self.loss.name, "iterations": self.iterations, "n_grid": list(self.n_grid),
                "trials": self.trials, "epsilon": list(self.epsilons), "seed": self.seed,
                "threads": self.threads, "online_tau": self.online_tau,
            },
        }


def state_evolution_for(config: ExperimentConfig, compute_tables: bool = False) -> StateEvolutionTrace:
    t_max = config.iterations if config.stopping is None else config.t_max
    return run_state_evolution(config.prior, config.noise, config.delta, config.denoiser,
                               config.stopping, t_max=t_max, compute_tables=compute_tables,
                               order=config.quad_order)


def _iterations(config: ExperimentConfig, trace: StateEvolutionTrace) -> int:
    return config.iterations if config.iterations is not None else trace.T_star


def se_target(config: ExperimentConfig, t: int, trace: StateEvolutionTrace | None = None) -> float:
    """E[phi(eta_t(beta + tau_t Z), beta)] by quadrature."""
    trace = trace if trace is not None else state_evolution_for(config)
    if t >= len(trace.tau_sq):
        raise ValueError(f"trace has no tau^2 for t = {t}")
    tau_sq = trace.tau_sq[t]
    tau = math.sqrt(tau_sq)
    d, phi = config.denoiser, config.loss.fn

    def integrand(z, b):
        return phi(d.eta(b + tau * z, tau_sq), b)

    return gh_expect(integrand, config.prior, order=config.quad_order, kinks=_s_kinks(d, tau_sq))


# ---------------------------------------------------------------------------
# trials


@dataclass
class TrialTable:
    """Loss rows (n, N, trial, t, loss) plus failed trials as (n, trial, message)."""

    rows: list[tuple[int, int, int, int, float]] = field(default_factory=list)
    failures: list[tuple[int, int, str]] = field(default_factory=list)
    complete: bool = True

    def losses(self, n: int, t: int) -> np.ndarray:
        return np.array([r[4] for r in self.rows if r[0] == n and r[3] == t])


def _one_trial(config, trace, T, n, trial_index):
    N = config.signal_length(n)
    inst = build_instance(config.prior, config.noise, n, N, SeedPlan(config.seed, trial_index))
    source = TauSource.online() if config.online_tau else TauSource.from_trace(trace)
    state = initial_state(inst)
    out = []
    for t in range(T):
        state = amp_step(state, inst, config.denoiser, source)
        out.append((n, N, trial_index, t, config.loss.average(state.beta, inst.beta0)))
    return out


def run_trials(config: ExperimentConfig, trace: StateEvolutionTrace | None = None,
               threads: int | None = None, progress: Callable[[int, int], None] | None = None) -> TrialTable:
    """Run every (n, trial) of the campaign.

    Trial indices run 0..len(n_grid)*trials-1 in grid order. ``threads=1``
    is the reference mode; rows are always returned in index order.
    A failing trial is recorded in ``failures`` and skipped. A keyboard
    interrupt returns the rows finished so far with ``complete=False``.
    """
    trace = trace if trace is not None else state_evolution_for(config)
    T = _iterations(config, trace)
    threads = threads or config.threads
    tasks = [(n, i * config.trials + k) for i, n in enumerate(config.n_grid) for k in range(config.trials)]
    table = TrialTable()
    results: dict[int, list] = {}

    def work(task):
        n, idx = task
        try:
            return idx, _one_trial(config, trace, T, n, idx), None
        except Exception as exc:  # recorded, not fatal
            return idx, None, (n, idx, f"{type(exc).__name__}: {exc}")

    done = 0
    try:
        if threads == 1:
            for task in tasks:
                idx, rows, fail = work(task)
                results[idx] = rows if rows is not None else fail
                done += 1
                if progress:
                    progress(done, len(tasks))
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for idx, rows, fail in pool.map(work, tasks):
                    results[idx] = rows if rows is not None else fail
                    done += 1
                    if progress:
                        progress(done, len(tasks))
    except KeyboardInterrupt:
        table.complete = False
    for idx in sorted(results):
        res = results[idx]
        if isinstance(res, tuple):
            table.failures.append(res)
        else:
            table.rows.extend(res)
    return table


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class DeviationEstimate:
    p_hat: float
    lo: float
    hi: float
    trials: int


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def deviation_probability(losses: Sequence[float], target: float, eps: float) -> DeviationEstimate:
    """Fraction of losses with |loss - target| >= eps, with a 95% Wilson interval."""
    x = np.asarray(losses, dtype=float)
    if x.size == 0:
        raise ValueError("no loss values")
    k = int(np.count_nonzero(np.abs(x - target) >= eps))
    lo, hi = wilson_interval(k, x.size)
    return DeviationEstimate(k / x.size, lo, hi, int(x.size))


@dataclass
class FitResult:
    """OLS of log P-hat on n.

    ``zero_cells`` marks grid points whose P-hat was 0 and was replaced
    by its Wilson upper bound. ``skipped`` is True when no fit was made.
    """

    slope: float
    intercept: float
    r_squared: float
    monotone: bool
    zero_cells: tuple[bool, ...]
    skipped: bool = False


def exponential_fit(n_grid: Sequence[float], p_hat: Sequence[float],
                    zero_fill: Sequence[float] | None = None) -> FitResult:
    """Fit log P-hat = intercept + slope * n.

    Zero cells take the matching ``zero_fill`` value (the Wilson upper
    bound) when given and are dropped otherwise. The fit is skipped when
    every P-hat is zero or fewer than three usable points remain. The
    monotonicity flag is computed on the raw P-hat.
    """
    n = np.asarray(n_grid, dtype=float)
    p = np.asarray(p_hat, dtype=float)
    if n.shape != p.shape:
        raise ValueError("grid and estimates differ in length")
    monotone = bool(np.all(np.diff(p) <= 0))
    zeros = tuple(bool(v) for v in p == 0)
    nan = math.nan
    if not np.any(p > 0):
        return FitResult(nan, nan, nan, monotone, zeros, skipped=True)
    y = p.copy()
    if zero_fill is not None:
        y = np.where(p == 0, np.asarray(zero_fill, dtype=float), p)
    keep = y > 0
    if np.count_nonzero(keep) < 3:
        return FitResult(nan, nan, nan, monotone, zeros, skipped=True)
    x, ly = n[keep], np.log(y[keep])
    slope, intercept = np.polyfit(x, ly, 1)
    resid = ly - (intercept + slope * x)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(resid @ resid)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res < 1e-24 else 0.0)
    return FitResult(float(slope), float(intercept), r2, monotone, zeros)


@dataclass(frozen=True)
class KSResult:
    statistic: float
    threshold: float
    pvalue: float
    passed: bool


def gaussianity_check(h: np.ndarray, tau: float, slack: float = KS_SLACK) -> KSResult:
    """KS distance of h / tau from N(0, 1), judged against slack * 1.63 / sqrt(N)."""
    h = np.asarray(h, dtype=float)
    if not tau > 0:
        raise ValueError("tau must be positive")
    if h.size < 100:
        raise ValueError("need at least 100 entries for the asymptotic threshold")
    res = stats.kstest(h / tau, "norm")
    thr = slack * KS_CRIT_1PCT / math.sqrt(h.size)
    return KSResult(float(res.statistic), thr, float(res.pvalue), bool(res.statistic < thr))


def diagnostic_trials(config: ExperimentConfig, n: int, trials: int, T: int, t_check: int,
                      trace: StateEvolutionTrace | None = None,
                      first_trial: int = 0) -> list[dict[str, float]]:
    """Per-trial maxima (over t <= t_check) of every projection diagnostic.

    Also adds ``ks_t{t}`` entries: the KS statistic of h^{t+1} / tau_t
    for t <= min(t_check, T - 1), and ``ks_pass`` (1.0 if all pass).
    """
    trace = trace if trace is not None else run_state_evolution(
        config.prior, config.noise, config.delta, config.denoiser, None, t_max=T,
        compute_tables=True, order=config.quad_order)
    N = config.signal_length(n)
    out = []
    for k in range(trials):
        inst = build_instance(config.prior, config.noise, n, N, SeedPlan(config.seed, first_trial + k))
        run = run_amp(inst, config.denoiser, trace, T=T, online_tau=config.online_tau)
        rt = general_recursion_vectors(run, inst)
        diag = projection_diagnostics(rt, trace)
        row = diag.summary(t_check)
        ok = True
        for t in range(min(t_check, T - 1) + 1):
            ks = gaussianity_check(rt.h[t], math.sqrt(trace.tau_sq[t]))
            row[f"ks_t{t}"] = ks.statistic
            ok &= ks.passed
        row["ks_pass"] = float(ok)
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# campaigns and reports


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    trace: StateEvolutionTrace
    targets: list[float]
    table: TrialTable
    deviations: list[tuple[int, int, float, DeviationEstimate]]
    fits: list[tuple[int, float, FitResult]]
    diagnostics: list[tuple[int, int, str, float]] = field(default_factory=list)
    wall_clock: float = 0.0
    started: str = ""

    @property
    def complete(self) -> bool:
        return self.table.complete


def run_experiment(config: ExperimentConfig, threads: int | None = None,
                   progress: Callable[[int, int], None] | None = None) -> ExperimentReport:
    start = time.time()
    started = time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(start))
    trace = state_evolution_for(config)
    T = _iterations(config, trace)
    targets = [se_target(config, t, trace) for t in range(T)]
    table = run_trials(config, trace, threads, progress)
    deviations = []
    for n in config.n_grid:
        for t in range(T):
            losses = table.losses(n, t)
            if losses.size == 0:
                continue
            for eps in config.epsilons:
                deviations.append((n, t, eps, deviation_probability(losses, targets[t], eps)))
    fits = []
    for t in range(T):
        for eps in config.epsilons:
            cells = [d for d in deviations if d[1] == t and d[2] == eps]
            if len(cells) < 2:
                continue
            fits.append((t, eps, exponential_fit([c[0] for c in cells], [c[3].p_hat for c in cells],
                                                 [c[3].hi for c in cells])))
    return ExperimentReport(config, trace, targets, table, deviations, fits,
                            wall_clock=time.time() - start, started=started)


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to a temporary file beside ``path`` and rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def emit_report(report: ExperimentReport, out_dir: str, extra: Mapping | None = None) -> dict[str, str]:
    """Write losses, deviations, fits and diagnostics CSVs and a JSON manifest.

    The manifest is written first with ``complete: false`` and rewritten
    last, so an interrupted write never looks finished. Returns the
    paths written. I/O failures raise ``OSError`` naming the path.
    """
    paths = {
        "losses": os.path.join(out_dir, "losses.csv"),
        "deviations": os.path.join(out_dir, "deviations.csv"),
        "fits": os.path.join(out_dir, "fits.csv"),
        "diagnostics": os.path.join(out_dir, "diagnostics.csv"),
        "manifest": os.path.join(out_dir, "manifest.json"),
    }
    cfg = report.config
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "started": report.started,
        "wall_clock_seconds": report.wall_clock,
        "trials_failed": [list(f) for f in report.table.failures],
        "stop_reason": report.trace.stop_reason,
        "files": {k: os.path.basename(v) for k, v in paths.items() if k != "manifest"},
        "complete": False,
    }
    if extra:
        manifest.update(extra)
    loss_rows = [(n, N, trial, t, cfg.loss.name, loss, report.targets[t])
                 for n, N, trial, t, loss in report.table.rows]
    dev_rows = [(n, t, eps, d.p_hat, d.lo, d.hi, d.trials) for n, t, eps, d in report.deviations]
    fit_rows = [(t, eps, f.slope, f.intercept, f.r_squared, f.monotone,
                 "".join("1" if z else "0" for z in f.zero_cells), f.skipped)
                for t, eps, f in report.fits]
    try:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write(paths["manifest"], json.dumps(manifest, indent=2) + "\n")
        atomic_write(paths["losses"], _csv_text(LOSS_COLUMNS, loss_rows))
        atomic_write(paths["deviations"], _csv_text(DEVIATION_COLUMNS, dev_rows))
        atomic_write(paths["fits"], _csv_text(FIT_COLUMNS, fit_rows))
        atomic_write(paths["diagnostics"], _csv_text(DIAGNOSTIC_COLUMNS, report.diagnostics))
        manifest["complete"] = report.complete
        atomic_write(paths["manifest"], json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing report under {out_dir!r}: {exc}") from exc
    return paths
