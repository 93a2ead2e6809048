"""AMP iteration, the (h, q, b, m) recursion view, and projection diagnostics.

One iteration is

    z^t     = y - A beta^t + (z^{t-1} / n) * sum_i eta'_{t-1}(s^{t-1}_i)
    beta^t+1 = eta_t(s^t),        s^t = A^T z^t + beta^t,

started from beta^0 = 0, z^0 = y. ``s^t`` is the effective observation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .denoise import Denoiser, NumericError, apply_denoiser
from .model import DimensionError, ProblemInstance
from .se import CovarianceTables, SingularityError, StateEvolutionTrace

__all__ = [
    "AmpState",
    "TauSource",
    "AmpRun",
    "RecursionTrace",
    "IdentityReport",
    "ProjectionResult",
    "ProjectionDiagnostics",
    "amp_step",
    "initial_state",
    "run_amp",
    "estimate_tau",
    "general_recursion_vectors",
    "verify_recursion_identities",
    "least_squares_projection",
    "projection_diagnostics",
    "write_run_log",
    "write_diagnostics_csv",
    "RUN_LOG_COLUMNS",
    "DIAGNOSTIC_COLUMNS",
    "RANK_TOL",
]

RANK_TOL = 1e-10

RUN_LOG_COLUMNS = ["t", "mse", "l1_error", "tau_est_sq", "tau_se_sq", "lambda_t", "onsager_norm"]
DIAGNOSTIC_COLUMNS = ["metric", "r", "t", "empirical", "predicted", "abs_dev"]


def estimate_tau(z: np.ndarray) -> float:
    """Online noise-level estimate ||z||^2 / len(z)."""
    z = np.asarray(z, dtype=float)
    return float(z @ z) / z.size


@dataclass
class AmpState:
    """Iterate at step t.

    ``beta`` is beta^t and ``z`` is z^t. ``effective`` is the effective
    observation s^{t-1} that produced ``beta`` (None at t = 0);
    ``onsager_coef`` is sum eta'_{t-1}(s^{t-1}) / n, the multiplier of
    z^{t-1} inside z^t (zero at t = 0).
    """

    t: int
    beta: np.ndarray
    z: np.ndarray
    tau_estimate: float
    effective: np.ndarray | None = None
    onsager_coef: float = 0.0
    onsager_norm: float = 0.0
    tau_used: float = math.nan


@dataclass(frozen=True)
class TauSource:
    """Where the denoiser's noise level comes from at each iteration.

    ``kind="se"`` reads tau_t^2 from a state-evolution trace; ``kind="online"``
    uses ||z^t||^2 / n.
    """

    kind: str = "se"
    tau_sq: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("se", "online"):
            raise ValueError(f"unknown tau source {self.kind!r}")

    @classmethod
    def from_trace(cls, trace: StateEvolutionTrace) -> "TauSource":
        return cls("se", tuple(float(x) for x in trace.tau_sq))

    @classmethod
    def online(cls) -> "TauSource":
        return cls("online")

    def at(self, state: AmpState) -> float:
        if self.kind == "online":
            return state.tau_estimate
        if state.t >= len(self.tau_sq):
            raise ValueError(f"state-evolution trace has no tau^2 for t = {state.t}")
        return self.tau_sq[state.t]


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")


def initial_state(instance: ProblemInstance) -> AmpState:
    y = np.asarray(instance.y, dtype=float)
    if y.shape != (instance.n,):
        raise DimensionError(f"y has shape {y.shape}, expected ({instance.n},)")
    _check_finite(y, "y")
    z = y.copy()
    return AmpState(t=0, beta=np.zeros(instance.N), z=z, tau_estimate=estimate_tau(z))


def amp_step(state: AmpState, instance: ProblemInstance, denoiser: Denoiser,
             tau_source: TauSource) -> AmpState:
    """Advance from (beta^t, z^t) to (beta^{t+1}, z^{t+1})."""
    A, n, N = instance.A, instance.n, instance.N
    if state.beta.shape != (N,) or state.z.shape != (n,):
        raise DimensionError("state vectors do not match the instance dimensions")
    tau_sq = tau_source.at(state)
    s = A.T @ state.z + state.beta
    _check_finite(s, "effective observation")
    beta_next, coef = apply_denoiser(denoiser, s, tau_sq, n)
    _check_finite(beta_next, "denoiser output")
    onsager = coef * state.z
    z_next = instance.y - A @ beta_next + onsager
    _check_finite(z_next, "residual")
    return AmpState(
        t=state.t + 1, beta=beta_next, z=z_next, tau_estimate=estimate_tau(z_next),
        effective=s, onsager_coef=coef, onsager_norm=float(np.linalg.norm(onsager)),
        tau_used=tau_sq,
    )


@dataclass
class AmpRun:
    """History and per-iteration losses of one AMP run.

    ``mse[t]`` and ``l1[t]`` are (1/N)||beta^{t+1} - beta0||^2 and
    (1/N)||beta^{t+1} - beta0||_1 for t = 0..T-1. ``states`` holds
    beta^0..beta^T (only the last two when ``low_memory``).
    """

    states: list[AmpState]
    mse: list[float]
    l1: list[float]
    tau_est_sq: list[float]
    tau_se_sq: list[float]
    lambda_t: list[float]
    onsager_norm: list[float]
    low_memory: bool = False

    @property
    def T(self) -> int:
        return len(self.mse)

    def log_rows(self) -> list[dict]:
        return [
            {"t": t, "mse": self.mse[t], "l1_error": self.l1[t], "tau_est_sq": self.tau_est_sq[t],
             "tau_se_sq": self.tau_se_sq[t], "lambda_t": self.lambda_t[t],
             "onsager_norm": self.onsager_norm[t]}
            for t in range(self.T)
        ]


def run_amp(instance: ProblemInstance, denoiser: Denoiser, trace: StateEvolutionTrace | None = None,
            T: int | None = None, online_tau: bool = False, low_memory: bool = False) -> AmpRun:
    """Run T iterations, producing beta^1..beta^T.

    With ``T=None`` the run stops at the trace's stopping time T_star.
    SE-driven thresholds require T <= T_star; ``online_tau`` switches
    the noise level to ||z^t||^2 / n (then ``trace`` is optional and only
    fills the ``tau_se_sq`` column). An online run ends early if the
    residual becomes exactly zero.
    """
    if trace is None and not online_tau:
        raise ValueError("a state-evolution trace is required unless online_tau is set")
    if T is None:
        if trace is None:
            raise ValueError("T must be given when no trace is supplied")
        T = trace.T_star
    if T < 0:
        raise ValueError("T must be non-negative")
    if trace is not None and not online_tau and T > trace.T_star:
        raise ValueError(f"T = {T} exceeds the state-evolution stopping time {trace.T_star}")
    source = TauSource.online() if online_tau else TauSource.from_trace(trace)
    se_tau = list(trace.tau_sq) if trace is not None else []

    state = initial_state(instance)
    beta0 = np.asarray(instance.beta0, dtype=float)
    N = instance.N
    states = [state]
    run = AmpRun(states, [], [], [], [], [], [], low_memory)
    for t in range(T):
        if online_tau and state.tau_estimate == 0.0:
            break  # residual vanished: nothing left to estimate a noise level from
        run.tau_est_sq.append(state.tau_estimate)
        run.tau_se_sq.append(se_tau[t] if t < len(se_tau) else math.nan)
        run.lambda_t.append(0.0 - state.onsager_coef)
        run.onsager_norm.append(state.onsager_norm)
        state = amp_step(state, instance, denoiser, source)
        err = state.beta - beta0
        run.mse.append(float(err @ err) / N)
        run.l1.append(float(np.abs(err).sum()) / N)
        states.append(state)
        if low_memory and len(states) > 2:
            del states[0]
    return run


def write_run_log(run: AmpRun, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=RUN_LOG_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in run.log_rows():
        writer.writerow({k: (repr(float(v)) if k != "t" else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# general recursion


@dataclass
class RecursionTrace:
    """AMP recast as the (h, q, b, m) recursion.

    For t = 0..T: ``q[t]`` = beta^t - beta0, ``b[t]`` = w - z^t,
    ``m[t]`` = -z^t. For t = 0..T-1: ``h[t]`` stores h^{t+1} =
    beta0 - s^t. ``lam[t]`` and ``xi[t]`` for t = 0..T, with lam[0] = 0
    and xi identically 1.
    """

    h: list[np.ndarray]
    q: list[np.ndarray]
    b: list[np.ndarray]
    m: list[np.ndarray]
    lam: list[float]
    xi: list[float]
    beta0: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.q) - 1

    @property
    def n(self) -> int:
        return self.b[0].size

    @property
    def N(self) -> int:
        return self.q[0].size

    def Q(self, t: int) -> np.ndarray:
        """[q^0 | ... | q^{t-1}]"""
        return np.column_stack(self.q[:t]) if t else np.zeros((self.N, 0))

    def M(self, t: int) -> np.ndarray:
        return np.column_stack(self.m[:t]) if t else np.zeros((self.n, 0))

    def H(self, t: int) -> np.ndarray:
        """[h^1 | ... | h^t]"""
        return np.column_stack(self.h[:t]) if t else np.zeros((self.N, 0))

    def B(self, t: int) -> np.ndarray:
        return np.column_stack(self.b[:t]) if t else np.zeros((self.n, 0))

    def X(self, t: int) -> np.ndarray:
        """Columns h^{k+1} + xi_k q^k; equals A^T M(t)."""
        cols = [self.h[k] + self.xi[k] * self.q[k] for k in range(t)]
        return np.column_stack(cols) if t else np.zeros((self.N, 0))

    def Y(self, t: int) -> np.ndarray:
        """Columns b^k + lam_k m^{k-1}; equals A Q(t)."""
        cols = [self.b[0]] + [self.b[k] + self.lam[k] * self.m[k - 1] for k in range(1, t)]
        return np.column_stack(cols[:t]) if t else np.zeros((self.n, 0))


def general_recursion_vectors(run: AmpRun, instance: ProblemInstance) -> RecursionTrace:
    """Build h, q, b, m, lambda, xi from a full-history AMP run.

    lambda_t = -(1/n) sum_i eta'_{t-1}(s^{t-1}_i), evaluated at the
    effective observation s^{t-1} = A^T z^{t-1} + beta^{t-1}.
    """
    if run.low_memory:
        raise ValueError("low-memory runs keep no history; rerun with low_memory=False")
    if instance.beta0 is None or instance.w is None:
        raise ValueError("the recursion view needs the true signal and noise")
    beta0 = np.asarray(instance.beta0, dtype=float)
    w = np.asarray(instance.w, dtype=float)
    states = run.states
    q = [s.beta - beta0 for s in states]
    b = [w - s.z for s in states]
    m = [-s.z for s in states]
    h = [beta0 - s.effective for s in states[1:]]
    lam = [-s.onsager_coef for s in states]
    lam[0] = 0.0
    xi = [1.0] * len(states)
    return RecursionTrace(h=h, q=q, b=b, m=m, lam=lam, xi=xi, beta0=beta0, w=w)


@dataclass
class IdentityReport:
    """Relative residuals of the two recursion identities.

    ``b_residual[t]`` = ||b^t + lam_t m^{t-1} - A q^t|| over the sum of the
    operand norms (t = 0..T); ``h_residual[t]`` the same for
    h^{t+1} + xi_t q^t - A^T m^t (t = 0..T-1).
    """

    b_residual: np.ndarray
    h_residual: np.ndarray

    @property
    def max_residual(self) -> float:
        vals = np.concatenate([self.b_residual, self.h_residual])
        return float(vals.max()) if vals.size else 0.0

    def ok(self, tol: float = 1e-8) -> bool:
        return self.max_residual <= tol


def verify_recursion_identities(trace: RecursionTrace, instance: ProblemInstance) -> IdentityReport:
    A = instance.A
    rb = []
    for t in range(trace.T + 1):
        Aq = A @ trace.q[t]
        lhs = trace.b[t].copy()
        scale = np.linalg.norm(lhs) + np.linalg.norm(Aq)
        if t > 0:
            corr = trace.lam[t] * trace.m[t - 1]
            lhs += corr
            scale += np.linalg.norm(corr)
        rb.append(np.linalg.norm(lhs - Aq) / max(scale, np.finfo(float).tiny))
    rh = []
    for t in range(len(trace.h)):
        Atm = A.T @ trace.m[t]
        xq = trace.xi[t] * trace.q[t]
        scale = np.linalg.norm(trace.h[t]) + np.linalg.norm(xq) + np.linalg.norm(Atm)
        rh.append(np.linalg.norm(trace.h[t] + xq - Atm) / max(scale, np.finfo(float).tiny))
    return IdentityReport(np.array(rb), np.array(rh))


# ---------------------------------------------------------------------------
# projections


@dataclass
class ProjectionResult:
    coef: np.ndarray
    parallel: np.ndarray
    perp: np.ndarray
    orthogonality: float
    pythagoras: float


def least_squares_projection(X: np.ndarray, v: np.ndarray, rank_tol: float = RANK_TOL) -> ProjectionResult:
    """Project ``v`` onto the column span of ``X`` by a thin QR factorization.

    Raises :class:`SingularityError` when the smallest singular value of
    ``X`` is below ``rank_tol`` times the largest.

    ``orthogonality`` is max_j |x_j . v_perp| / (||x_j|| ||v||);
    ``pythagoras`` is | ||v||^2 - ||v_par||^2 - ||v_perp||^2 | / ||v||^2.
    """
    v = np.asarray(v, dtype=float)
    k = X.shape[1]
    vv = float(v @ v)
    if k == 0:
        return ProjectionResult(np.zeros(0), np.zeros_like(v), v.copy(), 0.0, 0.0)
    Qm, R = np.linalg.qr(X)
    sv = np.linalg.svd(R, compute_uv=False)
    if not sv[0] > 0 or sv[-1] < rank_tol * sv[0]:
        raise SingularityError(f"design matrix is rank deficient (singular values {sv[-1]:.3g}/{sv[0]:.3g})")
    coef = linalg.solve_triangular(R, Qm.T @ v)
    par = X @ coef
    perp = v - par
    col_norms = np.linalg.norm(X, axis=0)
    vn = math.sqrt(vv) if vv > 0 else 1.0
    orth = float(np.max(np.abs(X.T @ perp) / (col_norms * vn)))
    pyth = abs(vv - float(par @ par) - float(perp @ perp)) / (vv if vv > 0 else 1.0)
    return ProjectionResult(coef, par, perp, orth, pyth)


@dataclass
class ProjectionDiagnostics:
    """Empirical projection coefficients and their deviations from SE.

    ``gamma[t]`` / ``alpha[t]`` are the least-squares coefficients of
    q^t on Q(t) and m^t on M(t) (t = 1..T); ``q_perp_sq[t]`` and
    ``m_perp_sq[t]`` are (1/n) times the squared residual norms.
    ``rows`` lists every compared quantity as (metric, r, t, empirical,
    predicted, abs_dev).
    """

    gamma: list[np.ndarray]
    alpha: list[np.ndarray]
    q_perp_sq: list[float]
    m_perp_sq: list[float]
    orthogonality: float
    pythagoras: float
    grams: dict[str, np.ndarray]
    rows: list[tuple] = field(default_factory=list)

    def max_deviation(self, metric: str, t_max: int | None = None) -> float:
        vals = [row[5] for row in self.rows
                if row[0] == metric and (t_max is None or row[2] <= t_max) and not math.isnan(row[5])]
        return max(vals) if vals else math.nan

    @property
    def metrics(self) -> list[str]:
        return sorted({row[0] for row in self.rows})

    def summary(self, t_max: int | None = None) -> dict[str, float]:
        return {m: self.max_deviation(m, t_max) for m in self.metrics}


def projection_diagnostics(trace: RecursionTrace, se_trace: StateEvolutionTrace,
                           tables: CovarianceTables | None = None,
                           rank_tol: float = RANK_TOL) -> ProjectionDiagnostics:
    """Compare the recursion's empirical inner products with their SE limits.

    Uses ``se_trace.tables`` unless ``tables`` is given. Entries beyond the
    table size, or where the table holds NaN, are reported as NaN.
    """
    tables = tables if tables is not None else se_trace.tables
    if tables is None:
        raise ValueError("covariance tables are required; run state evolution with compute_tables=True")
    n, N, T = trace.n, trace.N, trace.T
    Et, Eb = tables.E_tilde, tables.E_breve
    size = Et.shape[0]

    def table(E, r, t):
        return float(E[r, t]) if r < size and t < size else math.nan

    def lam_hat(t):
        return float(se_trace.lambda_hat[t]) if t < len(se_trace.lambda_hat) else math.nan

    Qall = np.column_stack(trace.q)
    Mall = np.column_stack(trace.m)
    Ball = np.column_stack(trace.b)
    Hall = trace.H(len(trace.h))
    grams = {
        "b": Ball.T @ Ball / n,
        "m": Mall.T @ Mall / n,
        "q": Qall.T @ Qall / n,
        "h": Hall.T @ Hall / N,
        "bm": Ball.T @ Mall / n,
        "hq": Hall.T @ Qall / n,
    }
    rows: list[tuple] = []

    def add(metric, r, t, emp, pred):
        rows.append((metric, r, t, float(emp), pred, abs(float(emp) - pred)))

    for t in range(T + 1):
        for r in range(t + 1):
            add("b_gram", r, t, grams["b"][r, t], table(Et, r, t))
            add("q_gram", r, t, grams["q"][r, t], table(Et, r, t))
            add("m_gram", r, t, grams["m"][r, t], table(Eb, r, t))
        for r in range(T + 1):
            add("bm_cross", r, t, grams["bm"][r, t], table(Et, min(r, t), max(r, t)))
        add("bw", t, t, trace.b[t] @ trace.w / n, 0.0)
        if t >= 1:
            add("lambda", t, t, trace.lam[t], lam_hat(t))
        add("xi", t, t, trace.xi[t], 1.0)
    for t in range(len(trace.h)):
        for r in range(t + 1):
            add("h_gram", r, t, grams["h"][r, t], table(Eb, r, t))
        for r in range(len(trace.h)):
            pred = lam_hat(r + 1) * table(Eb, min(r, t), max(r, t))
            add("hq_cross", r, t, grams["hq"][t, r + 1], pred)
        add("hq0", 0, t, grams["hq"][t, 0], 0.0)
        add("hbeta0", 0, t, trace.h[t] @ trace.beta0 / n, 0.0)

    gammas, alphas, qp, mp = [np.zeros(0)], [np.zeros(0)], [], []
    orth = pyth = 0.0
    for t in range(T + 1):
        pq = least_squares_projection(Qall[:, :t], trace.q[t], rank_tol)
        pm = least_squares_projection(Mall[:, :t], trace.m[t], rank_tol)
        orth = max(orth, pq.orthogonality, pm.orthogonality)
        pyth = max(pyth, pq.pythagoras, pm.pythagoras)
        qp.append(float(pq.perp @ pq.perp) / n)
        mp.append(float(pm.perp @ pm.perp) / n)
        add("q_perp", t, t, qp[-1], _at(tables.sigma_perp_sq, t))
        add("m_perp", t, t, mp[-1], _at(tables.tau_perp_sq, t))
        if t == 0:
            continue
        gammas.append(pq.coef)
        alphas.append(pm.coef)
        g_hat = tables.gamma_hat[t] if t < len(tables.gamma_hat) else None
        a_hat = tables.alpha_hat[t] if t < len(tables.alpha_hat) else None
        for r in range(t):
            add("gamma", r, t, pq.coef[r], float(g_hat[r]) if g_hat is not None else math.nan)
            add("alpha", r, t, pm.coef[r], float(a_hat[r]) if a_hat is not None else math.nan)
    return ProjectionDiagnostics(gamma=gammas, alpha=alphas, q_perp_sq=qp, m_perp_sq=mp,
                                 orthogonality=orth, pythagoras=pyth, grams=grams, rows=rows)


def _at(seq: Sequence[float], t: int) -> float:
    return float(seq[t]) if t < len(seq) else math.nan


def write_diagnostics_csv(diag: ProjectionDiagnostics, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(DIAGNOSTIC_COLUMNS)
    for metric, r, t, emp, pred, dev in diag.rows:
        writer.writerow([metric, r, t, repr(emp), repr(pred), repr(dev)])
