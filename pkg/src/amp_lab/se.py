"""State evolution: scalar recursion, covariance tables and stopping rule.

All expectations over the Gaussian effective noise are computed by
tensor quadrature (see :func:`gh_expect`); expectations over the signal
are exact sums over prior atoms, with Gauss-Hermite nodes standing in for
Gaussian prior components.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from numpy.polynomial.legendre import leggauss
from scipy import linalg

from .denoise import Denoiser, NumericError, ParameterError
from .model import NoiseSpec, PriorError, SignalPrior, prior_second_moment

__all__ = [
    "SingularityError",
    "StoppingCriterion",
    "StopDecision",
    "StateEvolutionTrace",
    "CovarianceTables",
    "PureProcessCoefficients",
    "gh_expect",
    "normal_rule",
    "prior_rule",
    "noise_rule",
    "se_init",
    "se_step",
    "run_state_evolution",
    "covariance_tables",
    "projection_constants",
    "limit_scalars",
    "pure_process_coefficients",
    "check_stopping",
    "write_trace_csv",
    "TRACE_COLUMNS",
]

DEFAULT_ORDER = 61
ESCALATED_ORDER = 121
ESCALATION_TOL = 1e-8
# nodes per piece when the integrand has kinks (each piece is smooth)
PIECE_ORDER = 21
COND_LIMIT = 1e12
# Gaussian mass beyond +-10 is below 1e-22
_TRUNC = 10.0


class SingularityError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# quadrature rules


def _gh(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = hermgauss(order)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def normal_rule(order: int = DEFAULT_ORDER, breaks=None) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights with sum(w * f(z)) ~= E[f(Z)], Z ~ N(0, 1).

    Without ``breaks`` this is Gauss-Hermite. With ``breaks`` (shape
    ``(..., k)``) the line is cut at the breakpoints and each piece of
    [-10, 10] gets ``order`` Gauss-Legendre nodes weighted by the normal
    density, so piecewise-smooth integrands converge at the smooth rate.
    The leading dimensions of ``breaks`` are carried into the output.
    """
    if breaks is None:
        return _gh(order)
    b = np.asarray(breaks, dtype=float)
    lead = b.shape[:-1]
    b = np.clip(np.nan_to_num(b, nan=0.0, posinf=_TRUNC, neginf=-_TRUNC), -_TRUNC, _TRUNC)
    b = np.sort(b, axis=-1)
    edges = np.concatenate(
        [np.full(lead + (1,), -_TRUNC), b, np.full(lead + (1,), _TRUNC)], axis=-1
    )
    x, wl = leggauss(order)
    lo = edges[..., :-1, None]
    hi = edges[..., 1:, None]
    half = 0.5 * (hi - lo)
    z = 0.5 * (hi + lo) + half * x
    w = half * wl * np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return z.reshape(lead + (-1,)), w.reshape(lead + (-1,))


def prior_rule(prior: SignalPrior, order: int = DEFAULT_ORDER) -> tuple[np.ndarray, np.ndarray]:
    """Atoms and weights representing the signal law exactly (discrete
    parts) or by Gauss-Hermite nodes (Gaussian parts)."""
    if prior.kind == "rademacher":
        return np.array([-1.0, 1.0]), np.array([0.5, 0.5])
    if prior.kind == "point_mass":
        v, p = zip(*prior.atoms)
        return np.array(v, dtype=float), np.array(p, dtype=float)
    z, w = _gh(order)
    if prior.kind == "gaussian":
        return np.sqrt(prior.variance) * z, w
    xi = prior.sparsity
    return (
        np.concatenate([[0.0], np.sqrt(prior.variance) * z]),
        np.concatenate([[1.0 - xi], xi * w]),
    )


def noise_rule(noise: NoiseSpec, order: int = DEFAULT_ORDER) -> tuple[np.ndarray, np.ndarray]:
    sd = math.sqrt(noise.variance)
    if sd == 0:
        return np.array([0.0]), np.array([1.0])
    if noise.distribution == "gaussian":
        z, w = _gh(order)
        return sd * z, w
    if noise.distribution == "uniform":
        x, w = leggauss(order)
        return math.sqrt(3.0) * sd * x, 0.5 * w
    return np.array([-sd, sd]), np.array([0.5, 0.5])


def _marginal_rule(marginal, order):
    if marginal is None:
        return None, np.array([1.0])
    if isinstance(marginal, SignalPrior):
        return prior_rule(marginal, order)
    if isinstance(marginal, NoiseSpec):
        return noise_rule(marginal, order)
    x, w = marginal
    return np.asarray(x, dtype=float), np.asarray(w, dtype=float)


def _call(f, x, *z):
    return f(*z) if x is None else f(*z, x)


def _univariate(f, xs, xw, order, kinks):
    if xs is None:
        zb = None if kinks is None else np.asarray(kinks(None), dtype=float)
        z, w = normal_rule(order, zb)
        return float(np.sum(w * f(z)))
    if kinks is None:
        z, w = normal_rule(order)
        vals = f(z[None, :], xs[:, None])
        return float(xw @ (vals @ w))
    z, w = normal_rule(order, kinks(xs[:, None]))
    vals = f(z, xs[:, None])
    return float(xw @ np.sum(w * vals, axis=1))


def _bivariate_chunk(f, x, order, rho, kinks):
    s = math.sqrt(max(0.0, 1.0 - rho * rho))
    xcol = None if x is None else x[:, None]
    if s < 1e-6:
        # degenerate: z2 = rho z1 up to O(s^2)
        if kinks is None:
            b = None
        else:
            k1 = np.asarray(kinks[0](xcol), dtype=float)
            k2 = np.asarray(kinks[1](xcol), dtype=float)
            b = np.concatenate(np.broadcast_arrays(k1, rho * k2), axis=-1)
        z, w = normal_rule(order, b)
        if z.ndim == 1:
            z, w = np.broadcast_to(z, (1 if x is None else len(x),) + z.shape), w[None, :]
        vals = _call(f, xcol, z, rho * z)
        return np.sum(w * vals, axis=-1)
    if kinks is None:
        z, w = normal_rule(order)
        z1 = z[None, :, None]
        z2 = rho * z1 + s * z[None, None, :]
        xx = None if x is None else x[:, None, None]
        vals = _call(f, xx, z1, z2)
        return np.einsum("aij,i,j->a", vals, w, w)
    k1 = np.asarray(kinks[0](xcol), dtype=float)
    if abs(rho) > 1e-12:
        # the inner average is steep where rho z1 meets a z2 kink
        k1 = np.concatenate(np.broadcast_arrays(k1, np.asarray(kinks[1](xcol), dtype=float) / rho), axis=-1)
    if k1.ndim < 2:
        k1 = np.broadcast_to(k1, (1 if x is None else len(x), k1.shape[-1]))
    z1, w1 = normal_rule(order, k1)  # (A, P1)
    k2 = np.asarray(kinks[1](None if x is None else x[:, None, None]), dtype=float)
    inner_breaks = (k2 - rho * z1[..., None]) / s  # (A, P1, k)
    zp, wp = normal_rule(order, inner_breaks)  # (A, P1, P2)
    z2 = rho * z1[..., None] + s * zp
    xx = None if x is None else x[:, None, None]
    vals = _call(f, xx, z1[..., None], z2)
    return np.sum(w1 * np.sum(wp * vals, axis=-1), axis=-1)


def _bivariate(f, xs, xw, order, rho, kinks, chunk=8):
    if xs is None:
        return float(_bivariate_chunk(f, None, order, rho, kinks)[0])
    total = 0.0
    for i in range(0, len(xs), chunk):
        sl = slice(i, i + chunk)
        total += float(xw[sl] @ _bivariate_chunk(f, xs[sl], order, rho, kinks))
    return total


def gh_expect(
    f: Callable,
    marginal=None,
    rho: float | None = None,
    order: int = DEFAULT_ORDER,
    kinks=None,
    marginal_order: int = DEFAULT_ORDER,
    tol: float = ESCALATION_TOL,
    piece_order: int = PIECE_ORDER,
) -> float:
    """Expectation of ``f`` over standard Gaussians and an optional marginal.

    Univariate (``rho is None``): E[f(Z)] or E[f(Z, X)].
    Bivariate: E[f(Z1, Z2)] or E[f(Z1, Z2, X)] with corr(Z1, Z2) = rho,
    realized as Z2 = rho Z1 + sqrt(1 - rho^2) Z'.

    ``marginal`` is a SignalPrior, a NoiseSpec, an (atoms, weights) pair or
    None; X is independent of the Gaussians. ``f`` must broadcast.

    ``kinks`` lists where ``f`` fails to be smooth in z: a callable
    ``x -> array(..., k)`` for the univariate case, a pair of such
    callables (kinks in z1, kinks in z2) for the bivariate case. With
    kinks the Gaussian axes use piecewise Gauss-Legendre instead of
    Gauss-Hermite, with ``piece_order`` nodes per piece in place of
    ``order``.

    The result at ``order`` is compared with the result at
    ``2 * order - 1``; if they differ by more than ``tol`` the finer
    value is returned.
    """
    if rho is not None:
        if not abs(rho) <= 1.0:
            raise ParameterError(f"correlation {rho} outside [-1, 1]")
    xs, xw = _marginal_rule(marginal, marginal_order)

    def at(k):
        if rho is None:
            return _univariate(f, xs, xw, k, kinks)
        return _bivariate(f, xs, xw, k, rho, kinks)

    if kinks is not None:
        order = piece_order
    coarse = at(order)
    if tol is None:
        value = coarse
    else:
        fine = at(2 * order - 1)
        value = fine if abs(fine - coarse) > tol else coarse
    if not math.isfinite(value):
        raise NumericError("quadrature produced a non-finite value")
    return value


# ---------------------------------------------------------------------------
# scalar recursion


def se_init(prior: SignalPrior, delta: float) -> float:
    """sigma_0^2 = E[beta^2] / delta."""
    if not delta > 0:
        raise ParameterError("delta must be positive")
    m2 = prior_second_moment(prior)
    if not m2 > 0:
        raise PriorError("signal second moment must be positive")
    return m2 / delta


def _s_kinks(denoiser: Denoiser, tau_sq: float):
    k = denoiser.breakpoints(tau_sq)
    if not k:
        return None
    tau = math.sqrt(tau_sq)
    kk = np.array(k)
    return lambda x: (kk - (0.0 if x is None else x)) / tau


def se_step(prior: SignalPrior, noise_var: float, delta: float, denoiser: Denoiser,
            tau_sq_prev: float, order: int = DEFAULT_ORDER) -> tuple[float, float]:
    """One state-evolution step: (sigma_t^2, tau_t^2) from tau_{t-1}^2.

    sigma_t^2 = E[(eta_{t-1}(beta + tau_{t-1} Z) - beta)^2] / delta.
    """
    if not tau_sq_prev > 0:
        raise ParameterError("tau_{t-1}^2 must be positive")
    tau = math.sqrt(tau_sq_prev)

    def err2(z, b):
        e = denoiser.eta(b + tau * z, tau_sq_prev) - b
        return e * e

    sigma_sq = gh_expect(err2, prior, order=order, kinks=_s_kinks(denoiser, tau_sq_prev)) / delta
    return sigma_sq, noise_var + sigma_sq


@dataclass(frozen=True)
class StoppingCriterion:
    """Either ``bayes`` (eps0, eps0_prime) or ``general`` (eps1, eps2, eps3)."""

    mode: str
    eps0: float | None = None
    eps0_prime: float | None = None
    eps1: float | None = None
    eps2: float | None = None
    eps3: float | None = None

    def __post_init__(self):
        if self.mode == "bayes":
            if not (self.eps0 is not None and self.eps0 > 0):
                raise ParameterError("eps0 must be positive")
            if not (self.eps0_prime is not None and 0 < self.eps0_prime < 1):
                raise ParameterError("eps0_prime must lie in (0, 1)")
        elif self.mode == "general":
            for name in ("eps1", "eps2", "eps3"):
                v = getattr(self, name)
                if not (v is not None and v > 0):
                    raise ParameterError(f"{name} must be positive")
        else:
            raise ParameterError(f"unknown stopping mode {self.mode!r}")

    @classmethod
    def bayes(cls, eps0: float, eps0_prime: float) -> "StoppingCriterion":
        return cls("bayes", eps0=eps0, eps0_prime=eps0_prime)

    @classmethod
    def general(cls, eps1: float, eps2: float, eps3: float) -> "StoppingCriterion":
        return cls("general", eps1=eps1, eps2=eps2, eps3=eps3)

    def to_dict(self) -> dict:
        keys = ("eps0", "eps0_prime") if self.mode == "bayes" else ("eps1", "eps2", "eps3")
        return {"mode": self.mode, **{k: getattr(self, k) for k in keys}}

    @classmethod
    def from_dict(cls, d) -> "StoppingCriterion":
        d = dict(d)
        mode = d.pop("mode", None)
        allowed = {"bayes": {"eps0", "eps0_prime"}, "general": {"eps1", "eps2", "eps3"}}
        if mode not in allowed:
            raise ParameterError(f"unknown stopping mode {mode!r}")
        extra = set(d) - allowed[mode]
        if extra:
            raise ParameterError(f"unknown keys for {mode} stopping: {sorted(extra)}")
        return cls(mode, **{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: str | None = None


def check_stopping(sigma_sq: Sequence[float], criterion: StoppingCriterion,
                   sigma_perp_sq: float | None = None,
                   tau_perp_sq: float | None = None) -> StopDecision:
    """Evaluate the stopping rule at t = len(sigma_sq) - 1 (requires t >= 1).

    ``sigma_perp_sq`` and ``tau_perp_sq`` are the perpendicular variances
    at that t, needed in ``general`` mode only.
    """
    t = len(sigma_sq) - 1
    if t < 1:
        raise ValueError("stopping is only evaluated for t >= 1")
    s_t = sigma_sq[t]
    if criterion.mode == "bayes":
        if s_t < criterion.eps0:
            return StopDecision(True, "small_error")
        if s_t / sigma_sq[t - 1] > 1.0 - criterion.eps0_prime:
            return StopDecision(True, "stalled")
        return StopDecision(False)
    if s_t < criterion.eps1:
        return StopDecision(True, "small_error")
    if sigma_perp_sq is None or tau_perp_sq is None:
        raise ValueError("general stopping needs both perpendicular variances")
    if not sigma_perp_sq >= criterion.eps2:
        return StopDecision(True, "sigma_perp_floor")
    if not tau_perp_sq >= criterion.eps3:
        return StopDecision(True, "tau_perp_floor")
    return StopDecision(False)


# ---------------------------------------------------------------------------
# covariance tables


@dataclass
class CovarianceTables:
    """E-tilde / E-breve tables with their projection constants.

    ``E_tilde[r, t]`` and ``E_breve[r, t]`` for 0 <= r, t <= T;
    ``gamma_hat[t]`` / ``alpha_hat[t]`` (length t, t >= 1; entry 0 is an
    empty array); perpendicular variances for t = 0..T.
    """

    E_tilde: np.ndarray
    E_breve: np.ndarray
    gamma_hat: list[np.ndarray]
    alpha_hat: list[np.ndarray]
    sigma_perp_sq: np.ndarray
    tau_perp_sq: np.ndarray

    @property
    def T(self) -> int:
        return self.E_tilde.shape[0] - 1

    def C_tilde(self, t: int) -> np.ndarray:
        return self.E_tilde[:t, :t].copy()

    def C_breve(self, t: int) -> np.ndarray:
        return self.E_breve[:t, :t].copy()


def _solve_spd(C: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(C)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularityError(f"{what} is numerically singular (condition number {cond:.3g})")
    try:
        return linalg.cho_solve(linalg.cho_factor(C), rhs)
    except linalg.LinAlgError as exc:
        raise SingularityError(f"{what} is not positive definite") from exc


def _corr(cov: float, v1: float, v2: float) -> float:
    rho = cov / math.sqrt(v1 * v2)
    if abs(rho) > 1.0 + 1e-9:
        raise NumericError(f"correlation {rho} outside [-1, 1]")
    return max(-1.0, min(1.0, rho))


class _TableBuilder:
    """Grows the E-tilde / E-breve tables one iteration at a time."""

    def __init__(self, prior, noise, delta, denoiser, order=DEFAULT_ORDER):
        self.prior = prior
        self.noise = noise
        self.delta = delta
        self.denoiser = denoiser
        self.order = order
        self.tau_sq: list[float] = []
        self.sigma_sq: list[float] = []
        self.Et = np.zeros((0, 0))
        self.Eb = np.zeros((0, 0))
        self.gamma_hat: list[np.ndarray] = []
        self.alpha_hat: list[np.ndarray] = []
        self.sigma_perp_sq: list[float] = []
        self.tau_perp_sq: list[float] = []

    def _f_integrand(self, r: int):
        # f_r evaluated at tau_{r-1} z for the AMP choice of f (sign of z flipped)
        if r == 0:
            return (lambda z, b: -b + 0.0 * z), None
        tsq = self.tau_sq[r - 1]
        tau = math.sqrt(tsq)
        d = self.denoiser
        return (lambda z, b: d.eta(b + tau * z, tsq) - b), _s_kinks(d, tsq)

    def _E_tilde(self, r: int, t: int) -> float:
        fr, kr = self._f_integrand(r)
        ft, kt = self._f_integrand(t)
        if r == 0 and t == 0:
            return prior_second_moment(self.prior) / self.delta
        if r == 0:
            return gh_expect(lambda z, b: fr(z, b) * ft(z, b), self.prior,
                             order=self.order, kinks=kt) / self.delta
        rho = _corr(self.Eb[r - 1, t - 1], self.tau_sq[r - 1], self.tau_sq[t - 1])
        kinks = None
        if kr is not None or kt is not None:
            none = lambda x: np.zeros(np.shape(x)[:-1] + (0,)) if x is not None else np.zeros(0)
            kinks = (kr or none, kt or none)
        return gh_expect(lambda z1, z2, b: fr(z1, b) * ft(z2, b), self.prior, rho=rho,
                         order=self.order, kinks=kinks) / self.delta

    def _E_breve(self, r: int, t: int, E_tilde_rt: float) -> float:
        sr, st = math.sqrt(self.sigma_sq[r]), math.sqrt(self.sigma_sq[t])
        rho = _corr(E_tilde_rt, self.sigma_sq[r], self.sigma_sq[t])
        # g(a, w) = a - w, smooth: plain Gauss-Hermite
        return gh_expect(lambda z1, z2, w: (sr * z1 - w) * (st * z2 - w), self.noise,
                         rho=rho, order=self.order)

    def add(self, sigma_sq_t: float, tau_sq_t: float) -> None:
        t = len(self.sigma_sq)
        self.sigma_sq.append(sigma_sq_t)
        self.tau_sq.append(tau_sq_t)
        Et = np.zeros((t + 1, t + 1))
        Eb = np.zeros((t + 1, t + 1))
        Et[:t, :t] = self.Et
        Eb[:t, :t] = self.Eb
        self.Et, self.Eb = Et, Eb
        for r in range(t + 1):
            e = self._E_tilde(r, t)
            Et[r, t] = Et[t, r] = e
            b = self._E_breve(r, t, e)
            Eb[r, t] = Eb[t, r] = b
        if t == 0:
            self.gamma_hat.append(np.zeros(0))
            self.alpha_hat.append(np.zeros(0))
            self.sigma_perp_sq.append(float(Et[0, 0]))
            self.tau_perp_sq.append(float(Eb[0, 0]))
            return
        g = _solve_spd(Et[:t, :t], Et[:t, t], f"C_tilde^{t}")
        a = _solve_spd(Eb[:t, :t], Eb[:t, t], f"C_breve^{t}")
        self.gamma_hat.append(g)
        self.alpha_hat.append(a)
        self.sigma_perp_sq.append(float(Et[t, t] - g @ Et[:t, t]))
        self.tau_perp_sq.append(float(Eb[t, t] - a @ Eb[:t, t]))

    def tables(self) -> CovarianceTables:
        return CovarianceTables(
            E_tilde=self.Et.copy(),
            E_breve=self.Eb.copy(),
            gamma_hat=list(self.gamma_hat),
            alpha_hat=list(self.alpha_hat),
            sigma_perp_sq=np.array(self.sigma_perp_sq),
            tau_perp_sq=np.array(self.tau_perp_sq),
        )


def limit_scalars(trace: "StateEvolutionTrace", prior: SignalPrior, denoiser: Denoiser,
                  t: int, order: int = DEFAULT_ORDER) -> tuple[float, float]:
    """(lambda_hat_t, xi_hat_t) for AMP.

    lambda_hat_t = -E[eta'_{t-1}(beta + tau_{t-1} Z)] / delta (zero at
    t = 0, where f_0 does not depend on its first argument); xi_hat_t = 1.
    """
    if t == 0:
        return 0.0, 1.0
    return _lambda_hat(prior, trace.delta, denoiser, trace.tau_sq[t - 1], order), 1.0


def _lambda_hat(prior, delta, denoiser, tau_sq_prev, order=DEFAULT_ORDER):
    tau = math.sqrt(tau_sq_prev)
    val = gh_expect(lambda z, b: denoiser.deriv(b + tau * z, tau_sq_prev), prior,
                    order=order, kinks=_s_kinks(denoiser, tau_sq_prev))
    return -val / delta


# ---------------------------------------------------------------------------
# trace


TRACE_COLUMNS = ["t", "sigma_sq", "tau_sq", "sigma_perp_sq", "tau_perp_sq",
                 "lambda_hat", "xi_hat", "stopped_reason"]


@dataclass
class StateEvolutionTrace:
    """State-evolution quantities for t = 0..T_star.

    AMP driven by this trace runs iterations 0 <= t < T_star.
    ``sigma_perp_sq`` / ``tau_perp_sq`` hold NaN where the tables were not
    computed (or became singular outside ``general`` stopping).
    """

    prior: SignalPrior
    noise: NoiseSpec
    delta: float
    denoiser: Denoiser
    sigma_sq: list[float]
    tau_sq: list[float]
    lambda_hat: list[float]
    xi_hat: list[float]
    sigma_perp_sq: list[float]
    tau_perp_sq: list[float]
    T_star: int
    stop_reason: str
    tables: CovarianceTables | None = field(default=None, repr=False)

    @property
    def noise_var(self) -> float:
        return self.noise.variance

    def rows(self) -> list[dict]:
        out = []
        for t in range(len(self.sigma_sq)):
            out.append({
                "t": t,
                "sigma_sq": self.sigma_sq[t],
                "tau_sq": self.tau_sq[t],
                "sigma_perp_sq": self.sigma_perp_sq[t],
                "tau_perp_sq": self.tau_perp_sq[t],
                "lambda_hat": self.lambda_hat[t],
                "xi_hat": self.xi_hat[t],
                "stopped_reason": self.stop_reason if t == self.T_star else "",
            })
        return out


def write_trace_csv(trace: StateEvolutionTrace, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in trace.rows():
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def run_state_evolution(prior: SignalPrior, noise: NoiseSpec, delta: float, denoiser: Denoiser,
                        stopping: StoppingCriterion | None = None, t_max: int = 30,
                        compute_tables: bool = True,
                        order: int = DEFAULT_ORDER) -> StateEvolutionTrace:
    """Iterate state evolution until the stopping rule fires or t_max.

    Stopping is tested at every t >= 1; ``T_star`` is the first t at which
    it fires, or ``t_max``. A trace whose tau_t^2 reaches zero (noiseless
    exact recovery) ends there with reason ``zero_tau``. The covariance tables are grown alongside (they
    are required for ``general`` stopping). Outside ``general`` mode a
    singular table ends table growth and leaves NaN perpendicular values.
    """
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    need_tables = compute_tables or (stopping is not None and stopping.mode == "general")
    sigma_sq = [se_init(prior, delta)]
    tau_sq = [noise.variance + sigma_sq[0]]
    lam = [0.0]
    builder = _TableBuilder(prior, noise, delta, denoiser, order) if need_tables else None
    tables_ok = builder is not None
    if tables_ok:
        builder.add(sigma_sq[0], tau_sq[0])
    T_star, reason = t_max, "t_max"
    for t in range(1, t_max + 1):
        s, tsq = se_step(prior, noise.variance, delta, denoiser, tau_sq[-1], order)
        sigma_sq.append(s)
        tau_sq.append(tsq)
        lam.append(_lambda_hat(prior, delta, denoiser, tau_sq[t - 1], order))
        if not tsq > 0:
            # noiseless exact recovery: there is no next noise level to run at
            T_star, reason = t, "zero_tau"
            break
        if tables_ok:
            try:
                builder.add(s, tsq)
            except SingularityError:
                if stopping is not None and stopping.mode == "general":
                    raise
                tables_ok = False
        sp = builder.sigma_perp_sq[t] if tables_ok else None
        tp = builder.tau_perp_sq[t] if tables_ok else None
        if stopping is not None:
            decision = check_stopping(sigma_sq, stopping, sp, tp)
            if decision.stop:
                T_star, reason = t, decision.reason
                break
    n_rows = len(sigma_sq)
    if builder is not None:
        sperp = list(builder.sigma_perp_sq) + [math.nan] * (n_rows - len(builder.sigma_perp_sq))
        tperp = list(builder.tau_perp_sq) + [math.nan] * (n_rows - len(builder.tau_perp_sq))
        tables = builder.tables()
    else:
        sperp = tperp = [math.nan] * n_rows
        tables = None
    return StateEvolutionTrace(
        prior=prior, noise=noise, delta=delta, denoiser=denoiser,
        sigma_sq=sigma_sq, tau_sq=tau_sq, lambda_hat=lam, xi_hat=[1.0] * n_rows,
        sigma_perp_sq=sperp, tau_perp_sq=tperp, T_star=T_star, stop_reason=reason,
        tables=tables,
    )


def covariance_tables(trace: StateEvolutionTrace, prior: SignalPrior, noise: NoiseSpec,
                      denoiser: Denoiser, T: int, order: int = DEFAULT_ORDER) -> CovarianceTables:
    """Build the E-tilde / E-breve tables and projection constants through T.

    Raises :class:`SingularityError` when a C matrix has condition number
    above 1e12.
    """
    if T >= len(trace.sigma_sq):
        raise ValueError(f"trace only reaches t = {len(trace.sigma_sq) - 1}")
    builder = _TableBuilder(prior, noise, trace.delta, denoiser, order)
    for t in range(T + 1):
        builder.add(trace.sigma_sq[t], trace.tau_sq[t])
    return builder.tables()


def projection_constants(tables: CovarianceTables, t: int):
    """(gamma_hat^t, alpha_hat^t, sigma_perp_t^2, tau_perp_t^2) by Cholesky solves."""
    if t == 0:
        return np.zeros(0), np.zeros(0), float(tables.E_tilde[0, 0]), float(tables.E_breve[0, 0])
    Et, Eb = tables.E_tilde, tables.E_breve
    g = _solve_spd(Et[:t, :t], Et[:t, t], f"C_tilde^{t}")
    a = _solve_spd(Eb[:t, :t], Eb[:t, t], f"C_breve^{t}")
    return g, a, float(Et[t, t] - g @ Et[:t, t]), float(Eb[t, t] - a @ Eb[:t, t])


@dataclass
class PureProcessCoefficients:
    c: list[np.ndarray]
    d: list[np.ndarray]


def pure_process_coefficients(gamma_hat: Sequence[np.ndarray], alpha_hat: Sequence[np.ndarray],
                              T: int) -> PureProcessCoefficients:
    """Triangular tables c[t][i], d[t][i] (0 <= i <= t <= T).

    c[t][t] = 1 and c[t][i] = sum_{r=i}^{t-1} c[r][i] * gamma_hat[t][r];
    likewise d with alpha_hat.
    """
    def build(coef):
        out = [np.array([1.0])]
        for t in range(1, T + 1):
            row = np.empty(t + 1)
            row[t] = 1.0
            for i in range(t):
                row[i] = sum(out[r][i] * coef[t][r] for r in range(i, t))
            out.append(row)
        return out

    return PureProcessCoefficients(c=build(gamma_hat), d=build(alpha_hat))
