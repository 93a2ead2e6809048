"""Tail bounds, bound combinators and Monte Carlo checks of their validity.

Bounds of the shape ``K * exp(-kappa * n * eps**p)`` are carried as
:class:`TailBound` and evaluated in log space, so very small
probabilities underflow to 0.0 rather than raising.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "TailBound",
    "PLFunction",
    "PL2Check",
    "BoundCheck",
    "hoeffding_bound",
    "gaussian_tail",
    "chi2_tail",
    "pl_subgauss_bound",
    "combine_bounds",
    "verify_pl2",
    "theorem1_constants",
    "max_t",
    "moment_bound",
    "binomial_slack",
    "validate_tail_bounds",
    "validate_combinators",
    "run_validation_suites",
    "SIM_TRIALS",
]

SIM_TRIALS = 100_000


class DomainError(ValueError):
    """An argument lies outside the range where a bound is stated."""


@dataclass(frozen=True)
class TailBound:
    """P(|X_n - c| >= eps) <= K exp(-kappa n eps^p) for eps <= eps_max."""

    K: float
    kappa: float
    p: int = 2
    eps_max: float = math.inf

    def __post_init__(self):
        if not (self.K > 0 and self.kappa > 0):
            raise DomainError("tail bound needs K > 0 and kappa > 0")
        if self.p not in (1, 2):
            raise DomainError("exponent power must be 1 or 2")

    def log_value(self, n: float, eps: float) -> float:
        if eps < 0:
            raise DomainError("eps must be non-negative")
        if eps > self.eps_max:
            raise DomainError(f"bound only stated for eps <= {self.eps_max}")
        return math.log(self.K) - self.kappa * n * eps**self.p

    def __call__(self, n: float, eps: float) -> float:
        return _exp(self.log_value(n, eps))


def _exp(x: float) -> float:
    return math.exp(x) if x < 700 else math.inf


def hoeffding_bound(n: int, ranges: Sequence[tuple[float, float]] | np.ndarray, eps: float,
                    two_sided: bool = True) -> float:
    """Hoeffding bound for the deviation of a mean of bounded variables.

    ``ranges`` holds (a_i, b_i) per variable, or a single pair applied to
    all ``n``. Returns exp(-nu n^2 eps^2), doubled when two-sided, with
    nu = 2 / sum (b_i - a_i)^2.
    """
    r = np.asarray(ranges, dtype=float)
    if r.size == 0:
        raise DomainError("no variable ranges given")
    r = np.broadcast_to(r.reshape(-1, 2), (n, 2)) if r.reshape(-1, 2).shape[0] == 1 else r.reshape(-1, 2)
    if r.shape[0] != n:
        raise DomainError(f"expected {n} ranges, got {r.shape[0]}")
    widths = r[:, 1] - r[:, 0]
    if np.any(widths <= 0):
        raise DomainError("every range must have b_i > a_i")
    nu = 2.0 / float(np.sum(widths**2))
    log_b = -nu * n * n * eps * eps + (math.log(2.0) if two_sided else 0.0)
    return _exp(log_b)


def gaussian_tail(eps: float) -> float:
    """P(|Z| >= eps) <= 2 exp(-eps^2 / 2)."""
    if eps < 0:
        raise DomainError("eps must be non-negative")
    return 2.0 * math.exp(-0.5 * eps * eps)


def chi2_tail(n: int, eps: float) -> float:
    """P(|chi2_n / n - 1| >= eps) <= 2 exp(-n eps^2 / 8), for 0 <= eps <= 1."""
    if not 0 <= eps <= 1:
        raise DomainError("chi-square bound is stated for 0 <= eps <= 1")
    return _exp(math.log(2.0) - n * eps * eps / 8.0)


def pl_subgauss_bound(N: int, eps: float, t: int, L: float, nu: float, sigmas: Sequence[float]) -> float:
    """Deviation bound for averages of a PL(2) function of Gaussians and a sub-Gaussian.

    2 exp{-N eps^2 / [128 L^2 (t+1)^2 (nu + 4 nu^2 + sum_m (s_m^2 + 4 s_m^4))]}
    with ``len(sigmas) == t``.
    """
    if not 0 < eps <= 1:
        raise DomainError("bound is stated for 0 < eps <= 1")
    if t < 1 or len(sigmas) != t:
        raise DomainError("need t >= 1 and exactly t sigma values")
    if L <= 0 or nu <= 0:
        raise DomainError("L and nu must be positive")
    s = np.asarray(sigmas, dtype=float)
    denom = 128.0 * L * L * (t + 1) ** 2 * (nu + 4 * nu * nu + float(np.sum(s**2 + 4 * s**4)))
    return _exp(math.log(2.0) - N * eps * eps / denom)


def combine_bounds(kind: str, inputs: TailBound | Sequence[TailBound], c: float | None = None,
                   c_x: float | None = None, c_y: float | None = None, k: int | None = None) -> TailBound:
    """Tail bound of a derived quantity from bounds on its ingredients.

    kind
        ``sum`` of M terms: (M K, kappa / M^2) using the worst input;
        ``product`` (c_x, c_y): (2K, kappa / (9 max(1, c_x^2, c_y^2)));
        ``sqrt`` (c): (K, kappa c^2);
        ``power`` (k, c): (K, kappa / ((1+|c|)^k - |c|^k)^2), eps <= 1;
        ``inverse`` (c): (2K, kappa c^2 min(c^2, 1) / 4), eps < 1.
    """
    bounds = [inputs] if isinstance(inputs, TailBound) else list(inputs)
    if not bounds:
        raise DomainError("no input bounds")
    if any(b.p != 2 for b in bounds):
        raise DomainError("combinators apply to eps^2 bounds")
    K = max(b.K for b in bounds)
    kappa = min(b.kappa for b in bounds)
    eps_max = min(b.eps_max for b in bounds)
    if kind == "sum":
        M = len(bounds)
        return TailBound(M * K, kappa / M**2, 2, eps_max)
    if kind == "product":
        if not c_x or not c_y:
            raise DomainError("product needs non-zero c_x and c_y")
        return TailBound(2 * K, kappa / (9 * max(1.0, c_x**2, c_y**2)), 2, eps_max)
    if c is None or c == 0:
        raise DomainError(f"{kind} needs a non-zero constant c")
    if kind == "sqrt":
        return TailBound(K, kappa * c * c, 2, eps_max)
    if kind == "power":
        if k is None or k < 2 or int(k) != k:
            raise DomainError("power needs an integer k >= 2")
        a = abs(c)
        return TailBound(K, kappa / ((1 + a) ** k - a**k) ** 2, 2, min(eps_max, 1.0))
    if kind == "inverse":
        return TailBound(2 * K, kappa * c * c * min(c * c, 1.0) / 4, 2, min(eps_max, 1.0))
    raise DomainError(f"unknown combinator {kind!r}")


# ---------------------------------------------------------------------------
# pseudo-Lipschitz checks


@dataclass(frozen=True)
class PLFunction:
    """A function of ``arity`` real arguments with declared PL(2) constant ``L``.

    ``fn`` takes an array of shape (m, arity) and returns shape (m,).
    """

    arity: int
    fn: Callable[[np.ndarray], np.ndarray]
    L: float


@dataclass
class PL2Check:
    passed: bool
    counterexample: tuple[np.ndarray, np.ndarray] | None = None
    worst_ratio: float = 0.0


def _ball(rng, m, d, radius):
    g = rng.standard_normal((m, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * radius * rng.random((m, 1)) ** (1.0 / d)


def verify_pl2(f: PLFunction, budget: int = 100_000, radius: float = 5.0, seed: int = 0) -> PL2Check:
    """Search a ball for a pair violating |f(x)-f(y)| <= L(1+|x|+|y|)|x-y|.

    Half the pairs are independent uniform points, half are close pairs
    near the boundary where growth is largest. Returns the first violating
    pair found, and the largest ratio of the two sides seen.
    """
    rng = np.random.default_rng(seed)
    d = f.arity
    m = budget // 2
    x1, y1 = _ball(rng, m, d, radius), _ball(rng, m, d, radius)
    x2 = _ball(rng, budget - m, d, radius)
    x2 *= (radius / np.maximum(np.linalg.norm(x2, axis=1, keepdims=True), 1e-300)) ** 0.5
    y2 = x2 + 0.1 * radius * rng.standard_normal(x2.shape) * rng.random((x2.shape[0], 1))
    y2 *= np.minimum(1.0, radius / np.maximum(np.linalg.norm(y2, axis=1, keepdims=True), 1e-300))
    x, y = np.vstack([x1, x2]), np.vstack([y1, y2])
    lhs = np.abs(f.fn(x) - f.fn(y))
    dist = np.linalg.norm(x - y, axis=1)
    rhs = f.L * (1 + np.linalg.norm(x, axis=1) + np.linalg.norm(y, axis=1)) * dist
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
    bad = np.flatnonzero(lhs > rhs * (1 + 1e-12) + 1e-300)
    worst = float(np.max(ratio)) if ratio.size else 0.0
    if bad.size:
        i = bad[0]
        return PL2Check(False, (x[i].copy(), y[i].copy()), worst)
    return PL2Check(True, None, worst)


# ---------------------------------------------------------------------------
# finite-sample constants


def theorem1_constants(t: int, C: float, c: float) -> tuple[float, float, float, float]:
    """(K_t, kappa_t, K'_t, kappa'_t) for user-chosen universal constants C, c.

    K_t = C^{2t} (t!)^10, kappa_t = 1 / (c^{2t} (t!)^22),
    K'_t = C (t+1)^5 K_t, kappa'_t = kappa_t / (c (t+1)^11).
    Large t overflows to inf / underflows to 0.
    """
    if not (C > 0 and c > 0):
        raise DomainError("C and c must be positive")
    if t < 0:
        raise DomainError("t must be non-negative")
    try:
        f = math.factorial(t)
        K = C ** (2 * t) * float(f**10)
        kappa = 1.0 / (c ** (2 * t) * float(f**22))
    except OverflowError:
        lf = math.lgamma(t + 1)
        K = _exp(2 * t * math.log(C) + 10 * lf)
        kappa = _exp(-(2 * t * math.log(c) + 22 * lf))
    return K, kappa, C * (t + 1) ** 5 * K, kappa / (c * (t + 1) ** 11)


def max_t(n: float, eps: float, c: float = 1.0, t_limit: int = 1000) -> int:
    """Largest t such that kappa_s n eps^2 >= 1 for every s <= t (-1 if none)."""
    if not (n > 0 and eps > 0 and c > 0):
        raise DomainError("n, eps and c must be positive")
    log_ne = math.log(n) + 2 * math.log(eps)
    t = -1
    while t + 1 <= t_limit:
        s = t + 1
        if log_ne - 2 * s * math.log(c) - 22 * math.lgamma(s + 1) < 0:
            break
        t = s
    return t


def moment_bound(k: int, nu: float) -> float:
    """Upper bound k! (4 nu)^k on E[X^{2k}] for sub-Gaussian X with variance factor nu."""
    if k < 1:
        raise DomainError("k must be a positive integer")
    return math.factorial(k) * (4 * nu) ** k


# ---------------------------------------------------------------------------
# simulation suites


@dataclass
class BoundCheck:
    """One (n, eps) cell: empirical exceedance frequency against a bound."""

    suite: str
    n: int
    eps: float
    empirical: float
    bound: float
    slack: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.empirical <= self.bound + self.slack


def binomial_slack(bound: float, trials: int, n_se: float = 3.0) -> float:
    """``n_se`` binomial standard errors at success probability min(bound, 1)."""
    p = min(max(bound, 0.0), 1.0)
    return n_se * math.sqrt(p * (1 - p) / trials)


def _check(suite, n, eps, hits, bound, trials):
    return BoundCheck(suite, n, eps, float(np.mean(hits)), bound, binomial_slack(bound, trials), trials)


HOEFFDING_GRID = [(n, e) for n in (10, 50, 200) for e in (0.05, 0.1, 0.2, 0.3)]
GAUSSIAN_GRID = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
CHI2_GRID = [(n, e) for n in (50, 200, 800) for e in (0.1, 0.3, 0.5)]
PL_GRID = [(n, e) for n in (100, 1000, 10000) for e in (0.1, 0.5, 1.0)]
COMBINATOR_GRID = [(n, e) for n in (50, 200, 800) for e in (0.05, 0.1, 0.2)]


def validate_tail_bounds(trials: int = SIM_TRIALS, seed: int = 0, rate_scale: float = 1.0) -> list[BoundCheck]:
    """Hoeffding (Bernoulli means), Gaussian, chi-square and PL sub-Gaussian suites.

    ``rate_scale`` multiplies every exponent; values above 1 give
    deliberately wrong (too tight) bounds for sensitivity probes.
    """
    rng = np.random.default_rng(seed)
    out = []
    for n, eps in HOEFFDING_GRID:
        mean = rng.binomial(n, 0.5, trials) / n
        b = hoeffding_bound(n, [(0.0, 1.0)], eps * math.sqrt(rate_scale))
        out.append(_check("hoeffding", n, eps, np.abs(mean - 0.5) >= eps, b, trials))
    z = rng.standard_normal(trials)
    for eps in GAUSSIAN_GRID:
        b = gaussian_tail(eps * math.sqrt(rate_scale))
        out.append(_check("gaussian", 1, eps, np.abs(z) >= eps, b, trials))
    for n, eps in CHI2_GRID:
        dev = np.abs(rng.chisquare(n, trials) / n - 1)
        b = _exp(math.log(2.0) - rate_scale * n * eps * eps / 8.0)
        out.append(_check("chi2", n, eps, dev >= eps, b, trials))
    # phi(x, g) = x g with x = Z, g ~ N(0, 1): nu = 1, sigma_1 = 1, PL constant 1
    # so L = 3. Given g, sum_i Z_i g_i is N(0, sum g_i^2), which is sampled
    # exactly as sqrt(chi2_N) * Z'.
    for N, eps in PL_GRID:
        avg = np.sqrt(rng.chisquare(N, trials)) * rng.standard_normal(trials) / N
        b = pl_subgauss_bound(N, eps, 1, 3.0, 1.0, [1.0])
        if rate_scale != 1.0:
            b = _exp(math.log(2.0) + rate_scale * (math.log(b / 2.0) if b > 0 else -math.inf))
        out.append(_check("pl_subgauss", N, eps, np.abs(avg) >= eps, b, trials))
    return out


def validate_combinators(trials: int = SIM_TRIALS, seed: int = 1, rate_scale: float = 1.0) -> list[BoundCheck]:
    """Sum, product, sqrt, power and inverse suites on Bernoulli sample means.

    Each ingredient is a mean of n variables with range width 1, so its
    Hoeffding bound is (K, kappa) = (2, 2).
    """
    rng = np.random.default_rng(seed)
    base = TailBound(2.0, 2.0 * rate_scale)
    p_x, p_y = 0.5, 0.3
    out = []
    for n, eps in COMBINATOR_GRID:
        x = rng.binomial(n, p_x, trials) / n
        y = rng.binomial(n, p_y, trials) / n
        u = rng.binomial(n, 0.5, trials) / n - 0.5
        parts = [x - p_x, y - p_y, u]
        bound = combine_bounds("sum", [base] * 3)
        out.append(_check("sum", n, eps, np.abs(sum(parts)) >= eps, bound(n, eps), trials))
        bound = combine_bounds("product", base, c_x=p_x, c_y=p_y)
        out.append(_check("product", n, eps, np.abs(x * y - p_x * p_y) >= eps, bound(n, eps), trials))
        # x estimates c^2 = p_x
        c = math.sqrt(p_x)
        bound = combine_bounds("sqrt", base, c=c)
        out.append(_check("sqrt", n, eps, np.abs(np.sqrt(x) - c) >= eps, bound(n, eps), trials))
        bound = combine_bounds("power", base, c=p_x, k=2)
        out.append(_check("power", n, eps, np.abs(x**2 - p_x**2) >= eps, bound(n, eps), trials))
        # shift into [1, 2] so the inverse stays bounded
        c_inv = 1.0 + p_y
        bound = combine_bounds("inverse", base, c=c_inv)
        dev = np.abs(1.0 / (1.0 + y) - 1.0 / c_inv)
        out.append(_check("inverse", n, eps, dev >= eps, bound(n, eps), trials))
    return out


def run_validation_suites(trials: int = SIM_TRIALS, seed: int = 0, rate_scale: float = 1.0) -> list[BoundCheck]:
    return validate_tail_bounds(trials, seed, rate_scale) + validate_combinators(trials, seed + 1, rate_scale)
