"""Separable denoisers eta_t and their weak derivatives.

Every denoiser is evaluated at a noise level ``tau_sq``, the variance of
the Gaussian noise in the effective observation it is applied to.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .model import SignalPrior

__all__ = [
    "ParameterError",
    "NumericError",
    "Denoiser",
    "GeneralFunctions",
    "soft_threshold",
    "soft_threshold_deriv",
    "tanh_denoiser",
    "tanh_denoiser_deriv",
    "bg_cond_mean",
    "bg_cond_mean_deriv",
    "point_mass_cond_mean",
    "point_mass_cond_mean_deriv",
    "apply_denoiser",
    "to_general_functions",
    "bayes_denoiser_for",
]

FAMILIES = ("soft_threshold", "tanh_bayes", "bg_bayes", "point_mass_bayes", "identity", "zero")
# breakpoints across a smooth but steep transition, in units of its width
TRANSITION_OFFSETS = (-8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0)


class ParameterError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def soft_threshold(s, theta):
    """eta(s; theta) = sign(s) * max(|s| - theta, 0)."""
    if np.any(np.asarray(theta) < 0):
        raise ParameterError("threshold must be non-negative")
    s = np.asarray(s, dtype=float)
    return np.sign(s) * np.maximum(np.abs(s) - theta, 0.0)


def soft_threshold_deriv(s, theta):
    # 0 at the kinks |s| = theta (closed zero branch)
    if np.any(np.asarray(theta) < 0):
        raise ParameterError("threshold must be non-negative")
    return (np.abs(np.asarray(s, dtype=float)) > theta).astype(float)


def _check_tau_sq(tau_sq):
    if not np.all(np.asarray(tau_sq) > 0):
        raise ParameterError("tau^2 must be positive")


def tanh_denoiser(s, tau_sq):
    """Posterior mean of a Rademacher signal observed in N(0, tau_sq) noise."""
    _check_tau_sq(tau_sq)
    return np.tanh(np.asarray(s, dtype=float) / tau_sq)


def tanh_denoiser_deriv(s, tau_sq):
    _check_tau_sq(tau_sq)
    th = np.tanh(np.asarray(s, dtype=float) / tau_sq)
    return (1.0 - th * th) / tau_sq


def _bg_parts(s, tau_sq, sparsity, variance):
    _check_tau_sq(tau_sq)
    if not 0.0 < sparsity <= 1.0:
        raise ParameterError("sparsity must lie in (0, 1]")
    if not variance > 0:
        raise ParameterError("component variance must be positive")
    s = np.asarray(s, dtype=float)
    total = variance + tau_sq
    if sparsity == 1.0:
        pi = np.ones_like(s)
    else:
        # log of (1-xi) N(s; 0, tau^2) / (xi N(s; 0, v + tau^2))
        log_odds_zero = (
            np.log1p(-sparsity) - np.log(sparsity)
            + 0.5 * np.log(total / tau_sq)
            - 0.5 * s * s * (1.0 / tau_sq - 1.0 / total)
        )
        pi = expit(-log_odds_zero)
    gain = variance / total
    post_var = variance * tau_sq / total
    return s, pi, gain, post_var


def bg_cond_mean(s, tau_sq, sparsity, variance):
    """E[beta | beta + tau Z = s] for beta ~ (1-xi) delta_0 + xi N(0, v)."""
    s, pi, gain, _ = _bg_parts(s, tau_sq, sparsity, variance)
    return pi * gain * s


def bg_cond_mean_deriv(s, tau_sq, sparsity, variance):
    # d/ds E[beta | s] = Var[beta | s] / tau^2
    s, pi, gain, post_var = _bg_parts(s, tau_sq, sparsity, variance)
    ms = gain * s
    return (pi * (post_var + ms * ms) - (pi * ms) ** 2) / tau_sq


def _pm_posterior(s, tau_sq, values, probs):
    _check_tau_sq(tau_sq)
    s = np.asarray(s, dtype=float)
    values = np.asarray(values, dtype=float)
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(probs, dtype=float))
    logits = logp - (s[..., None] - values) ** 2 / (2.0 * tau_sq)
    post = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
    return post, values


def point_mass_cond_mean(s, tau_sq, values, probs):
    post, values = _pm_posterior(s, tau_sq, values, probs)
    return post @ values


def point_mass_cond_mean_deriv(s, tau_sq, values, probs):
    post, values = _pm_posterior(s, tau_sq, values, probs)
    mean = post @ values
    return (post @ (values * values) - mean * mean) / tau_sq


@dataclass(frozen=True)
class Denoiser:
    """A family of scalar denoisers indexed by the noise level tau^2.

    family : one of ``soft_threshold`` (threshold ``alpha * tau``),
        ``tanh_bayes``, ``bg_bayes`` (``sparsity``, ``variance``),
        ``point_mass_bayes`` (``atoms``), ``identity``, ``zero``.
    """

    family: str
    alpha: float | None = None
    sparsity: float | None = None
    variance: float | None = None
    atoms: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown denoiser family {self.family!r}")
        if self.family == "soft_threshold" and not (self.alpha is not None and self.alpha > 0):
            raise ParameterError("soft threshold needs alpha > 0")
        if self.family == "bg_bayes":
            if self.sparsity is None or not 0 < self.sparsity < 1:
                raise ParameterError("bg_bayes sparsity must lie in (0, 1)")
            if self.variance is None or not self.variance > 0:
                raise ParameterError("bg_bayes variance must be positive")
        if self.family == "point_mass_bayes" and not self.atoms:
            raise ParameterError("point_mass_bayes needs atoms")

    @classmethod
    def soft(cls, alpha: float) -> "Denoiser":
        return cls("soft_threshold", alpha=alpha)

    @property
    def is_bayes(self) -> bool:
        return self.family in ("tanh_bayes", "bg_bayes", "point_mass_bayes")

    def threshold(self, tau_sq: float) -> float:
        return self.alpha * float(np.sqrt(tau_sq))

    def eta(self, s, tau_sq):
        f = self.family
        if f == "soft_threshold":
            return soft_threshold(s, self.threshold(tau_sq))
        if f == "tanh_bayes":
            return tanh_denoiser(s, tau_sq)
        if f == "bg_bayes":
            return bg_cond_mean(s, tau_sq, self.sparsity, self.variance)
        if f == "point_mass_bayes":
            v, p = zip(*self.atoms)
            return point_mass_cond_mean(s, tau_sq, v, p)
        if f == "identity":
            return np.array(s, dtype=float)
        return np.zeros_like(np.asarray(s, dtype=float))

    def deriv(self, s, tau_sq):
        f = self.family
        if f == "soft_threshold":
            return soft_threshold_deriv(s, self.threshold(tau_sq))
        if f == "tanh_bayes":
            return tanh_denoiser_deriv(s, tau_sq)
        if f == "bg_bayes":
            return bg_cond_mean_deriv(s, tau_sq, self.sparsity, self.variance)
        if f == "point_mass_bayes":
            v, p = zip(*self.atoms)
            return point_mass_cond_mean_deriv(s, tau_sq, v, p)
        if f == "identity":
            return np.ones_like(np.asarray(s, dtype=float))
        return np.zeros_like(np.asarray(s, dtype=float))

    def kinks(self, tau_sq: float) -> tuple[float, ...]:
        """Points where eta is not differentiable (quadrature breakpoints)."""
        if self.family == "soft_threshold":
            th = self.threshold(tau_sq)
            return (-th, th)
        return ()

    def breakpoints(self, tau_sq: float) -> tuple[float, ...]:
        """Quadrature breakpoints: the kinks plus a few points across each
        sharp transition of a Bayes denoiser.

        A transition of width ``w`` centred at ``c`` contributes
        ``c + k w`` for k in TRANSITION_OFFSETS.
        """
        f = self.family
        if f == "tanh_bayes":
            centres = [(0.0, tau_sq)]
        elif f == "point_mass_bayes":
            atoms = sorted(a for a in self.atoms if a[1] > 0)
            centres = []
            for (v0, p0), (v1, p1) in zip(atoms, atoms[1:]):
                # posterior odds of neighbouring atoms are even at c
                gap = v1 - v0
                centres.append((0.5 * (v0 + v1) + tau_sq * math.log(p0 / p1) / gap, tau_sq / gap))
        else:
            return self.kinks(tau_sq)
        return tuple(c + k * w for c, w in centres for k in TRANSITION_OFFSETS)

    def lipschitz(self, tau_sq: float) -> float:
        """Lipschitz constant of eta at this noise level.

        Exact for soft threshold, identity, zero and tanh; an upper bound
        for point-mass posteriors; a dense-grid estimate for
        Bernoulli-Gaussian posteriors.
        """
        f = self.family
        if f in ("soft_threshold", "identity"):
            return 1.0
        if f == "zero":
            return 0.0
        if f == "tanh_bayes":
            return 1.0 / tau_sq
        if f == "point_mass_bayes":
            v = [a[0] for a in self.atoms]
            return (max(v) - min(v)) ** 2 / (4.0 * tau_sq)
        scale = np.sqrt(self.variance + tau_sq)
        grid = np.linspace(-12 * scale, 12 * scale, 200001)
        return float(np.max(self.deriv(grid, tau_sq)))

    def to_dict(self) -> dict:
        d: dict = {"family": self.family}
        if self.family == "soft_threshold":
            d["alpha"] = self.alpha
        elif self.family == "bg_bayes":
            d.update(sparsity=self.sparsity, variance=self.variance)
        elif self.family == "point_mass_bayes":
            d["atoms"] = [[v, p] for v, p in self.atoms]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Denoiser":
        d = dict(d)
        family = d.pop("family", None)
        allowed = {
            "soft_threshold": {"alpha"},
            "tanh_bayes": set(),
            "bg_bayes": {"sparsity", "variance"},
            "point_mass_bayes": {"atoms"},
            "identity": set(),
            "zero": set(),
        }
        if family not in allowed:
            raise ParameterError(f"unknown denoiser family {family!r}")
        extra = set(d) - allowed[family]
        if extra:
            raise ParameterError(f"unknown keys for {family} denoiser: {sorted(extra)}")
        if family == "point_mass_bayes":
            return cls(family, atoms=tuple((float(v), float(p)) for v, p in d.get("atoms", ())))
        return cls(family, **{k: float(v) for k, v in d.items()})


def bayes_denoiser_for(prior: SignalPrior) -> Denoiser:
    """Posterior-mean denoiser matched to ``prior``."""
    if prior.kind == "rademacher":
        return Denoiser("tanh_bayes")
    if prior.kind == "bernoulli_gaussian":
        return Denoiser("bg_bayes", sparsity=prior.sparsity, variance=prior.variance)
    if prior.kind == "point_mass":
        return Denoiser("point_mass_bayes", atoms=prior.atoms)
    raise ParameterError("no closed-form posterior mean for a Gaussian prior in this library")


def apply_denoiser(d: Denoiser, v: np.ndarray, tau_sq: float, n: int) -> tuple[np.ndarray, float]:
    """Apply ``d`` entrywise to ``v``.

    Returns the denoised vector and ``sum(eta'(v)) / n``. The divisor is
    the number of measurements ``n``, not ``len(v)``.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite entries in denoiser input")
    if not np.isfinite(tau_sq):
        raise NumericError("non-finite noise level")
    out = d.eta(v, tau_sq)
    mean_deriv = float(np.sum(d.deriv(v, tau_sq))) / n
    return out, mean_deriv


@dataclass(frozen=True)
class GeneralFunctions:
    """The f_t, g_t pair that casts AMP as the general (h, q, b, m) recursion.

    f_t(a, beta0) = eta_{t-1}(beta0 - a) - beta0 with eta_{-1} = 0, and
    g_t(a, w) = a - w. ``tau_sq[t]`` is the noise level eta_t is run at.
    """

    denoiser: Denoiser
    tau_sq: Sequence[float]

    def f(self, t: int, a, beta0):
        beta0 = np.asarray(beta0, dtype=float)
        if t == 0:
            return -beta0 + 0.0 * np.asarray(a, dtype=float)
        return self.denoiser.eta(beta0 - a, self.tau_sq[t - 1]) - beta0

    def f_prime(self, t: int, a, beta0):
        if t == 0:
            return np.zeros(np.broadcast(np.asarray(a), np.asarray(beta0)).shape)
        return -self.denoiser.deriv(np.asarray(beta0, dtype=float) - a, self.tau_sq[t - 1])

    @staticmethod
    def g(a, w):
        return np.asarray(a, dtype=float) - w

    @staticmethod
    def g_prime(a, w):
        return np.ones(np.broadcast(np.asarray(a), np.asarray(w)).shape)


def to_general_functions(d: Denoiser, tau_sq: Sequence[float]) -> GeneralFunctions:
    return GeneralFunctions(d, tuple(float(x) for x in tau_sq))
