"""Problem instances for the linear model y = A beta0 + w.

The measurement matrix has i.i.d. N(0, 1/n) entries; signal and noise
entries are i.i.d. draws from zero-mean sub-Gaussian laws.

Randomness
----------
Every sampler takes a :class:`SeedPlan`. A plan is turned into a 64-bit
key by mixing ``(master_seed, trial_index, stream)`` through the
SplitMix64 finalizer, and the key drives a Philox-4x64 counter-based bit
generator. Gaussian variates come from numpy's ``Generator``, which uses
the ziggurat method. Golden values in the test suite depend on both
choices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = [
    "DimensionError",
    "PriorError",
    "SignalPrior",
    "NoiseSpec",
    "ProblemInstance",
    "SeedPlan",
    "derive_seed",
    "rng_for",
    "sample_matrix",
    "sample_signal",
    "sample_noise",
    "build_instance",
    "prior_second_moment",
]

_MASK64 = (1 << 64) - 1

STREAMS = {"matrix": 1, "signal": 2, "noise": 3}


class DimensionError(ValueError):
    pass


class PriorError(ValueError):
    pass


def _mix64(x: int) -> int:
    # SplitMix64 finalizer
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class SeedPlan:
    """Seed for one trial; each stream label gets its own derived key."""

    master_seed: int
    trial_index: int = 0

    def __post_init__(self):
        if self.trial_index < 0:
            raise ValueError("trial_index must be non-negative")

    def key(self, stream: str) -> int:
        return derive_seed(self.master_seed, self.trial_index, stream)


def derive_seed(master_seed: int, trial_index: int, stream: str) -> int:
    """Avalanche-mix (master_seed, trial_index, stream) into a 64-bit key."""
    if stream not in STREAMS:
        raise ValueError(f"unknown stream label {stream!r}")
    h = _mix64(master_seed & _MASK64)
    h = _mix64(h ^ (trial_index & _MASK64))
    h = _mix64(h ^ STREAMS[stream])
    return h


def rng_for(seed: SeedPlan, stream: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed.key(stream)))


@dataclass(frozen=True)
class SignalPrior:
    """Zero-mean sub-Gaussian law for the signal entries.

    ``kind`` is one of ``"rademacher"``, ``"bernoulli_gaussian"``,
    ``"gaussian"`` or ``"point_mass"``. ``sparsity`` is the probability
    of a non-zero entry (Bernoulli-Gaussian only); ``variance`` is the
    variance of the Gaussian part; ``atoms`` maps values to
    probabilities for a point-mass prior.
    """

    kind: str
    sparsity: float | None = None
    variance: float | None = None
    atoms: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        kind = self.kind
        if kind == "rademacher":
            return
        if kind == "bernoulli_gaussian":
            if self.sparsity is None or not 0.0 < self.sparsity < 1.0:
                raise PriorError("Bernoulli-Gaussian sparsity must lie strictly inside (0, 1)")
            if self.variance is None or not self.variance > 0:
                raise PriorError("Bernoulli-Gaussian component variance must be positive")
        elif kind == "gaussian":
            if self.variance is None or not self.variance > 0:
                raise PriorError("Gaussian prior needs a positive variance (E[beta^2] > 0)")
        elif kind == "point_mass":
            if not self.atoms:
                raise PriorError("point-mass prior needs at least one atom")
            values = np.array([a[0] for a in self.atoms], dtype=float)
            probs = np.array([a[1] for a in self.atoms], dtype=float)
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
                raise PriorError("point-mass probabilities must be non-negative and sum to 1")
            scale = max(1.0, float(np.max(np.abs(values))))
            if abs(float(values @ probs)) > 1e-12 * scale:
                raise PriorError("point-mass prior must have zero mean")
            if float(values**2 @ probs) <= 0:
                raise PriorError("point-mass prior has zero second moment")
        else:
            raise PriorError(f"unknown prior kind {kind!r}")

    @classmethod
    def rademacher(cls) -> "SignalPrior":
        return cls("rademacher")

    @classmethod
    def bernoulli_gaussian(cls, sparsity: float, variance: float = 1.0) -> "SignalPrior":
        return cls("bernoulli_gaussian", sparsity=sparsity, variance=variance)

    @classmethod
    def gaussian(cls, variance: float) -> "SignalPrior":
        return cls("gaussian", variance=variance)

    @classmethod
    def point_mass(cls, atoms: Mapping[float, float]) -> "SignalPrior":
        return cls("point_mass", atoms=tuple((float(v), float(p)) for v, p in atoms.items()))

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "bernoulli_gaussian":
            d.update(sparsity=self.sparsity, variance=self.variance)
        elif self.kind == "gaussian":
            d.update(variance=self.variance)
        elif self.kind == "point_mass":
            d.update(atoms=[[v, p] for v, p in self.atoms])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SignalPrior":
        d = dict(d)
        kind = d.pop("kind", None)
        allowed = {
            "rademacher": set(),
            "bernoulli_gaussian": {"sparsity", "variance"},
            "gaussian": {"variance"},
            "point_mass": {"atoms"},
        }
        if kind not in allowed:
            raise PriorError(f"unknown prior kind {kind!r}")
        extra = set(d) - allowed[kind]
        if extra:
            raise PriorError(f"unknown keys for {kind} prior: {sorted(extra)}")
        if kind == "point_mass":
            atoms = tuple((float(v), float(p)) for v, p in d.get("atoms", ()))
            return cls(kind, atoms=atoms)
        return cls(kind, **{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean noise with the given variance.

    ``distribution`` is ``"gaussian"``, ``"uniform"`` (centered) or
    ``"rademacher"`` (entries +-sigma).
    """

    distribution: str = "gaussian"
    variance: float = 0.0

    def __post_init__(self):
        if self.distribution not in ("gaussian", "uniform", "rademacher"):
            raise PriorError(f"unknown noise distribution {self.distribution!r}")
        if not (np.isfinite(self.variance) and self.variance >= 0):
            raise PriorError("noise variance must be finite and non-negative")

    def to_dict(self) -> dict:
        return {"distribution": self.distribution, "variance": self.variance}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NoiseSpec":
        extra = set(d) - {"distribution", "variance"}
        if extra:
            raise PriorError(f"unknown keys for noise: {sorted(extra)}")
        return cls(str(d.get("distribution", "gaussian")), float(d.get("variance", 0.0)))


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    A: np.ndarray
    beta0: np.ndarray
    w: np.ndarray
    y: np.ndarray
    seed: SeedPlan | None = field(default=None)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return self.A.shape[1]

    @property
    def delta(self) -> float:
        return self.n / self.N


def _check_dims(*dims: int) -> None:
    for d in dims:
        if int(d) != d or d < 1:
            raise DimensionError(f"dimensions must be positive integers, got {d!r}")


def sample_matrix(n: int, N: int, seed: SeedPlan) -> np.ndarray:
    """Dense n x N matrix with i.i.d. N(0, 1/n) entries (C order, float64)."""
    _check_dims(n, N)
    rng = rng_for(seed, "matrix")
    A = rng.standard_normal((n, N))
    A *= 1.0 / np.sqrt(n)
    return A


def sample_signal(prior: SignalPrior, N: int, seed: SeedPlan) -> np.ndarray:
    _check_dims(N)
    rng = rng_for(seed, "signal")
    if prior.kind == "rademacher":
        return np.where(rng.random(N) < 0.5, -1.0, 1.0)
    if prior.kind == "gaussian":
        return np.sqrt(prior.variance) * rng.standard_normal(N)
    if prior.kind == "bernoulli_gaussian":
        support = rng.random(N) < prior.sparsity
        g = rng.standard_normal(N)
        return np.where(support, np.sqrt(prior.variance) * g, 0.0)
    values = np.array([a[0] for a in prior.atoms])
    probs = np.array([a[1] for a in prior.atoms])
    idx = rng.choice(len(values), size=N, p=probs / probs.sum())
    return values[idx]


def sample_noise(noise: NoiseSpec, n: int, seed: SeedPlan) -> np.ndarray:
    _check_dims(n)
    if noise.variance == 0:
        return np.zeros(n)
    rng = rng_for(seed, "noise")
    sd = np.sqrt(noise.variance)
    if noise.distribution == "gaussian":
        return sd * rng.standard_normal(n)
    if noise.distribution == "uniform":
        half_width = np.sqrt(3.0) * sd
        return rng.uniform(-half_width, half_width, n)
    return np.where(rng.random(n) < 0.5, -sd, sd)


def build_instance(prior: SignalPrior, noise: NoiseSpec, n: int, N: int, seed: SeedPlan) -> ProblemInstance:
    """Draw (A, beta0, w) from independent streams and form y = A beta0 + w."""
    A = sample_matrix(n, N, seed)
    beta0 = sample_signal(prior, N, seed)
    w = sample_noise(noise, n, seed)
    y = A @ beta0 + w
    return ProblemInstance(A=A, beta0=beta0, w=w, y=y, seed=seed)


def prior_second_moment(prior: SignalPrior) -> float:
    if prior.kind == "rademacher":
        return 1.0
    if prior.kind == "gaussian":
        return float(prior.variance)
    if prior.kind == "bernoulli_gaussian":
        return float(prior.sparsity * prior.variance)
    return float(sum(v * v * p for v, p in prior.atoms))
