"""Random compute-time model: worker ``i`` needs ``tau_i + eta_i`` seconds per gradient.

``eta_i`` is drawn from a delay law that may have an infinite mean or put
mass on ``+inf`` (a computation that never finishes).  Times are plain
floats; ``math.inf`` is a legitimate value and is never replaced by a
large sentinel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import special

INF = math.inf

__all__ = [
    "INF",
    "Constant",
    "ClusterModel",
    "DelayDistribution",
    "InfBernoulli",
    "LogCauchy",
    "LogT",
    "Lognormal",
    "WorkerProfile",
    "cdf",
    "delay_from_dict",
    "make_cluster",
    "quantile",
    "sample_delay",
    "skewness_gap",
    "trial_duration",
]


def _check_prob(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p!r}")


def _check_time(t: float) -> None:
    if math.isnan(t) or t < 0:
        raise ValueError(f"time must be nonnegative, got {t!r}")


class DelayDistribution:
    """Base class for the law of the extra time ``eta``."""

    kind: str = ""

    def sample(self, rng: np.random.Generator, size: int | None = None):
        raise NotImplementedError

    def cdf(self, t: float) -> float:
        raise NotImplementedError

    def quantile(self, p: float) -> float:
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def median(self) -> float:
        return self.quantile(0.5)

    def jump_points(self) -> tuple[float, ...] | None:
        """Atoms of the CDF, or ``None`` when the CDF is continuous."""
        return None

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


class _LogLocationScale(DelayDistribution):
    """``eta = exp(loc + scale * Z)`` for a symmetric standard variable ``Z``."""

    loc: float
    scale: float

    def _std_sample(self, rng, size):
        raise NotImplementedError

    def _std_cdf(self, z):
        raise NotImplementedError

    def _std_ppf(self, p):
        raise NotImplementedError

    def sample(self, rng, size=None):
        z = self._std_sample(rng, size)
        with np.errstate(over="ignore"):
            out = np.exp(self.loc + self.scale * z)
        return float(out) if size is None else out

    def cdf(self, t):
        _check_time(t)
        if t == 0:
            return 0.0
        if t == INF:
            return 1.0
        return float(self._std_cdf((math.log(t) - self.loc) / self.scale))

    def quantile(self, p):
        _check_prob(p)
        with np.errstate(over="ignore"):
            return float(np.exp(self.loc + self.scale * self._std_ppf(p)))


@dataclass(frozen=True)
class Lognormal(_LogLocationScale):
    """``eta = exp(mu + s Z)`` with ``Z`` standard normal."""

    mu: float = 0.0
    s: float = 1.0
    kind: str = field(default="lognormal", init=False, repr=False)

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"lognormal s must be > 0, got {self.s!r}")

    @property
    def loc(self):
        return self.mu

    @property
    def scale(self):
        return self.s

    def _std_sample(self, rng, size):
        return rng.standard_normal(size)

    def _std_cdf(self, z):
        return special.ndtr(z)

    def _std_ppf(self, p):
        return special.ndtri(p)

    def mean(self):
        with np.errstate(over="ignore"):
            return float(np.exp(self.mu + 0.5 * self.s**2))

    def to_dict(self):
        return {"kind": self.kind, "mu": self.mu, "s": self.s}


@dataclass(frozen=True)
class LogCauchy(_LogLocationScale):
    """``eta = exp(loc + scale C)`` with ``C`` standard Cauchy; infinite mean."""

    scale: float = 1.0
    loc: float = 0.0
    kind: str = field(default="logcauchy", init=False, repr=False)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"log-Cauchy scale must be > 0, got {self.scale!r}")

    def _std_sample(self, rng, size):
        return rng.standard_cauchy(size)

    def _std_cdf(self, z):
        return 0.5 + math.atan(z) / math.pi

    def _std_ppf(self, p):
        return math.tan(math.pi * (p - 0.5))

    def mean(self):
        return INF

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale, "loc": self.loc}


@dataclass(frozen=True)
class LogT(_LogLocationScale):
    """``eta = exp(loc + scale T)`` with ``T`` Student-t on ``df`` degrees of freedom.

    Every Student-t has a heavier-than-exponential tail, so the mean is
    infinite for any ``df``.
    """

    df: int = 5
    scale: float = 1.0
    loc: float = 0.0
    kind: str = field(default="logt", init=False, repr=False)

    def __post_init__(self):
        if int(self.df) != self.df or self.df < 1:
            raise ValueError(f"log-t df must be a positive integer, got {self.df!r}")
        if not self.scale > 0:
            raise ValueError(f"log-t scale must be > 0, got {self.scale!r}")

    def _std_sample(self, rng, size):
        return rng.standard_t(self.df, size)

    def _std_cdf(self, z):
        return special.stdtr(self.df, z)

    def _std_ppf(self, p):
        return special.stdtrit(self.df, p)

    def mean(self):
        return INF

    def to_dict(self):
        return {"kind": self.kind, "df": int(self.df), "scale": self.scale, "loc": self.loc}


@dataclass(frozen=True)
class InfBernoulli(DelayDistribution):
    """``eta = 0`` with probability ``1 - q`` and ``eta = +inf`` with probability ``q``."""

    q: float = 0.5
    kind: str = field(default="infbernoulli", init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"InfBernoulli q must lie in (0, 1), got {self.q!r}")

    def sample(self, rng, size=None):
        u = rng.random(size)
        if size is None:
            return INF if u < self.q else 0.0
        return np.where(u < self.q, INF, 0.0)

    def cdf(self, t):
        _check_time(t)
        return 1.0 if t == INF else 1.0 - self.q

    def quantile(self, p):
        _check_prob(p)
        return 0.0 if p <= 1.0 - self.q else INF

    def mean(self):
        return INF

    def jump_points(self):
        return (0.0,)

    def to_dict(self):
        return {"kind": self.kind, "q": self.q}


@dataclass(frozen=True)
class Constant(DelayDistribution):
    """Degenerate delay ``eta = c``; ``Constant(0)`` is the deterministic regime."""

    c: float = 0.0
    kind: str = field(default="constant", init=False, repr=False)

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ValueError(f"constant delay must be finite and >= 0, got {self.c!r}")

    def sample(self, rng, size=None):
        if size is None:
            return float(self.c)
        return np.full(size, float(self.c))

    def cdf(self, t):
        _check_time(t)
        return 1.0 if t >= self.c else 0.0

    def quantile(self, p):
        _check_prob(p)
        return float(self.c)

    def mean(self):
        return float(self.c)

    def jump_points(self):
        return (float(self.c),)

    def to_dict(self):
        return {"kind": self.kind, "c": self.c}


_KINDS = {
    "lognormal": (Lognormal, {"mu", "s"}),
    "logcauchy": (LogCauchy, {"scale", "loc"}),
    "logt": (LogT, {"df", "scale", "loc"}),
    "infbernoulli": (InfBernoulli, {"q"}),
    "constant": (Constant, {"c"}),
}


def delay_from_dict(spec: dict[str, Any]) -> DelayDistribution:
    """Build a delay law from a config literal such as ``{"kind": "infbernoulli", "q": 0.8}``."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in _KINDS:
        raise ValueError(f"unknown delay kind {kind!r}; expected one of {sorted(_KINDS)}")
    cls, allowed = _KINDS[kind]
    extra = set(spec) - allowed
    if extra:
        raise ValueError(f"unknown keys for {kind}: {sorted(extra)}")
    return cls(**spec)


# Operation-style wrappers -------------------------------------------------


def sample_delay(dist: DelayDistribution, rng: np.random.Generator) -> float:
    """One draw of ``eta``; may be ``inf``."""
    return dist.sample(rng)


def cdf(dist: DelayDistribution, t: float) -> float:
    """``P(eta <= t)``."""
    return dist.cdf(t)


def quantile(dist: DelayDistribution, p: float) -> float:
    """Smallest ``t`` with ``cdf(t) >= p``; ``inf`` if the finite mass is below ``p``."""
    return dist.quantile(p)


def skewness_gap(dist: DelayDistribution) -> float:
    """``E[eta] - Med[eta]``; ``inf`` when the mean diverges."""
    mean = dist.mean()
    if mean == INF:
        return INF
    return mean - dist.median()


def trial_duration(tau: float, t_clip: float, eta: float) -> tuple[float, bool]:
    """Time spent on one clipped attempt and whether it produced a gradient.

    Ties ``eta == t_clip`` count as a success.
    """
    success = eta <= t_clip
    return tau + min(eta, t_clip), success


# Workers and clusters ------------------------------------------------------


@dataclass(frozen=True)
class WorkerProfile:
    tau: float
    delay: DelayDistribution

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be finite and > 0, got {self.tau!r}")


@dataclass(frozen=True)
class ClusterModel:
    workers: tuple[WorkerProfile, ...]

    def __post_init__(self):
        object.__setattr__(self, "workers", tuple(self.workers))
        if len(self.workers) < 1:
            raise ValueError("a cluster needs at least one worker")

    @property
    def n(self) -> int:
        return len(self.workers)

    @property
    def taus(self) -> np.ndarray:
        return np.array([w.tau for w in self.workers], dtype=float)

    @property
    def delays(self) -> tuple[DelayDistribution, ...]:
        return tuple(w.delay for w in self.workers)

    def cdfs(self, t: Sequence[float]) -> np.ndarray:
        return np.array([w.delay.cdf(float(ti)) for w, ti in zip(self.workers, t)])


def tau_rule(rule: str | Sequence[float], n: int) -> list[float]:
    """Expand a tau rule; ``"sqrt(i+1)"`` uses 1-based worker indices."""
    if isinstance(rule, str):
        if rule.replace(" ", "") != "sqrt(i+1)":
            raise ValueError(f"unknown tau rule {rule!r}")
        return [math.sqrt(i + 1) for i in range(1, n + 1)]
    taus = [float(v) for v in rule]
    if len(taus) != n:
        raise ValueError(f"tau list has {len(taus)} entries but n={n}")
    return taus


def make_cluster(
    n: int,
    tau: str | Sequence[float] = "sqrt(i+1)",
    delay: DelayDistribution | Sequence[DelayDistribution] | None = None,
) -> ClusterModel:
    """Build a cluster from a tau rule and one shared (or per-worker) delay law."""
    taus = tau_rule(tau, n)
    if delay is None:
        delay = Constant(0.0)
    if isinstance(delay, DelayDistribution):
        delays = [delay] * n
    else:
        delays = list(delay)
        if len(delays) != n:
            raise ValueError(f"got {len(delays)} delay laws for n={n} workers")
    return ClusterModel(tuple(WorkerProfile(t, d) for t, d in zip(taus, delays)))
