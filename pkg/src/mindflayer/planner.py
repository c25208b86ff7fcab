"""Theory-driven run parameters for MindFlayer, Vecna and Rennala SGD.

Everything here is a pure function of the cluster description and the
problem constants ``(L, Delta, sigma^2, eps)``.  Integer quantities (``K``,
``B_i``) are ceilings of the real-valued formulas.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .timemodel import INF, ClusterModel, DelayDistribution, skewness_gap

__all__ = [
    "MindFlayerPlan",
    "PlanningError",
    "VecnaPlan",
    "batch_target",
    "choose_clip_times_median",
    "choose_clip_times_optimize",
    "iteration_bound",
    "minibatch_round_time",
    "mindflayer_gamma",
    "mindflayer_iters",
    "mindflayer_plan",
    "plan_value",
    "prop2_ratio",
    "rennala_iters",
    "single_device_optimal_clip",
    "single_device_times",
    "t_curve",
    "vecna_plan",
]

DEFAULT_GRID = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)


class PlanningError(ValueError):
    """Raised when no valid plan exists (e.g. no worker can ever succeed)."""


def _check_positive(**kwargs):
    for name, v in kwargs.items():
        if not v > 0:
            raise ValueError(f"{name} must be > 0, got {v!r}")


def batch_target(sigma_sq: float, eps: float) -> float:
    """``S = max{1, sigma^2 / eps}``."""
    return max(1.0, sigma_sq / eps)


def iteration_bound(delta: float, L: float, sigma_sq: float, eps: float, batch: float) -> float:
    """Real-valued ``max{1, sigma^2/(eps B)} * 8 L Delta / eps`` before rounding."""
    _check_positive(delta=delta, L=L, eps=eps, batch=batch)
    if sigma_sq < 0:
        raise ValueError("sigma_sq must be >= 0")
    return max(1.0, sigma_sq / (eps * batch)) * 8.0 * L * delta / eps


def mindflayer_iters(delta, L, sigma_sq, eps, B_expected) -> int:
    return math.ceil(iteration_bound(delta, L, sigma_sq, eps, B_expected))


def rennala_iters(delta, L, sigma_sq, eps, S_batch) -> int:
    return math.ceil(iteration_bound(delta, L, sigma_sq, eps, S_batch))


def mindflayer_gamma(L: float, eps: float, sigma_sq: float, B_expected: float) -> float:
    """``1/(2L) * min{1, eps B / sigma^2}``; ``sigma^2 = 0`` leaves the second branch infinite."""
    ratio = INF if sigma_sq == 0 else eps * B_expected / sigma_sq
    return min(1.0, ratio) / (2.0 * L)


# ---------------------------------------------------------------- MindFlayer


@dataclass
class MindFlayerPlan:
    """Clip times, trial counts and derived constants, all in original worker order."""

    t: list[float]
    B: list[int]
    p: list[float]
    B_expected: float
    gamma: float
    K: int
    m_star: int
    time_bound: float
    S: float
    round_bound: float
    order: list[int]
    t_curve: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def _sort_order(taus: np.ndarray, t: np.ndarray) -> np.ndarray:
    # stable: ties on tau + t keep the original worker index order
    return np.argsort(taus + t, kind="stable")


def t_curve(tau_plus_t: np.ndarray, p: np.ndarray, S: float) -> np.ndarray:
    """``t(m) = (sum_{j<=m} p_j/(tau_j+t_j))^{-1} (S + sum_{j<=m} p_j)`` for sorted inputs."""
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.cumsum(np.where(np.isfinite(tau_plus_t), p / tau_plus_t, 0.0))
        out = (S + np.cumsum(p)) / rate
    out[rate <= 0] = INF
    return out


def plan_value(cluster: ClusterModel, t: Sequence[float], sigma_sq: float, eps: float) -> tuple[float, int]:
    """``(min_m t(m), m*)`` for clip times ``t``; ``m*`` is 1-based and the smallest minimizer."""
    t = np.asarray(t, dtype=float)
    taus = cluster.taus
    p = cluster.cdfs(t)
    order = _sort_order(taus, t)
    curve = t_curve((taus + t)[order], p[order], batch_target(sigma_sq, eps))
    m = int(np.argmin(curve))
    return float(curve[m]), m + 1


def mindflayer_plan(
    cluster: ClusterModel,
    t: Sequence[float],
    sigma_sq: float,
    eps: float,
    delta: float,
    L: float,
) -> MindFlayerPlan:
    """Trial counts ``B_i = ceil(b_i)`` with ``b_i = t(m*)/(tau_i+t_i) - 1`` for the ``m*`` fastest workers."""
    t = np.asarray(t, dtype=float)
    if t.shape != (cluster.n,):
        raise ValueError(f"need {cluster.n} clip times, got shape {t.shape}")
    if np.any(np.isnan(t)) or np.any(t < 0):
        raise ValueError("clip times must be >= 0")
    taus = cluster.taus
    p = cluster.cdfs(t)
    if not np.any(p > 0):
        raise PlanningError(
            f"no worker can ever succeed: p_i = F_i(t_i) = 0 for workers {list(range(cluster.n))} at t={t.tolist()}"
        )
    S = batch_target(sigma_sq, eps)
    order = _sort_order(taus, t)
    tt = (taus + t)[order]
    curve = t_curve(tt, p[order], S)
    if not np.isfinite(curve).any():
        raise PlanningError("every t(m) is infinite; clip times too large for the success probabilities")
    m_idx = int(np.argmin(curve))
    t_star = float(curve[m_idx])

    b_sorted = np.zeros(cluster.n)
    b_sorted[: m_idx + 1] = t_star / tt[: m_idx + 1] - 1.0
    B = np.zeros(cluster.n, dtype=int)
    B[order] = np.ceil(b_sorted).astype(int)

    B_expected = float(np.sum(p * B))
    if B_expected <= 0:
        chosen = sorted(int(i) for i in order[: m_idx + 1])
        raise PlanningError(f"expected batch is zero; selected workers {chosen} never succeed")
    gamma = mindflayer_gamma(L, eps, sigma_sq, B_expected)
    K = mindflayer_iters(delta, L, sigma_sq, eps, B_expected)
    return MindFlayerPlan(
        t=t.tolist(),
        B=B.tolist(),
        p=p.tolist(),
        B_expected=B_expected,
        gamma=gamma,
        K=K,
        m_star=m_idx + 1,
        time_bound=t_star * 8.0 * delta * L / eps,
        S=S,
        round_bound=t_star,
        order=order.tolist(),
        t_curve=curve.tolist(),
    )


# ---------------------------------------------------------- clip-time choice


def choose_clip_times_median(cluster: ClusterModel) -> list[float]:
    """``t_i = Med[eta_i]``."""
    t = []
    for i, d in enumerate(cluster.delays):
        med = d.quantile(0.5)
        if med == INF:
            raise PlanningError(
                f"worker {i} has an infinite median ({d!r}); use the optimizer or an explicit quantile level"
            )
        t.append(med)
    return t


def choose_clip_times_quantile(cluster: ClusterModel, level: float) -> list[float]:
    return [d.quantile(level) for d in cluster.delays]


def choose_clip_times_optimize(
    cluster: ClusterModel,
    sigma_sq: float,
    eps: float,
    grid_quantiles: Sequence[float] = DEFAULT_GRID,
) -> tuple[list[float], int, float]:
    """Minimize ``t(m)`` over clip times, for every ``m``, and keep the best.

    Workers with continuous delay laws are optimized by L-BFGS-B over their
    quantile level ``u_i`` (so ``t_i = Q_i(u_i) >= 0`` and ``p_i = u_i``),
    multi-started from ``grid_quantiles``.  Workers whose CDF is a step
    function only take their jump points.  The result is never worse than
    the best grid candidate.
    """
    grid = [float(g) for g in grid_quantiles]
    if not grid or any(not 0 < g < 1 for g in grid):
        raise ValueError("grid_quantiles must be a nonempty list of levels in (0, 1)")
    n = cluster.n
    delays = cluster.delays
    taus = cluster.taus
    S = batch_target(sigma_sq, eps)
    cont = [i for i, d in enumerate(delays) if d.jump_points() is None]
    disc = [i for i, d in enumerate(delays) if d.jump_points() is not None]
    lo = min(min(grid), 1e-6)
    hi = max(max(grid), 1 - 1e-6)

    def assemble(u, disc_t):
        t = np.empty(n)
        p = np.empty(n)
        for i, ui in zip(cont, u):
            t[i] = delays[i].quantile(float(ui))
            p[i] = float(ui)
        for i, ti in zip(disc, disc_t):
            t[i] = ti
            p[i] = delays[i].cdf(ti)
        return t, p

    def curve_of(t, p):
        order = _sort_order(taus, t)
        return t_curve((taus + t)[order], p[order], S)

    best_t, best_val = None, INF

    def consider(t):
        nonlocal best_t, best_val
        val, _ = plan_value(cluster, t, sigma_sq, eps)
        if val < best_val:
            best_t, best_val = np.array(t), val

    disc_choices = list(itertools.product(*[delays[i].jump_points() for i in disc]))
    # grid candidates: every worker at the same quantile level
    for disc_t in disc_choices:
        for g in grid:
            t, _ = assemble([g] * len(cont), disc_t)
            consider(t)
    grid_best = best_val

    if cont:
        for disc_t in disc_choices:
            for m in range(1, n + 1):

                def objective(u, m=m, disc_t=disc_t):
                    t, p = assemble(u, disc_t)
                    v = curve_of(t, p)[m - 1]
                    return math.log(v) if math.isfinite(v) else 1e3

                for g in grid:
                    res = minimize(
                        objective,
                        np.full(len(cont), g),
                        method="L-BFGS-B",
                        bounds=[(lo, hi)] * len(cont),
                    )
                    t, _ = assemble(res.x, disc_t)
                    consider(t)

    if best_t is None or not math.isfinite(best_val):
        raise PlanningError("no clip-time configuration gives a finite round time")
    assert best_val <= grid_best
    val, m_star = plan_value(cluster, best_t, sigma_sq, eps)
    return best_t.tolist(), m_star, val


# ------------------------------------------------------------- single device


def single_device_times(
    tau: float,
    dist: DelayDistribution,
    t_clip: float,
    sigma_sq: float,
    eps: float,
    delta: float,
    L: float,
    B: int,
) -> tuple[float, float]:
    """``(K B (tau + E eta), (K/p) B (tau + t))`` with ``K`` from the Rennala iteration count."""
    if B < 1:
        raise ValueError("B must be >= 1")
    K = rennala_iters(delta, L, sigma_sq, eps, B)
    mean = dist.mean()
    t_rennala = INF if mean == INF else K * B * (tau + mean)
    p = dist.cdf(t_clip)
    t_mf = INF if p == 0 else (K / p) * B * (tau + t_clip)
    return t_rennala, t_mf


def single_device_optimal_clip(tau: float, dist: DelayDistribution, grid_quantiles: Sequence[float] = DEFAULT_GRID) -> float:
    """Clip time minimizing the single-device bound ``(tau + t) / P(eta <= t)``.

    The median is always among the candidates, so the result is never
    worse than median clipping.
    """
    def cost(t):
        p = dist.cdf(t)
        return INF if p == 0 else (tau + t) / p

    candidates = []
    med = dist.quantile(0.5)
    if med != INF:
        candidates.append(med)
    jumps = dist.jump_points()
    if jumps is not None:
        candidates.extend(jumps)
    else:
        candidates.extend(dist.quantile(g) for g in grid_quantiles)

        def obj(u):
            v = (tau + dist.quantile(float(u))) / float(u)
            return math.log(v) if math.isfinite(v) else 1e3

        res = minimize_scalar(obj, bounds=(1e-6, 1 - 1e-6), method="bounded", options={"xatol": 1e-10})
        candidates.append(dist.quantile(float(res.x)))
    best = min(candidates, key=cost)
    if cost(best) == INF:
        raise PlanningError(f"no finite clip time for {dist!r}")
    return float(best)


def prop2_ratio(tau: float, dist: DelayDistribution) -> float:
    """Guaranteed ``T_Rennala / T_MindFlayer(Med)`` lower bound ``(tau + Med + s)/(2(tau + Med))``."""
    med = dist.quantile(0.5)
    if med == INF:
        raise PlanningError("prop2_ratio needs a finite median")
    gap = skewness_gap(dist)
    if gap == INF:
        return INF
    return (tau + med + gap) / (2.0 * (tau + med))


# --------------------------------------------------------------------- Vecna


@dataclass
class VecnaPlan:
    t: list[float]
    B: list[int]
    p: list[float]
    alpha: float
    beta: float
    zeta: float
    gamma: float
    K: int
    T: float
    time_bound: float
    order: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def vecna_constants(L: float, sigma_sq: float, p: np.ndarray, B: np.ndarray) -> tuple[float, float]:
    """``alpha = L/n^2 sum (1-p_i)/(p_i B_i)`` and ``zeta = sigma^2/n^2 sum 1/(p_i B_i)``."""
    n = len(p)
    pb = p * B
    alpha = L / n**2 * float(np.sum((1.0 - p) / pb))
    zeta = sigma_sq / n**2 * float(np.sum(1.0 / pb))
    return alpha, zeta


def vecna_plan(
    cluster: ClusterModel,
    t: Sequence[float],
    sigma_sq: float,
    eps: float,
    delta: float,
    L: float,
) -> VecnaPlan:
    t = np.asarray(t, dtype=float)
    if t.shape != (cluster.n,):
        raise ValueError(f"need {cluster.n} clip times, got shape {t.shape}")
    p = cluster.cdfs(t)
    for i, pi in enumerate(p):
        if pi <= 0:
            raise PlanningError(f"worker {i} has success probability 0 at t={t[i]!r}")
    n = cluster.n
    taus = cluster.taus
    tt = taus + t
    order = _sort_order(taus, t)
    slowest = float(tt[order[-1]])
    T = (
        slowest
        + float(np.mean(tt / p)) * sigma_sq / (n * eps)
        + float(np.mean((1.0 - p) / p * tt)) * delta * L / (n * eps)
    )
    B = np.ceil(T / tt).astype(int)
    alpha, zeta = vecna_constants(L, sigma_sq, p, B)
    beta = 1.0
    K = math.ceil(12.0 * delta * L / eps * max(beta, 12.0 * delta * alpha / eps, 2.0 * zeta / eps))
    gamma = min(
        INF if alpha == 0 else 1.0 / math.sqrt(L * alpha * K),
        1.0 / (L * beta),
        INF if zeta == 0 else eps / (2.0 * L * zeta),
    )
    return VecnaPlan(
        t=t.tolist(),
        B=B.tolist(),
        p=p.tolist(),
        alpha=alpha,
        beta=beta,
        zeta=zeta,
        gamma=gamma,
        K=K,
        T=T,
        time_bound=2.0 * T * K,
        order=order.tolist(),
    )


# ------------------------------------------------------------------ Minibatch


def minibatch_round_time(cluster: ClusterModel, rng: np.random.Generator) -> float:
    """One synchronous round: ``max_i (tau_i + eta_i)``."""
    return max(w.tau + w.delay.sample(rng) for w in cluster.workers)
