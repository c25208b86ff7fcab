"""Distribution of total run time: one-round histograms and their K-fold sums.

A :class:`Histogram` stores the finite part of a time distribution on an
equal-width grid plus ``overflow_mass``, the probability of ``+inf``.  Bin
``j`` covers ``[origin + j w, origin + (j+1) w)``; its mass is treated as
uniform inside the bin for CDF and quantile lookups, and as sitting at the
bin centre for means and convolution.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .planner import (
    DEFAULT_GRID,
    PlanningError,
    choose_clip_times_median,
    choose_clip_times_optimize,
    mindflayer_plan,
    prop2_ratio,
    rennala_iters,
    single_device_optimal_clip,
    single_device_times,
)
from .timemodel import INF, ClusterModel, DelayDistribution, skewness_gap

__all__ = [
    "Histogram",
    "compare_methods",
    "convolve",
    "histogram_from_samples",
    "mindflayer_round_sampler",
    "ratio_curve_single_device",
    "rebin",
    "rennala_round_sampler",
    "round_time_histogram",
    "self_convolve",
    "table_to_csv",
]

MAX_BINS = 2_000_000
HARD_MAX_BINS = 100_000_000
_CHUNK = 10_000


@dataclass
class Histogram:
    bin_width: float
    origin: float
    mass: np.ndarray
    overflow_mass: float = 0.0

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=float)
        if not self.bin_width > 0:
            raise ValueError("bin_width must be > 0")

    @property
    def finite_mass(self) -> float:
        return float(self.mass.sum())

    @property
    def total_mass(self) -> float:
        return self.finite_mass + self.overflow_mass

    @property
    def centers(self) -> np.ndarray:
        return self.origin + (np.arange(self.mass.size) + 0.5) * self.bin_width

    def mean(self) -> float:
        """Mean time; ``inf`` when there is overflow mass."""
        if self.overflow_mass > 0:
            return INF
        return float(self.mass @ self.centers / self.finite_mass)

    def finite_mean(self) -> float:
        return float(self.mass @ self.centers / self.finite_mass)

    def cdf(self, x):
        """``P(T <= x)`` with mass spread uniformly inside each bin."""
        x = np.asarray(x, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(self.mass)])
        pos = (x - self.origin) / self.bin_width
        pos = np.clip(pos, 0.0, self.mass.size)
        j = np.minimum(np.floor(pos).astype(int), self.mass.size - 1)
        frac = pos - j
        out = cum[j] + frac * self.mass[j]
        out = np.where(np.isposinf(x), 1.0, out)
        return out if out.ndim else float(out)

    def quantile(self, p: float) -> float:
        """Linear interpolation inside the bin where the CDF crosses ``p``."""
        if not 0 < p < 1:
            raise ValueError("p must lie in (0, 1)")
        cum = np.cumsum(self.mass)
        if p > cum[-1] * (1 + 1e-12):
            return INF
        j = int(np.searchsorted(cum, p, side="left"))
        j = min(j, self.mass.size - 1)
        below = cum[j - 1] if j > 0 else 0.0
        frac = 0.0 if self.mass[j] == 0 else (p - below) / self.mass[j]
        return float(self.origin + (j + min(max(frac, 0.0), 1.0)) * self.bin_width)

    def to_dict(self) -> dict:
        return {
            "bin_width": self.bin_width,
            "origin": self.origin,
            "mass": self.mass.tolist(),
            "overflow_mass": self.overflow_mass,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Histogram":
        return cls(d["bin_width"], d["origin"], np.array(d["mass"]), d["overflow_mass"])


def rebin(h: Histogram, factor: int = 2) -> Histogram:
    """Merge each run of ``factor`` bins; mass is conserved exactly."""
    m = h.mass
    pad = (-m.size) % factor
    if pad:
        m = np.concatenate([m, np.zeros(pad)])
    return Histogram(h.bin_width * factor, h.origin, m.reshape(-1, factor).sum(axis=1), h.overflow_mass)


def _shrink(h: Histogram, max_bins: int) -> Histogram:
    while h.mass.size > max_bins:
        h = rebin(h, 2)
    return h


def histogram_from_samples(
    samples: np.ndarray,
    bin_width: float | None = None,
    max_bins: int = MAX_BINS,
) -> Histogram:
    """Bin finite samples; ``inf`` samples become overflow mass.

    The first bin is centred on the smallest sample.  Without an explicit
    ``bin_width`` the width is ``p95 / 2000`` of the finite samples, widened
    by powers of two until at most ``max_bins`` bins are needed.  An explicit
    width that would need more than 10^8 bins is rejected.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("no samples")
    finite = samples[np.isfinite(samples)]
    overflow = 1.0 - finite.size / samples.size
    if finite.size == 0:
        return Histogram(1.0 if bin_width is None else bin_width, 0.0, np.zeros(1), 1.0)
    lo, hi = float(finite.min()), float(finite.max())
    if bin_width is None:
        p95 = float(np.percentile(finite, 95))
        w = p95 / 2000.0 if p95 > 0 else 1.0
        if hi - lo > 0:
            w = max(w, (hi - lo) * 1e-12)
        while (hi - lo) / w + 1 > max_bins:
            w *= 2.0
    else:
        w = float(bin_width)
        if not w > 0:
            raise ValueError("bin_width must be > 0")
        if (hi - lo) / w + 1 > HARD_MAX_BINS:
            raise ValueError(
                f"bin_width {w:g} needs {(hi - lo) / w:.3g} bins (> {HARD_MAX_BINS:g}); choose a coarser width"
            )
    origin = lo - 0.5 * w
    nbins = int(math.floor((hi - origin) / w)) + 1
    idx = np.minimum(((finite - origin) / w).astype(np.int64), nbins - 1)
    mass = np.bincount(idx, minlength=nbins) / samples.size
    return _shrink(Histogram(w, origin, mass, overflow), max_bins)


def convolve(a: Histogram, b: Histogram, max_bins: int = MAX_BINS) -> Histogram:
    """Distribution of the sum of independent draws from ``a`` and ``b``."""
    while a.bin_width < b.bin_width * (1 - 1e-9):
        a = rebin(a, 2)
    while b.bin_width < a.bin_width * (1 - 1e-9):
        b = rebin(b, 2)
    w = a.bin_width
    if a.mass.size * b.mass.size <= 4_000_000:
        mass = np.convolve(a.mass, b.mass)
    else:
        mass = np.clip(fftconvolve(a.mass, b.mass), 0.0, None)
    finite = (1.0 - a.overflow_mass) * (1.0 - b.overflow_mass)
    s = mass.sum()
    if s > 0:
        mass *= finite / s
    overflow = 1.0 - finite
    return _shrink(Histogram(w, a.origin + b.origin + 0.5 * w, mass, overflow), max_bins)


def self_convolve(h: Histogram, K: int, max_bins: int = MAX_BINS) -> Histogram:
    """Sum of ``K`` i.i.d. copies by repeated squaring.

    The overflow of the result is ``1 - (1 - overflow)^K``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    result = None
    base = h
    k = int(K)
    while k:
        if k & 1:
            result = base if result is None else convolve(result, base, max_bins)
        k >>= 1
        if k:
            base = convolve(base, base, max_bins)
    result.overflow_mass = 1.0 - (1.0 - h.overflow_mass) ** K
    return result


# --------------------------------------------------------------- samplers


def rennala_round_sampler(cluster: ClusterModel, S: int) -> Callable[[np.random.Generator, int], np.ndarray]:
    """Time for ``S`` completions when every worker starts fresh and restarts on completion."""
    if S < 1:
        raise ValueError("S must be >= 1")

    def sample(rng: np.random.Generator, draws: int) -> np.ndarray:
        out = np.empty(draws)
        for start in range(0, draws, _CHUNK):
            m = min(_CHUNK, draws - start)
            finish = np.empty((m, cluster.n * S))
            for i, w in enumerate(cluster.workers):
                durations = w.tau + np.asarray(w.delay.sample(rng, (m, S)), dtype=float)
                finish[:, i * S : (i + 1) * S] = np.cumsum(durations, axis=1)
            out[start : start + m] = np.partition(finish, S - 1, axis=1)[:, S - 1]
        return out

    return sample


def mindflayer_round_sampler(
    cluster: ClusterModel, t: Sequence[float], B: Sequence[int]
) -> Callable[[np.random.Generator, int], np.ndarray]:
    """Round time ``max_i sum_j (tau_i + min(eta_ij, t_i))`` over workers with ``B_i > 0``."""

    def sample(rng: np.random.Generator, draws: int) -> np.ndarray:
        out = np.zeros(draws)
        for i, w in enumerate(cluster.workers):
            if B[i] <= 0:
                continue
            etas = np.asarray(w.delay.sample(rng, (draws, int(B[i]))), dtype=float)
            out = np.maximum(out, np.sum(w.tau + np.minimum(etas, t[i]), axis=1))
        return out

    return sample


def round_time_histogram(
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    draws: int,
    rng: np.random.Generator,
    bin_width: float | None = None,
    max_bins: int = MAX_BINS,
) -> Histogram:
    """Histogram of ``draws`` independent one-round times."""
    if draws < 1000:
        raise ValueError("need at least 1000 draws")
    return histogram_from_samples(sampler(rng, draws), bin_width, max_bins)


# ------------------------------------------------------------- comparisons


def _quantiles(h: Histogram, levels=(0.05, 0.5, 0.95)) -> list[float]:
    return [h.quantile(q) for q in levels]


def compare_methods(
    cluster_factory: Callable[[float], ClusterModel],
    grid: Iterable[float],
    delta: float,
    L: float,
    sigma_sq: float,
    eps: float,
    strategies: Sequence[str] = ("median", "optimized"),
    draws: int = 20_000,
    seed: int = 0,
    S_grid: Sequence[int] = (1, 2, 4, 8, 16),
    max_bins: int = MAX_BINS,
    grid_quantiles: Sequence[float] = DEFAULT_GRID,
) -> list[dict]:
    """Planner time of MindFlayer against the convolved run-time law of Rennala.

    For each grid value ``v`` the cluster is ``cluster_factory(v)``.  Rennala's
    batch ``S`` is picked from ``S_grid`` by the smallest median total time,
    where the total is the ``K``-fold sum of one-round times and ``K`` is the
    Rennala iteration count for that ``S``.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty parameter grid")
    rows = []
    root = np.random.SeedSequence(seed)
    for v, ss in zip(grid, root.spawn(len(grid))):
        cluster = cluster_factory(v)
        row: dict = {"param": v}
        for strat in strategies:
            try:
                if strat == "median":
                    t = choose_clip_times_median(cluster)
                elif strat == "optimized":
                    t, _, _ = choose_clip_times_optimize(cluster, sigma_sq, eps, grid_quantiles)
                else:
                    raise ValueError(f"unknown strategy {strat!r}")
                row[f"mindflayer_{strat}"] = mindflayer_plan(cluster, t, sigma_sq, eps, delta, L).time_bound
            except PlanningError:
                row[f"mindflayer_{strat}"] = INF

        best = None
        s_streams = ss.spawn(len(S_grid))
        for S, s_ss in zip(S_grid, s_streams):
            rng = np.random.Generator(np.random.PCG64(s_ss))
            samples = rennala_round_sampler(cluster, S)(rng, draws)
            h = histogram_from_samples(samples, max_bins=max_bins)
            K = rennala_iters(delta, L, sigma_sq, eps, S)
            total = self_convolve(h, K, max_bins)
            q05, q50, q95 = _quantiles(total)
            finite = samples[np.isfinite(samples)]
            cand = {
                "rennala_S": S,
                "rennala_K": K,
                "rennala_q05": q05,
                "rennala_median": q50,
                "rennala_q95": q95,
                "rennala_overflow": total.overflow_mass,
                "rennala_round_mean": float(finite.mean()) if finite.size == samples.size else INF,
            }
            if best is None or q50 < best["rennala_median"]:
                best = cand
        row.update(best)
        # reference only: E[T_B] >= tau_min + E[min_i eta_i]
        rng = np.random.Generator(np.random.PCG64(ss))
        min_eta = np.min(np.stack([np.asarray(d.sample(rng, draws), float) for d in cluster.delays]), axis=0)
        row["rennala_round_lower_bound"] = float(cluster.taus.min() + min_eta.mean())
        for strat in strategies:
            mf = row[f"mindflayer_{strat}"]
            row[f"ratio_{strat}"] = _ratio(row["rennala_median"], mf)
        rows.append(row)
    return rows


def _ratio(a: float, b: float) -> float:
    if b == INF:
        return math.nan if a == INF else 0.0
    return a / b


def ratio_curve_single_device(
    tau: float,
    family: Callable[[float], DelayDistribution],
    param_grid: Iterable[float],
    delta: float = 1.0,
    L: float = 1.0,
    sigma_sq: float = 0.0,
    eps: float = 1.0,
    B: int = 1,
) -> list[dict]:
    """``T_Rennala / T_MindFlayer`` for one device at median and optimized clip times."""
    rows = []
    for v in param_grid:
        dist = family(v)
        med = dist.quantile(0.5)
        t_opt = single_device_optimal_clip(tau, dist)
        r_ren, mf_med = single_device_times(tau, dist, med, sigma_sq, eps, delta, L, B)
        _, mf_opt = single_device_times(tau, dist, t_opt, sigma_sq, eps, delta, L, B)
        rows.append(
            {
                "param": v,
                "skewness_gap": skewness_gap(dist),
                "prop2_ratio": prop2_ratio(tau, dist),
                "t_median": med,
                "ratio_median": _ratio(r_ren, mf_med),
                "t_optimal": t_opt,
                "ratio_optimal": _ratio(r_ren, mf_opt),
            }
        )
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def table_to_csv(rows: Sequence[dict], header_comment: str | None = None) -> str:
    """CSV text with explicit ``inf`` tokens; an optional ``# ...`` first line."""
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    if not rows:
        return buf.getvalue()
    cols = list(rows[0].keys())
    for r in rows[1:]:
        cols.extend(c for c in r if c not in cols)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in cols])
    return buf.getvalue()
