import json
import math

import numpy as np
import pytest

from mindflayer.analysis import (
    Histogram,
    compare_methods,
    convolve,
    histogram_from_samples,
    mindflayer_round_sampler,
    ratio_curve_single_device,
    rebin,
    rennala_round_sampler,
    round_time_histogram,
    self_convolve,
    table_to_csv,
)
from mindflayer.timemodel import INF, Constant, InfBernoulli, Lognormal, make_cluster


def rng(seed=0):
    return np.random.default_rng(seed)


def mass_ok(h):
    return abs(h.mass.sum() + h.overflow_mass - 1.0) <= 1e-12


def test_point_mass_rennala_round():
    c = make_cluster(3, [1.0, 2.0, 3.0], Constant(0.0))
    h = round_time_histogram(rennala_round_sampler(c, 1), 1000, rng())
    assert np.count_nonzero(h.mass) == 1
    assert h.mean() == pytest.approx(1.0)
    assert h.quantile(0.5) == pytest.approx(1.0, abs=h.bin_width)
    assert mass_ok(h)


def test_rennala_sampler_greedy_schedule():
    # tau = (1, 3): sorted completions 1, 2, 3, 3, 4, 5, 6, 6
    c = make_cluster(2, [1.0, 3.0], Constant(0.0))
    for S, want in [(3, 3.0), (4, 3.0), (5, 4.0), (8, 6.0)]:
        assert np.all(rennala_round_sampler(c, S)(rng(), 10) == want)


def test_infbernoulli_overflow_matches_q_to_the_n():
    q, n, draws = 0.6, 3, 200_000
    c = make_cluster(n, [1.0] * n, InfBernoulli(q))
    h = round_time_histogram(rennala_round_sampler(c, 1), draws, rng(1))
    se = math.sqrt(q**n * (1 - q**n) / draws)
    assert abs(h.overflow_mass - q**n) <= 5 * se
    assert mass_ok(h)
    assert h.mean() == INF


def test_lognormal_histogram_mean_vs_direct_monte_carlo():
    c = make_cluster(4, "sqrt(i+1)", Lognormal(0, 1))
    h = round_time_histogram(rennala_round_sampler(c, 2), 50_000, rng(2))
    # oracle: an explicit event loop, independent of the vectorized sampler
    r = rng(3)
    taus = list(c.taus)
    direct = []
    for _ in range(20_000):
        nxt = [t + math.exp(r.standard_normal()) for t in taus]
        done = []
        while len(done) < 2:
            i = int(np.argmin(nxt))
            done.append(nxt[i])
            nxt[i] += taus[i] + math.exp(r.standard_normal())
        direct.append(done[-1])
    assert h.mean() == pytest.approx(np.mean(direct), rel=0.02)


def test_mindflayer_round_sampler_bound():
    c = make_cluster(3, [1.0, 2.0, 3.0], Lognormal(0, 3))
    t, B = [1.0, 0.5, 2.0], [3, 2, 0]
    x = mindflayer_round_sampler(c, t, B)(rng(), 5000)
    assert np.all(x <= max(b * (tau + ti) for b, tau, ti in zip(B, c.taus, t)) + 1e-12)
    assert np.all(x >= 3 * 1.0)


def test_too_few_draws_rejected():
    c = make_cluster(1, [1.0])
    with pytest.raises(ValueError):
        round_time_histogram(rennala_round_sampler(c, 1), 999, rng())


def test_resolution_misuse_rejected():
    with pytest.raises(ValueError, match="bins"):
        histogram_from_samples(np.array([0.0, 1e6]), bin_width=1e-6)


def test_default_width_and_coarsening():
    x = np.concatenate([rng(0).uniform(0, 1, 10_000), [1e9]])
    h = histogram_from_samples(x, max_bins=1000)
    assert h.mass.size <= 1000
    assert mass_ok(h)
    h2 = histogram_from_samples(rng(0).uniform(1, 2, 10_000))
    assert h2.bin_width == pytest.approx(np.percentile(rng(0).uniform(1, 2, 10_000), 95) / 2000)


def test_self_convolve_point_mass():
    h = Histogram(0.1, 1.95, np.array([1.0]))
    out = self_convolve(h, 3)
    assert out.mean() == pytest.approx(6.0)
    assert np.count_nonzero(out.mass) == 1


def test_self_convolve_rejects_bad_K():
    with pytest.raises(ValueError):
        self_convolve(Histogram(1.0, 0.0, np.array([1.0])), 0)


def test_self_convolve_mean_linearity():
    h = histogram_from_samples(rng(4).exponential(2.0, 20_000))
    for K in (1, 2, 7, 50):
        out = self_convolve(h, K)
        assert mass_ok(out)
        assert abs(out.mean() - K * h.mean()) <= K * h.bin_width


def test_overflow_composition_exact():
    h = Histogram(0.5, 0.0, np.array([0.2, 0.3, 0.1]), 0.4)
    for K in (1, 2, 3, 10, 37):
        out = self_convolve(h, K)
        assert abs(out.overflow_mass - (1 - 0.6**K)) <= 1e-12
        assert mass_ok(out)


def test_self_convolve_associativity():
    h = histogram_from_samples(rng(5).gamma(2.0, 1.0, 5000), bin_width=0.05)
    a = self_convolve(self_convolve(h, 2), 2)
    b = self_convolve(h, 4)
    assert a.bin_width == b.bin_width and a.origin == pytest.approx(b.origin)
    n = max(a.mass.size, b.mass.size)
    pa = np.pad(a.mass, (0, n - a.mass.size))
    pb = np.pad(b.mass, (0, n - b.mass.size))
    assert np.abs(pa - pb).sum() <= 1e-6


def test_rebin_conserves_mass():
    h = histogram_from_samples(rng(6).standard_normal(10_001) ** 2)
    for f in (2, 3, 7):
        r = rebin(h, f)
        assert r.mass.sum() == pytest.approx(h.mass.sum(), abs=1e-15)
        assert r.bin_width == f * h.bin_width


def test_convolve_capped_bins():
    a = histogram_from_samples(rng(7).uniform(0, 1, 10_000), bin_width=1e-3)
    out = convolve(a, a, max_bins=500)
    assert out.mass.size <= 500
    assert mass_ok(out)


def test_ks_against_direct_sums():
    c = make_cluster(3, "sqrt(i+1)", Lognormal(0, 1))
    K = 100
    h = round_time_histogram(rennala_round_sampler(c, 1), 20_000, rng(8))
    total = self_convolve(h, K)
    direct = rennala_round_sampler(c, 1)(rng(9), 10_000 * K).reshape(10_000, K).sum(axis=1)
    direct.sort()
    emp = np.arange(1, direct.size + 1) / direct.size
    model = total.cdf(direct)
    ks = max(np.max(np.abs(emp - model)), np.max(np.abs(emp - 1 / direct.size - model)))
    assert ks <= 0.03


def test_histogram_quantile_and_cdf_consistency():
    h = histogram_from_samples(rng(10).exponential(1.0, 50_000))
    for p in (0.1, 0.5, 0.9):
        assert h.cdf(h.quantile(p)) == pytest.approx(p, abs=1e-9)
    assert h.cdf(INF) == 1.0
    assert h.cdf(-1.0) == 0.0


def test_quantile_beyond_finite_mass_is_inf():
    h = Histogram(1.0, 0.0, np.array([0.3]), 0.7)
    assert h.quantile(0.5) == INF
    assert h.quantile(0.2) < INF


def test_histogram_json_roundtrip():
    h = Histogram(0.25, -0.125, np.array([0.5, 0.25]), 0.25)
    d = json.loads(json.dumps(h.to_dict()))
    assert set(d) == {"bin_width", "origin", "mass", "overflow_mass"}
    back = Histogram.from_dict(d)
    assert back.bin_width == h.bin_width and np.array_equal(back.mass, h.mass)


# ------------------------------------------------------------ comparisons


def test_ratio_curve_single_device():
    tau = 1.0
    grid = [0.25, 0.5, 1.0, 2.0, 3.0]
    rows = ratio_curve_single_device(tau, lambda s: Lognormal(0, s), grid)
    for r, s in zip(rows, grid):
        assert r["ratio_median"] == pytest.approx((tau + 1 + math.exp(s * s / 2) - 1) / (2 * (tau + 1)), rel=1e-9)
        assert r["ratio_optimal"] >= r["ratio_median"] * (1 - 1e-12)
    med = [r["ratio_median"] for r in rows]
    assert all(a < b for a, b in zip(med, med[1:]))
    tiny = ratio_curve_single_device(tau, lambda s: Lognormal(0, s), [1e-4])[0]
    assert tiny["ratio_median"] == pytest.approx(0.5, abs=1e-6)


def test_compare_methods_deterministic_cluster():
    L, delta, sig, eps = 1.0, 0.125, 9e-5, 1e-4
    rows = compare_methods(
        lambda c: make_cluster(4, "sqrt(i+1)", Constant(c)),
        [0.0],
        delta, L, sig, eps,
        strategies=("median",),
        draws=2000,
        S_grid=(1, 2, 4),
        max_bins=100_000,
    )
    assert rows[0]["ratio_median"] <= 1.0 + 1e-3


def test_compare_methods_lognormal_ratio_increases():
    L, delta, sig, eps = 1.0, 0.125, 9e-5, 1e-4
    rows = compare_methods(
        lambda s: make_cluster(5, "sqrt(i+1)", Lognormal(0, s)),
        [4.0, 8.0, 16.0],
        delta, L, sig, eps,
        strategies=("median", "optimized"),
        draws=4000,
        S_grid=(1, 2),
        max_bins=100_000,
    )
    for key in ("ratio_median", "ratio_optimized"):
        vals = [r[key] for r in rows]
        assert all(a < b for a, b in zip(vals, vals[1:])), vals


def test_compare_methods_infbernoulli_marks_inf():
    rows = compare_methods(
        lambda q: make_cluster(5, "sqrt(i+1)", InfBernoulli(q)),
        [0.6, 0.8],
        0.125, 1.0, 9e-5, 1e-4,
        strategies=("median", "optimized"),
        draws=2000,
        S_grid=(1,),
        max_bins=50_000,
    )
    for r in rows:
        assert r["mindflayer_median"] == INF  # median of eta is +inf for q >= 0.5
        assert math.isfinite(r["mindflayer_optimized"])
        assert r["rennala_median"] == INF
    text = table_to_csv(rows)
    assert ",inf," in text


def test_compare_methods_empty_grid():
    with pytest.raises(ValueError):
        compare_methods(lambda s: make_cluster(1, [1.0]), [], 1, 1, 0, 1)


def test_table_to_csv_header_comment():
    text = table_to_csv([{"a": 1.5, "b": INF}], "config=abc seed=0")
    assert text.splitlines() == ["# config=abc seed=0", "a,b", "1.5,inf"]
