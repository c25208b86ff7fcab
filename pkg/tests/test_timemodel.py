import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mindflayer.timemodel import (
    INF,
    Constant,
    InfBernoulli,
    LogCauchy,
    Lognormal,
    LogT,
    WorkerProfile,
    cdf,
    delay_from_dict,
    make_cluster,
    quantile,
    sample_delay,
    skewness_gap,
    tau_rule,
    trial_duration,
)

CONTINUOUS = [Lognormal(0.0, 1.0), Lognormal(0.5, 2.0), LogCauchy(1.0), LogCauchy(0.5, 1.0), LogT(5, 1.0), LogT(1, 2.0)]
ALL = CONTINUOUS + [InfBernoulli(0.3), InfBernoulli(0.8), Constant(0.0), Constant(2.5)]


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- examples


def test_infbernoulli_frequency_of_zero():
    q = 0.3
    draws = InfBernoulli(q).sample(rng(), 100_000)
    assert set(np.unique(draws)) <= {0.0, INF}
    assert abs(np.mean(draws == 0.0) - (1 - q)) < 5 * math.sqrt(q * (1 - q) / 100_000)


def test_constant_sample():
    r = rng()
    assert all(sample_delay(Constant(2.5), r) == 2.5 for _ in range(20))


def test_lognormal_median_of_draws():
    draws = Lognormal(0.0, 1.0).sample(rng(), 100_000)
    assert abs(np.median(draws) - 1.0) <= 0.02


def test_cdf_examples():
    assert cdf(InfBernoulli(0.8), 5.0) == pytest.approx(0.2)
    assert cdf(Constant(2.0), 1.0) == 0.0
    assert cdf(Constant(2.0), 2.0) == 1.0
    assert cdf(Lognormal(0.0, 2.0), 1.0) == pytest.approx(0.5)


def test_cdf_rejects_negative_time():
    for d in ALL:
        with pytest.raises(ValueError):
            d.cdf(-1.0)


def test_cdf_at_infinity():
    for d in ALL:
        assert d.cdf(INF) == 1.0


@pytest.mark.parametrize("s", [0.1, 1.0, 10.0, 100.0])
def test_lognormal_median_is_one(s):
    assert quantile(Lognormal(0.0, s), 0.5) == pytest.approx(1.0)


def test_infbernoulli_quantiles():
    assert quantile(InfBernoulli(0.4), 0.5) == 0.0
    assert quantile(InfBernoulli(0.6), 0.5) == INF


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_quantile_rejects_bad_levels(p):
    with pytest.raises(ValueError):
        Lognormal().quantile(p)


def test_skewness_gap_examples():
    assert skewness_gap(Lognormal(0.0, 2.0)) == pytest.approx(math.e**2 - 1)
    assert skewness_gap(Lognormal(0.0, 2.0)) == pytest.approx(6.389, abs=1e-3)
    assert skewness_gap(Constant(3.0)) == 0.0
    assert skewness_gap(LogCauchy(1.0)) == INF
    assert skewness_gap(InfBernoulli(0.2)) == INF


def test_trial_duration_examples():
    assert trial_duration(1.0, 2.0, 0.5) == (1.5, True)
    assert trial_duration(1.0, 2.0, 3.0) == (3.0, False)
    assert trial_duration(1.0, 2.0, INF) == (3.0, False)
    assert trial_duration(1.0, 2.0, 2.0) == (3.0, True)


# ---------------------------------------------------------------- properties


@pytest.mark.parametrize("dist", ALL, ids=repr)
def test_cdf_nondecreasing_and_quantile_inverse(dist):
    ts = np.concatenate([[0.0], np.logspace(-6, 6, 200)])
    vals = [dist.cdf(float(t)) for t in ts]
    assert np.all(np.diff(vals) >= 0)
    for p in np.linspace(0.01, 0.99, 99):
        q = dist.quantile(float(p))
        if q == INF:
            assert dist.cdf(1e300) < p
            continue
        # continuous laws round-trip through special-function inverses (~1e-12 error)
        tol = 0.0 if dist.jump_points() is not None else 1e-9
        assert dist.cdf(q) >= p - tol
        if q > 0:
            delta = max(1e-9 * q, 1e-12)
            assert dist.cdf(max(q - delta, 0.0)) < p + 1e-9
            # strictly below unless the cdf is flat there
            if dist.jump_points() is None:
                assert dist.cdf(q * (1 - 1e-3)) < p


@pytest.mark.parametrize("dist", ALL, ids=repr)
def test_dkw_band(dist):
    # Dvoretzky-Kiefer-Wolfowitz: P(sup|F_n - F| > e) <= 2 exp(-2 n e^2); 99% band
    n = 100_000
    x = np.sort(dist.sample(rng(7), n))
    eps = math.sqrt(math.log(2 / 0.01) / (2 * n))
    finite = x[np.isfinite(x)]
    uniq = np.unique(finite)
    if uniq.size > 2000:
        uniq = uniq[:: uniq.size // 2000]
    ecdf = np.searchsorted(x, uniq, side="right") / n
    model = np.array([dist.cdf(float(u)) for u in uniq])
    assert np.max(np.abs(ecdf - model)) <= eps


@pytest.mark.parametrize("dist", ALL, ids=repr)
def test_same_seed_same_stream(dist):
    a = dist.sample(np.random.default_rng(123), 1000)
    b = dist.sample(np.random.default_rng(123), 1000)
    assert a.tobytes() == b.tobytes()


@given(
    tau=st.floats(1e-3, 1e3),
    t=st.floats(0.0, 1e6),
    eta=st.one_of(st.floats(0.0, 1e12), st.just(INF)),
)
def test_trial_duration_properties(tau, t, eta):
    dur, ok = trial_duration(tau, t, eta)
    assert dur <= tau + t
    assert ok == (eta <= t)
    assert math.isfinite(dur)


@settings(max_examples=50)
@given(mu=st.floats(-3, 3), s=st.floats(0.05, 20), p=st.floats(0.001, 0.999))
def test_lognormal_quantile_roundtrip(mu, s, p):
    d = Lognormal(mu, s)
    q = d.quantile(p)
    if 0 < q < INF:
        assert d.cdf(q) == pytest.approx(p, abs=1e-9)


def test_heavy_tail_draws_can_be_huge_but_finite():
    x = LogCauchy(1.0).sample(rng(3), 100_000)
    assert np.nanmax(x[np.isfinite(x)]) > 1e50
    assert not np.any(np.isnan(x))


# -------------------------------------------------------------- validation


@pytest.mark.parametrize(
    "factory",
    [
        lambda: Lognormal(0.0, 0.0),
        lambda: LogCauchy(-1.0),
        lambda: LogT(0, 1.0),
        lambda: LogT(2.5, 1.0),
        lambda: InfBernoulli(0.0),
        lambda: InfBernoulli(1.0),
        lambda: Constant(-1.0),
        lambda: WorkerProfile(0.0, Constant(0.0)),
    ],
)
def test_constructor_validation(factory):
    with pytest.raises(ValueError):
        factory()


def test_delay_literals_roundtrip():
    for lit in [
        {"kind": "lognormal", "mu": 0.0, "s": 10.0},
        {"kind": "infbernoulli", "q": 0.8},
        {"kind": "logcauchy", "scale": 1.0, "loc": 0.0},
        {"kind": "logt", "df": 5, "scale": 1.0, "loc": 0.0},
        {"kind": "constant", "c": 0.0},
    ]:
        assert delay_from_dict(lit).to_dict() == lit
    assert delay_from_dict({"kind": "logcauchy", "scale": 2.0}) == LogCauchy(2.0)
    with pytest.raises(ValueError):
        delay_from_dict({"kind": "pareto"})
    with pytest.raises(ValueError):
        delay_from_dict({"kind": "constant", "c": 1.0, "extra": 2})


def test_tau_rule_and_cluster():
    assert tau_rule("sqrt(i+1)", 3) == pytest.approx([math.sqrt(2), math.sqrt(3), 2.0])
    c = make_cluster(5, "sqrt(i+1)", Lognormal(0, 1))
    assert c.n == 5
    assert c.taus[0] == pytest.approx(math.sqrt(2))
    with pytest.raises(ValueError):
        make_cluster(2, [1.0], Constant(0))
    with pytest.raises(ValueError):
        tau_rule("i^2", 3)
