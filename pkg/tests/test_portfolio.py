import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from bpds.decision import BpdsPredictive, DecisionProblem, expected_utility
from bpds.dlm import log_to_returns
from bpds.errors import CollinearTargetError, ConfigError
from bpds.mixture import ModelEnsemble
from bpds.portfolio import (PortfolioConfig, avs_weight_update, bpds_day_step,
                            comparator_day_step, forecast_day, initial_filters, markowitz,
                            run_backtest, score_bivariate, sharpe_ratio, synthetic_prices)
from bpds.tilting import tilt_weights
from conftest import random_spd

SHORT = PortfolioConfig(n_train=120, n_samples=400, seed=4)


@pytest.fixture(scope="module")
def prices():
    return synthetic_prices(q=3, n_days=170, seed=4)


@pytest.fixture(scope="module")
def result(prices):
    assets, dates, p = prices
    return run_backtest(SHORT, p, dates, assets)


# --- Markowitz -------------------------------------------------------------

def test_markowitz_symmetric_example():
    assert np.allclose(markowitz([0.3, 0.3], np.eye(2), 0.3), [0.5, 0.5], rtol=1e-15)


def test_markowitz_hand_example():
    x = markowitz([0.2, 0.0], np.eye(2), 0.2)
    assert np.allclose(x, [1.0, 0.0], rtol=0, atol=1e-12)


def test_markowitz_matches_constrained_line_search():
    rng = np.random.default_rng(3)
    V, f, m = random_spd(rng, 3, 1.0), rng.normal(size=3), 0.4
    x = markowitz(f, V, m)
    # feasible set is x_p + s n with n orthogonal to both constraint normals
    xp = np.linalg.lstsq(np.vstack([np.ones(3), f]), [1.0, m], rcond=None)[0]
    n = np.cross(np.ones(3), f)
    s = np.linspace(-20, 20, 400_001)
    pts = xp + s[:, None] * n
    best = pts[np.argmin(np.einsum("si,ij,sj->s", pts, V, pts))]
    assert np.allclose(x, best, atol=1e-3 * np.linalg.norm(n))


@pytest.mark.parametrize("seed", range(5))
def test_markowitz_constraints_and_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    q = rng.integers(2, 8)
    V, f = random_spd(rng, q, rng.uniform(0.1, 10)), rng.normal(size=q)
    m = rng.normal()
    x = markowitz(f, V, m)
    assert abs(x.sum() - 1) <= 1e-10 and abs(x @ f - m) <= 1e-10
    assert np.allclose(markowitz(f, 37.5 * V, m), x, rtol=1e-9, atol=1e-12)


def test_markowitz_errors():
    with pytest.raises(CollinearTargetError):
        markowitz([0.1, 0.1, 0.1], np.eye(3), 0.2)
    with pytest.raises(ValueError):
        markowitz([0.1, 0.2], np.array([[1.0, 2.0], [2.0, 1.0]]), 0.1)


# --- scores and weights ----------------------------------------------------

def test_score_examples():
    y = np.array([[0.05, 0.05], [0.6, 0.6]])
    s = score_bivariate(y, [1.0, 1.0], 0.1)
    assert np.allclose(s[0], [0.1, 0.0]) and np.allclose(s[1], [1.2, -0.605])
    s = score_bivariate(np.array([[2.1]]), [1.0], 0.1)
    assert np.allclose(s[0], [2.1, -2.0])


def test_score_matches_univariate_form():
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = rng.integers(1, 5)
        y, x = rng.normal(size=(1, q)), rng.normal(size=q)
        t2, m = rng.uniform(0.1, 5), rng.normal()
        t1 = rng.uniform(-1, 1) * t2
        d = t1 / t2
        r = float(y[0] @ x)
        lhs = np.array([t1, t2]) @ score_bivariate(y, x, m)[0]
        rhs = -t2 / 2 * (r - (m + d)) ** 2 + t2 * d**2 / 2 + t1 * m
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_avs_examples():
    pi = np.array([0.8, 0.2])
    assert np.allclose(avs_weight_update(pi, [1.0, 1.0], np.zeros((2, 2)), 1.0), pi)
    assert np.allclose(avs_weight_update(pi, [1.0, 1.0], np.zeros((2, 2)), 0.5), [2 / 3, 1 / 3])
    out = avs_weight_update(np.full(3, 1 / 3), [1.0, 0.0], [[2000.0, 0], [0, 0], [-5.0, 0]], 0.95)
    assert out[0] == pytest.approx(1.0) and np.all(out >= 0) and out.sum() == pytest.approx(1.0)


@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6), st.floats(0.1, 1.0))
def test_avs_stays_on_simplex(raw, gamma):
    s = np.array(raw).reshape(3, 2)
    out = avs_weight_update(np.array([0.5, 0.3, 0.2]), [0.2, 3.0], s, gamma)
    assert np.all(out >= 0) and out.sum() == pytest.approx(1.0, abs=1e-12)


def test_sharpe_ratio():
    r = np.array([0.1, 0.3, -0.1, 0.2])
    assert sharpe_ratio(r) == pytest.approx(np.sqrt(252) * r.mean() / r.std(ddof=1))
    assert np.isnan(sharpe_ratio(np.ones(5)))


def test_reference_utility_closed_form_matches_samples():
    rng = np.random.default_rng(9)
    mu, V = rng.normal(0.1, 0.3, size=3), random_spd(rng, 3, 0.5)
    n = 200_000
    y = multivariate_normal(mu, V).rvs(n, random_state=rng)
    ens = ModelEnsemble(y[None])
    tau, m, x = np.array([0.04, 0.8]), 0.1, np.array([0.5, 0.2, 0.3])
    b = np.array([3.0, 0.0])
    prob = DecisionProblem([x], lambda j, yy, xx: score_bivariate(yy, xx, m), [x], [0.0, 0.0])
    pred = BpdsPredictive(x, tau, np.ones(1), np.full((1, n), 1.0 / n), None, None, None, None)
    sample = expected_utility(prob, pred, ensemble=ens, upper_bound=b)
    r = x @ mu
    closed = tau[0] * (r - b[0]) - tau[1] * ((r - m) ** 2 + x @ V @ x) / 2
    per_draw = score_bivariate(y, x, m) @ tau - tau @ b
    se = per_draw.std() / np.sqrt(n)
    assert abs(sample - closed) <= 3 * se


# --- day steps -------------------------------------------------------------

@pytest.fixture(scope="module")
def day_forecast(prices):
    _, _, p = prices
    logp = np.log(p)
    filters = initial_filters(logp, SHORT)
    return forecast_day(filters, logp, 20, SHORT)


def test_model_portfolios_hit_targets(day_forecast):
    pi = np.full(7, 1 / 7)
    dec = bpds_day_step(day_forecast, pi, np.array([0.05, 1.0]), SHORT, 20)
    for j, (k, r) in enumerate(SHORT.model_grid, start=1):
        assert abs(dec.model_x[j] @ day_forecast.means[k] - r) <= 1e-8
    assert abs(dec.x.sum() - 1) <= 1e-10
    assert 0 < dec.tau[0] / dec.tau[1] < 0.1
    assert 0.1 < dec.m_star < 0.2


def test_comparator_targets(day_forecast):
    x, target = comparator_day_step(day_forecast, np.full(6, 1 / 6), SHORT)
    assert target == pytest.approx(0.1, abs=1e-15)
    w = np.array([0.3, 0.05, 0.2, 0.1, 0.25, 0.1])
    x, target = comparator_day_step(day_forecast, w, SHORT)
    mu = w @ day_forecast.means[[k for k, _ in SHORT.model_grid]]
    assert abs(x @ mu - target) <= 1e-8 and abs(x.sum() - 1) <= 1e-10


def test_single_component_mixture(day_forecast):
    pi = np.zeros(7)
    pi[1] = 1.0
    dec = bpds_day_step(day_forecast, pi, np.array([0.05, 1.0]), SHORT, 20)
    assert np.array_equal(dec.pi_tilde, pi)
    k, _ = SHORT.model_grid[0]
    tw = tilt_weights(dec.scores[1:2], dec.tau, [1.0])
    y = day_forecast.samples[k]
    f = tw.sample_weights[0] @ y
    V = (y - f).T @ ((y - f) * tw.sample_weights[0][:, None])
    assert np.allclose(dec.x, markowitz(f, V, dec.m_star), rtol=1e-9, atol=1e-12)


# --- backtest --------------------------------------------------------------

def test_backtest_invariants(result):
    bp = result.ledgers["BPDS"]
    for led in result.ledgers.values():
        assert np.all(np.abs(led.x.sum(axis=1) - 1) <= 1e-10)
        assert np.all(led.value > 0)
        assert np.allclose(led.value, 100 * np.cumprod(1 + led.returns / 100), rtol=1e-9)
    for w in (bp.pi, bp.pi_tilde, result.ledgers["BMA"].pi, result.ledgers["AVS"].pi):
        assert np.all(w >= 0) and np.allclose(w.sum(axis=1), 1, atol=1e-12)
    assert np.all((result.d > 0) & (result.d < 0.1))
    assert np.all((result.m_star > 0.1) & (result.m_star < 0.2))
    assert np.allclose(result.bma_target, 0.1, atol=1e-12)
    assert result.jitter_count == 0


def test_avs_target_moves_after_first_day(result):
    assert result.avs_target[0] == pytest.approx(0.1, abs=1e-15)
    assert result.avs_target[1] != pytest.approx(0.1, abs=1e-12)


def test_per_model_ledgers_distinct(result):
    rets = [result.ledgers[lab].returns for lab in SHORT.labels]
    assert len(rets) == 6
    for i in range(6):
        for j in range(i + 1, 6):
            assert not np.allclose(rets[i], rets[j])


def test_no_lookahead_truncation(prices, result):
    assets, dates, p = prices
    cut = SHORT.n_train + 25
    part = run_backtest(SHORT, p[:cut], dates[:cut], assets)
    n = cut - SHORT.n_train
    for name, led in part.ledgers.items():
        assert np.array_equal(led.x, result.ledgers[name].x[:n])
    assert np.array_equal(part.tau, result.tau[:n])
    assert np.array_equal(part.next_decision.x, result.ledgers["BPDS"].x[n])
    assert np.array_equal(part.next_decision.tau, result.tau[n])


def test_asset_permutation_equivariance(prices):
    assets, dates, p = prices
    cfg = replace(SHORT, n_train=120)
    perm = [2, 0, 1]
    a = run_backtest(cfg, p[:135], dates[:135], assets)
    b = run_backtest(cfg, p[:135, perm], dates[:135], [assets[i] for i in perm])
    for name in ("BPDS", "BMA", "AVS", "M1"):
        assert np.allclose(b.ledgers[name].x, a.ledgers[name].x[:, perm], rtol=1e-6, atol=1e-6)
    assert np.allclose(a.tau, b.tau, rtol=1e-5)


def test_threads_do_not_change_results(prices, result):
    assets, dates, p = prices
    other = run_backtest(SHORT, p, dates, assets, threads=3)
    assert np.array_equal(other.ledgers["BPDS"].x, result.ledgers["BPDS"].x)


def test_return_mapping_convention():
    r = log_to_returns(np.log([[101.0]]), np.log(100.0))
    assert r[0, 0] == pytest.approx(1.0, rel=1e-12)
    assert log_to_returns(np.log([[101.0]]), np.log(100.0), percent=False)[0, 0] == \
        pytest.approx(0.01, rel=1e-12)


def test_synthetic_prices_deterministic():
    a1, d1, p1 = synthetic_prices(q=4, n_days=50, seed=8)
    a2, d2, p2 = synthetic_prices(q=4, n_days=50, seed=8)
    assert a1 == a2 == ["A1", "A2", "A3", "A4"] and d1 == d2 and np.array_equal(p1, p2)
    assert p1.shape == (50, 4) and np.all(p1 > 0) and np.all(p1[0] == 100.0)
    assert all(d.weekday() < 5 for d in d1)


def test_config_validation_lists_problems():
    with pytest.raises(ConfigError) as info:
        PortfolioConfig(gamma=0.0, clip=(0.2, 0.1), betas=(0.9, 1.5))
    text = " ".join(info.value.problems)
    assert "gamma" in text and "clip" in text and "betas" in text


def test_short_price_history_rejected(prices):
    _, _, p = prices
    with pytest.raises(ValueError):
        run_backtest(SHORT, p[:100])
