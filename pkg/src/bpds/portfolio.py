"""Sequential portfolio study: TV-VAR model pool, AVS-weighted BPDS and comparators.

Each of the ``J`` model/decision pairs couples a TV-VAR filter (indexed by
its volatility discount) with a Markowitz target return.  Every test day the
study

1. forecasts percent returns by Monte Carlo from each filter,
2. forms model-specific Markowitz portfolios and bivariate scores,
3. adds a diffuse T baseline around the AVS mixture,
4. tilts the AVS mixture to a target score under a cone constraint on
   ``tau`` and takes the Markowitz portfolio of the tilted mixture at the
   implied target ``m + tau_1 / tau_2``,
5. observes the day's prices and updates filters and weights.

BMA and AVS comparators and per-model portfolios are tracked alongside.
Everything used for day ``t`` depends only on prices through ``t - 1``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date

import numpy as np

from .decision import tilted_mixture_moments
from .dlm import (TVVARFilter, build_regressor, evolve, forecast, initial_state, log_to_returns,
                  update)
from .errors import BPDSError, CollinearTargetError, ConfigError
from .mixture import StudentTPredictive, combine_moments, model_rng, normalize_log_weights
from .tilting import (TiltTarget, chebyshev_center, initial_score_moments, solve_tilt,
                      solve_tilt_constrained, tilt_weights)

BASELINE_STREAM = 2**31 - 1
TRADING_DAYS = 252


def markowitz(f, V, target):
    """Minimum-variance weights with ``1'x = 1`` and ``f'x = target``.

    Uses the two-constraint Lagrange solution
    ``x = V^{-1} [1 f] G^{-1} (1, target)'`` where ``G`` is the Gram
    matrix of ``(1, f)`` under ``V^{-1}``.

    If ``f`` is proportional to the unit vector the return constraint is
    either redundant (target equal to the common mean, giving the
    minimum-variance portfolio) or infeasible.

    Raises
    ------
    CollinearTargetError
        ``f`` is (numerically) proportional to the unit vector and the target
        differs from its common value.
    """
    f = np.asarray(f, dtype=float).ravel()
    V = np.asarray(V, dtype=float)
    ones = np.ones_like(f)
    B = np.column_stack([ones, f])
    try:
        cho = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise ValueError("covariance matrix must be positive definite") from None
    VB = np.linalg.solve(cho.T, np.linalg.solve(cho, B))
    G = B.T @ VB
    G = 0.5 * (G + G.T)
    det = G[0, 0] * G[1, 1] - G[0, 1] ** 2
    if det <= 1e-12 * G[0, 0] * G[1, 1]:
        # f = c 1: the return constraint is redundant when target = c, infeasible otherwise
        level = G[0, 1] / G[0, 0]
        if abs(float(target) - level) > 1e-10 * max(1.0, abs(level)):
            raise CollinearTargetError("expected returns are collinear with the unit vector "
                                       f"and the target {target!r} differs from {level!r}")
        return VB[:, 0] / G[0, 0]
    rhs = np.array([1.0, float(target)])
    x = VB @ np.linalg.solve(G, rhs)
    # one step of refinement pins the two constraints to rounding level
    x = x + VB @ np.linalg.solve(G, rhs - B.T @ x)
    return x


def score_bivariate(y, x, m):
    """Scores ``(x'y, -(x'y - m)^2 / 2)`` for outcome rows ``y``."""
    r = np.asarray(y, dtype=float) @ np.asarray(x, dtype=float)
    return np.stack([r, -0.5 * (r - m) ** 2], axis=-1)


def avs_weight_update(prev, tau, scores, gamma):
    """``pi_t ∝ pi_{t-1}^gamma exp(tau' s_{t-1,j})``, evaluated in log space."""
    prev = np.asarray(prev, dtype=float)
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    with np.errstate(divide="ignore"):
        logw = gamma * np.log(prev) + s @ np.asarray(tau, dtype=float)
    return normalize_log_weights(logw)


def sharpe_ratio(returns, periods=TRADING_DAYS):
    """Annualised ``sqrt(periods) * mean / std`` of daily returns (``nan`` if flat)."""
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        return float("nan")
    sd = r.std(ddof=1)
    return float(np.sqrt(periods) * r.mean() / sd) if sd > 0 else float("nan")


@dataclass(frozen=True)
class PortfolioConfig:
    betas: tuple = (0.94, 0.98, 0.995)
    targets: tuple = (0.05, 0.15)
    delta: float = 0.9995
    order: int = 3
    m: float = 0.1
    gamma: float = 0.95
    baseline_df: float = 9.0
    baseline_discount: float = 0.135
    multipliers: tuple = (1.05, 0.9)
    cone_ratio: float = 0.1
    cone_margin: float = 1e-6
    clip: tuple = (0.1, 0.2)
    n_train: int = 300
    n_samples: int = 5000
    seed: int = 0
    bma_discount: str = "gamma"
    avs_tau: str = "shared"
    percent: bool = True
    random_walk_prior: bool = True
    d0_scale: float = None
    tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        for name in ("betas", "targets", "multipliers", "clip"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def problems(self):
        """Every invalid setting, as a list of messages."""
        out = []
        for name in ("delta", "gamma", "baseline_discount"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                out.append(f"{name}: must lie in (0, 1], got {v!r}")
        if not self.betas or any(not 0 < b <= 1 for b in self.betas):
            out.append(f"betas: each must lie in (0, 1], got {list(self.betas)!r}")
        if not self.targets:
            out.append("targets: at least one target return is required")
        if self.order < 1:
            out.append(f"order: must be >= 1, got {self.order!r}")
        if not self.baseline_df > 2:
            out.append(f"baseline_df: must exceed 2, got {self.baseline_df!r}")
        if len(self.multipliers) != 2:
            out.append("multipliers: need two values")
        if not self.cone_ratio > 0 or not self.cone_margin >= 0:
            out.append("cone_ratio/cone_margin: cone 0 < tau1 < ratio * tau2 must be nonempty")
        if len(self.clip) != 2 or not self.clip[0] < self.clip[1]:
            out.append(f"clip: need lower < upper, got {list(self.clip)!r}")
        if self.n_train < self.order + 2:
            out.append(f"n_train: must be >= order + 2, got {self.n_train!r}")
        if self.n_samples < 10:
            out.append(f"n_samples: must be >= 10, got {self.n_samples!r}")
        if self.bma_discount not in ("gamma", "none"):
            out.append("bma_discount: must be 'gamma' or 'none'")
        if self.avs_tau not in ("shared", "unconstrained"):
            out.append("avs_tau: must be 'shared' or 'unconstrained'")
        if self.d0_scale is not None and not self.d0_scale > 0:
            out.append("d0_scale: must be positive")
        if not self.tol > 0 or self.max_iter < 1:
            out.append("tol/max_iter: must be positive")
        return out

    def validate(self):
        probs = self.problems()
        if probs:
            raise ConfigError(probs)
        return self

    @property
    def model_grid(self):
        """``(filter index, target return)`` for models ``1..J``."""
        return [(k, r) for k in range(len(self.betas)) for r in self.targets]

    @property
    def labels(self):
        return [f"M{j + 1}" for j in range(len(self.model_grid))]

    def cone(self):
        """``(A, b)`` with ``A tau <= b`` encoding ``margin <= tau1 <= ratio tau2 - margin``."""
        e = self.cone_margin
        return np.array([[-1.0, 0.0], [1.0, -self.cone_ratio]]), np.array([-e, -e])

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class DayForecast:
    """Return-scale Monte Carlo forecasts from each filter on one day."""

    samples: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    priors: list
    regressors: list
    forecasts: list


@dataclass
class DayDecision:
    day: int
    tau: np.ndarray
    pi: np.ndarray
    pi_tilde: np.ndarray
    target: np.ndarray
    m_star: float
    x: np.ndarray
    model_x: np.ndarray  # row 0 is the baseline decision
    f: np.ndarray
    V: np.ndarray
    converged: bool
    fallback: bool
    avs_x: np.ndarray = None
    bma_x: np.ndarray = None
    avs_target: float = None
    bma_target: float = None
    scores: np.ndarray = None
    unconstrained_tau: np.ndarray = None


@dataclass
class BacktestLedger:
    """Per-day portfolio record for one method."""

    method: str
    days: np.ndarray
    dates: list
    x: np.ndarray
    returns: np.ndarray
    value: np.ndarray
    pi: np.ndarray = None
    pi_tilde: np.ndarray = None

    @property
    def sharpe(self):
        return sharpe_ratio(self.returns)


@dataclass
class BacktestResult:
    config: PortfolioConfig
    assets: list
    ledgers: dict
    tau: np.ndarray
    target: np.ndarray
    m_star: np.ndarray
    converged: np.ndarray
    fallback: np.ndarray
    bma_target: np.ndarray
    avs_target: np.ndarray
    next_decision: DayDecision = None
    jitter_count: int = 0
    sharpe: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.tau[:, 0] / self.tau[:, 1]


def _moments(samples):
    mu = samples.mean(axis=0)
    d = samples - mu
    return mu, d.T @ d / samples.shape[0]


def forecast_day(filters, logp, day, cfg, threads=1):
    """Evolve every filter and sample percent-return forecasts for ``day``.

    Uses only ``logp[:day]``; samples for filter ``k`` come from the stream
    ``(seed, day, k)``.
    """
    history = logp[:day]

    def one(k):
        prior = evolve(filters[k].state)
        F = build_regressor(history, cfg.order)
        fc = forecast(prior, F)
        draws = fc.sample(cfg.n_samples, model_rng(cfg.seed, day, k))
        return prior, F, fc, log_to_returns(draws, history[-1], cfg.percent)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            out = list(ex.map(one, range(len(filters))))
    else:
        out = [one(k) for k in range(len(filters))]
    samples = np.stack([o[3] for o in out])
    mom = [_moments(s) for s in samples]
    return DayForecast(samples, np.array([m for m, _ in mom]), np.array([c for _, c in mom]),
                       [o[0] for o in out], [o[1] for o in out], [o[2] for o in out])


def _baseline(fc, cfg, pi_models, day):
    """Diffuse T around the AVS mixture of models ``1..J``, with its draws and decision."""
    grid = cfg.model_grid
    w = pi_models / pi_models.sum()
    mu, cov = combine_moments(fc.means[[k for k, _ in grid]], fc.covs[[k for k, _ in grid]], w)
    var = cov / cfg.baseline_discount
    df = cfg.baseline_df
    pred = StudentTPredictive(mu, var * (df - 2.0) / df, df)
    draws = pred.sample(cfg.n_samples, model_rng(cfg.seed, day, BASELINE_STREAM))
    return draws, markowitz(mu, var, cfg.m)


def bpds_day_step(fc, pi, prev_tau, cfg, day):
    """BPDS decision for one day from the filters' forecasts and AVS weights ``pi`` (``0..J``)."""
    grid = cfg.model_grid
    model_x = np.array([markowitz(fc.means[k], fc.covs[k], r) for k, r in grid])
    base_samples, base_x = _baseline(fc, cfg, pi[1:], day)
    samples = np.concatenate([base_samples[None], fc.samples[[k for k, _ in grid]]])
    xs = np.vstack([base_x, model_x])
    scores = np.stack([score_bivariate(samples[j], xs[j], cfg.m) for j in range(len(xs))])

    m0, _ = initial_score_moments(scores, pi)
    target = np.asarray(cfg.multipliers) * m0
    a_ub, b_ub = cfg.cone()
    fallback, converged, free_tau = False, False, None
    try:
        sol = solve_tilt_constrained(scores, pi, TiltTarget(target), a_ub, b_ub, cfg.tol,
                                     cfg.max_iter)
        tau, converged = sol.tau, sol.converged
        pi_tilde, sw = sol.pi_tilde, sol.sample_weights
    except BPDSError:
        fallback = True
        tau = prev_tau
        tw = tilt_weights(scores, tau, pi)
        pi_tilde, sw = tw.pi_tilde, tw.sample_weights
    if cfg.avs_tau == "unconstrained":
        try:
            free_tau = solve_tilt(scores, pi, target, cfg.tol, cfg.max_iter).tau
        except BPDSError:
            free_tau = None

    f, V = tilted_mixture_moments(samples, pi_tilde, sw)
    m_star = float(np.clip(cfg.m + tau[0] / tau[1], *cfg.clip))
    x = markowitz(f, V, m_star)
    return DayDecision(day, np.asarray(tau, dtype=float), pi.copy(), pi_tilde, target, m_star, x,
                       xs, f, V, converged, fallback, scores=scores, unconstrained_tau=free_tau)


def comparator_day_step(fc, weights, cfg):
    """Markowitz on the ``weights``-mixture of models ``1..J`` at target ``sum_j w_j r_j``.

    Returns ``(x, target)``.
    """
    grid = cfg.model_grid
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    ks = [k for k, _ in grid]
    mu, cov = combine_moments(fc.means[ks], fc.covs[ks], w)
    target = float(w @ np.array([r for _, r in grid]))
    return markowitz(mu, cov, target), target


def initial_filters(logp, cfg):
    """Filters for each volatility discount, with ``D0`` calibrated on the training span."""
    q = logp.shape[1]
    if cfg.d0_scale is None:
        diffs = np.diff(logp[:cfg.n_train], axis=0)
        d0 = float(np.mean(np.var(diffs, axis=0, ddof=1))) if diffs.shape[0] > 1 else 1e-4
        d0 = max(d0, 1e-12)
    else:
        d0 = cfg.d0_scale
    h0 = q + 2.0
    # scale D0 so the initial forecast variance is near the training variance
    d0 *= h0 - q + 1.0
    return [TVVARFilter(initial_state(q, cfg.order, cfg.delta, b, d0, 1.0, h0,
                                      cfg.random_walk_prior), cfg.order) for b in cfg.betas]


def run_backtest(config, prices, dates=None, assets=None, threads=1, progress=None):
    """Run the filters over the training span, then BPDS/BMA/AVS over the test span.

    ``prices`` has one row per day.  Test days are ``n_train .. T-1``; the
    result also carries the decision for day ``T`` (``next_decision``),
    which uses all supplied prices but no realised outcome.
    """
    cfg = config.validate()
    prices = np.asarray(prices, dtype=float)
    if prices.ndim != 2 or np.any(~np.isfinite(prices)) or np.any(prices <= 0):
        raise ValueError("prices must be a 2-D array of positive finite values")
    T, q = prices.shape
    if T < cfg.n_train + 1:
        raise ValueError(f"need more than n_train={cfg.n_train} days of prices, have {T}")
    assets = list(assets) if assets is not None else [f"A{i + 1}" for i in range(q)]
    logp = np.log(prices)
    ret = (prices[1:] / prices[:-1] - 1.0) * (100.0 if cfg.percent else 1.0)

    filters = initial_filters(logp, cfg)
    for t in range(cfg.order, cfg.n_train):
        F = build_regressor(logp[:t], cfg.order)
        for flt in filters:
            flt.state = update(evolve(flt.state), F, logp[t])

    J = len(cfg.model_grid)
    pi = np.full(J + 1, 1.0 / (J + 1))
    pi_avs = pi.copy()
    log_bma = np.zeros(J)
    bma_gamma = cfg.gamma if cfg.bma_discount == "gamma" else 1.0
    a_ub, b_ub = cfg.cone()
    prev_tau = chebyshev_center(a_ub, b_ub)

    rec = {k: [] for k in ("dec", "bma_pi", "avs_pi")}
    next_decision = None
    for t in range(cfg.n_train, T + 1):
        try:
            fc = forecast_day(filters, logp, t, cfg, threads)
            dec = bpds_day_step(fc, pi, prev_tau, cfg, t)
            bma_w = normalize_log_weights(log_bma)
            dec.bma_x, dec.bma_target = comparator_day_step(fc, bma_w, cfg)
            dec.avs_x, dec.avs_target = comparator_day_step(fc, pi_avs[1:], cfg)
        except BPDSError as exc:
            exc.args = (f"day {t}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        if t == T:
            next_decision = dec
            break
        rec["dec"].append(dec)
        rec["bma_pi"].append(bma_w)
        rec["avs_pi"].append(pi_avs[1:] / pi_avs[1:].sum())

        y = ret[t - 1]
        realized = np.stack([score_bivariate(y, dec.model_x[j], cfg.m)
                             for j in range(J + 1)])
        pi = avs_weight_update(pi, dec.tau, realized, cfg.gamma)
        if cfg.avs_tau == "unconstrained":
            tau_avs = dec.unconstrained_tau if dec.unconstrained_tau is not None else dec.tau
            pi_avs = avs_weight_update(pi_avs, tau_avs, realized, cfg.gamma)
        else:
            pi_avs = pi
        logd = np.array([fc.forecasts[k].logpdf(logp[t]) for k, _ in cfg.model_grid])
        log_bma = bma_gamma * np.log(bma_w) + logd
        log_bma = np.log(normalize_log_weights(log_bma))
        for k, flt in enumerate(filters):
            flt.state = update(fc.priors[k], fc.regressors[k], logp[t])
        if not dec.fallback:
            prev_tau = dec.tau
        if progress is not None:
            progress(t)

    decs = rec["dec"]
    days = np.array([d.day for d in decs], dtype=int)
    y = ret[days - 1]
    day_dates = [dates[i] for i in days] if dates is not None else None

    def ledger(name, x, pi_=None, pit=None):
        r = np.einsum("ti,ti->t", x, y)
        return BacktestLedger(name, days, day_dates, x, r, 100.0 * np.cumprod(1.0 + r / 100.0)
                              if cfg.percent else 100.0 * np.cumprod(1.0 + r), pi_, pit)

    ledgers = {
        "BPDS": ledger("BPDS", np.array([d.x for d in decs]), np.array([d.pi for d in decs]),
                       np.array([d.pi_tilde for d in decs])),
        "BMA": ledger("BMA", np.array([d.bma_x for d in decs]), np.array(rec["bma_pi"])),
        "AVS": ledger("AVS", np.array([d.avs_x for d in decs]), np.array(rec["avs_pi"])),
    }
    for j, lab in enumerate(cfg.labels):
        ledgers[lab] = ledger(lab, np.array([d.model_x[j + 1] for d in decs]))
    return BacktestResult(
        cfg, assets, ledgers,
        tau=np.array([d.tau for d in decs]).reshape(-1, 2),
        target=np.array([d.target for d in decs]).reshape(-1, 2),
        m_star=np.array([d.m_star for d in decs]),
        converged=np.array([d.converged for d in decs], dtype=bool),
        fallback=np.array([d.fallback for d in decs], dtype=bool),
        bma_target=np.array([d.bma_target for d in decs]),
        avs_target=np.array([d.avs_target for d in decs]),
        next_decision=next_decision,
        jitter_count=sum(f.state.jitter_count for f in filters),
        sharpe={k: v.sharpe for k, v in ledgers.items()},
    )


def synthetic_prices(q=3, n_days=600, seed=0, break_frac=0.5, start=date(2005, 1, 3)):
    """Stochastic-volatility VAR(1) log-price paths with a single regime break.

    The first regime has negative drift and high volatility; after the
    break drift turns positive and volatility falls, loosely mimicking an
    exit from a recession.

    Returns ``(assets, dates, prices)`` with prices starting at 100.
    """
    rng = model_rng(seed, 0)
    n_break = int(break_frac * n_days)
    a = rng.uniform(-0.5, 0.5, size=(q, q))
    corr = a @ a.T + q * np.eye(q)
    sd = np.sqrt(np.diag(corr))
    chol = np.linalg.cholesky(corr / np.outer(sd, sd))
    phi = 0.05 * np.eye(q)
    # spread drifts across assets so return targets need only moderate leverage
    spread = np.linspace(0.0, 1.0, q)
    mu = (-1.5e-3 + 2e-3 * spread, 2.5e-3 * spread)
    level = (np.log(0.015**2), np.log(0.008**2))
    h = np.full(q, level[0])
    r = np.zeros(q)
    logp = np.empty((n_days, q))
    logp[0] = 0.0
    for t in range(1, n_days):
        reg = 0 if t < n_break else 1
        h = level[reg] + 0.97 * (h - level[reg]) + 0.15 * rng.standard_normal(q)
        r = mu[reg] + phi @ r + np.exp(h / 2) * (chol @ rng.standard_normal(q))
        logp[t] = logp[t - 1] + r
    days = np.busday_offset(np.datetime64(start.isoformat()), np.arange(n_days), roll="forward")
    dates = [date.fromisoformat(str(d)) for d in days]
    return [f"A{i + 1}" for i in range(q)], dates, 100.0 * np.exp(logp)
