"""Matrix-normal / inverse-Wishart forward filtering for TV-VAR dynamic linear models.

State ``(M, C, h, D)``: ``M`` is the ``p x q`` coefficient location, ``C``
the ``p x p`` left covariance, ``h`` the degrees-of-freedom term and ``D``
the ``q x q`` volatility scale.  Evolution discounts ``C`` by ``delta`` and
``(h, D)`` by ``beta``.
"""

import csv
import warnings
from dataclasses import dataclass, replace
from datetime import date

import numpy as np

from .mixture import StudentTPredictive


@dataclass(frozen=True)
class NIWState:
    M: np.ndarray
    C: np.ndarray
    h: float
    D: np.ndarray
    delta: float = 1.0
    beta: float = 1.0
    evolved: bool = False
    jitter_count: int = 0

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        p, q = M.shape
        if C.shape != (p, p) or D.shape != (q, q):
            raise ValueError("state matrix shapes are inconsistent")
        if not (0 < self.delta <= 1 and 0 < self.beta <= 1):
            raise ValueError("discount factors must lie in (0, 1]")
        for name, val in (("M", M), ("C", C), ("D", D)):
            object.__setattr__(self, name, val)

    @property
    def p(self):
        return self.M.shape[0]

    @property
    def q(self):
        return self.M.shape[1]

    def to_dict(self):
        return {"M": self.M.tolist(), "C": self.C.tolist(), "h": self.h, "D": self.D.tolist(),
                "delta": self.delta, "beta": self.beta, "evolved": self.evolved,
                "jitter_count": self.jitter_count}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["M"]), np.array(d["C"]), d["h"], np.array(d["D"]), d["delta"],
                   d["beta"], d.get("evolved", False), d.get("jitter_count", 0))


def initial_state(q, order, delta, beta, d_scale=1.0, c_scale=1.0, h0=None, random_walk=True):
    """Prior state for a TV-VAR of the given order on ``q`` series.

    ``M0`` is zero, except that with ``random_walk`` the first-lag block is
    the identity so that initial forecasts equal the last observation.
    """
    p = 1 + order * q
    M = np.zeros((p, q))
    if random_walk and order > 0:
        M[1:1 + q] = np.eye(q)
    h0 = q + 2.0 if h0 is None else h0
    return NIWState(M, c_scale * np.eye(p), float(h0), d_scale * np.eye(q), delta, beta)


def evolve(state):
    """Time-``t`` prior: ``R = C / delta``, df term ``beta h``, scale ``beta D``."""
    if state.evolved:
        raise ValueError("state is already evolved")
    out = replace(state, C=state.C / state.delta, h=state.beta * state.h, D=state.beta * state.D,
                  evolved=True)
    if out.h - out.q + 1 <= 0:
        raise ValueError("evolved degrees of freedom beta h - q + 1 must be positive")
    return out


@dataclass(frozen=True)
class ForecastT:
    """One-step forecast ``T_df(f, scale)`` with ``scale = c_t D_{t-1}``."""

    f: np.ndarray
    df: float
    scale: np.ndarray
    qt: float

    @property
    def predictive(self):
        return StudentTPredictive(self.f, self.scale, self.df)

    @property
    def has_variance(self):
        return self.df > 2

    def covariance(self):
        return self.predictive.covariance()

    def logpdf(self, y):
        return self.predictive.logpdf(y)

    def sample(self, n, rng):
        return self.predictive.sample(n, rng)


def forecast(prior, F):
    """One-step forecast from an evolved state and regressor ``F``."""
    if not prior.evolved:
        raise ValueError("forecast needs an evolved (prior) state")
    F = np.asarray(F, dtype=float).ravel()
    qt = 1.0 + F @ prior.C @ F
    f = prior.M.T @ F
    # prior.h and prior.D already carry the beta discount
    scale = qt * prior.D / (prior.h - prior.q + 1.0)
    return ForecastT(f, prior.h, 0.5 * (scale + scale.T), float(qt))


def _repair_pd(mat, what):
    try:
        np.linalg.cholesky(mat)
        return mat, 0
    except np.linalg.LinAlgError:
        pass
    warnings.warn(f"{what} lost positive definiteness; adding jitter", RuntimeWarning)
    eps = 1e-12 * max(np.trace(mat) / mat.shape[0], 1e-300)
    for _ in range(60):
        cand = mat + eps * np.eye(mat.shape[0])
        try:
            np.linalg.cholesky(cand)
            return cand, 1
        except np.linalg.LinAlgError:
            eps *= 10
    raise np.linalg.LinAlgError(f"could not repair {what}")


def update(prior, F, y):
    """Posterior after observing ``y`` with regressor ``F``."""
    if not prior.evolved:
        raise ValueError("update needs an evolved (prior) state")
    F = np.asarray(F, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if y.size != prior.q:
        raise ValueError(f"observation has length {y.size}, expected {prior.q}")
    RF = prior.C @ F
    qt = 1.0 + F @ RF
    e = y - prior.M.T @ F
    A = RF / qt
    M = prior.M + np.outer(A, e)
    C = prior.C - qt * np.outer(A, A)
    D = prior.D + np.outer(e, e) / qt
    C, jc = _repair_pd(0.5 * (C + C.T), "C")
    D, jd = _repair_pd(0.5 * (D + D.T), "D")
    return NIWState(M, C, prior.h + 1.0, D, prior.delta, prior.beta, False,
                    prior.jitter_count + jc + jd)


def build_regressor(history, order):
    """``F = (1, y_{t-1}, ..., y_{t-order})`` from ``history`` (rows in time order)."""
    history = np.atleast_2d(np.asarray(history, dtype=float))
    if order == 0:
        return np.ones(1)
    if history.shape[0] < order:
        raise ValueError(f"need {order} past observations, have {history.shape[0]}")
    lags = history[::-1][:order]
    return np.concatenate([[1.0], lags.ravel()])


def price_return_transforms(prices, percent=True):
    """Log prices and simple returns ``p_t / p_{t-1} - 1`` (times 100 if ``percent``)."""
    prices = np.asarray(prices, dtype=float)
    if np.any(~np.isfinite(prices)) or np.any(prices <= 0):
        raise ValueError("prices must be finite and strictly positive")
    logp = np.log(prices)
    ret = prices[1:] / prices[:-1] - 1.0
    return logp, ret * (100.0 if percent else 1.0)


def log_to_returns(log_samples, last_log_price, percent=True):
    """Map log-price samples to return samples relative to the last log price."""
    r = np.expm1(np.asarray(log_samples, dtype=float) - np.asarray(last_log_price, dtype=float))
    return r * (100.0 if percent else 1.0)


class TVVARFilter:
    """Forward filter for one TV-VAR model over a log-price series."""

    def __init__(self, state, order):
        self.state = state
        self.order = order

    def prior_and_forecast(self, history):
        prior = evolve(self.state)
        F = build_regressor(history, self.order)
        return prior, F, forecast(prior, F)

    def step(self, history, y):
        prior, F, fc = self.prior_and_forecast(history)
        self.state = update(prior, F, y)
        return fc


def read_prices(path):
    """Read a price CSV: header ``date,<asset>...``, ISO dates, positive floats."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty price file")
    header = rows[0]
    if len(header) < 2 or header[0].strip().lower() != "date":
        raise ValueError(f"{path}: first header column must be 'date'")
    dates, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            dates.append(date.fromisoformat(row[0].strip()))
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if len(vals) != len(header) - 1:
            raise ValueError(f"{path}:{lineno}: expected {len(header) - 1} prices")
        if any(not np.isfinite(v) or v <= 0 for v in vals):
            raise ValueError(f"{path}:{lineno}: prices must be positive")
        values.append(vals)
    return header[1:], dates, np.array(values)


def write_prices(path, assets, dates, prices):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["date", *assets])
        for d, row in zip(dates, prices):
            wr.writerow([d.isoformat(), *(repr(float(v)) for v in row)])
