"""Conjugate normal linear regression with known residual variance.

Covariates are ordered ``(1, x, z1, z2)``; a model keeps the intercept and
``x`` and selects a subset of the ``z`` terms via ``mask``.  At fixed
``z`` values the predictive for ``y`` is normal with mean ``m + b x`` and a
variance quadratic in ``x``, captured by :class:`LinearPredictive`.
"""

from dataclasses import dataclass

import numpy as np

from .errors import FitError

COVARIATES = ("x", "z1", "z2")


@dataclass(frozen=True)
class LinearPredictive:
    """Normal predictive ``N(m + b x, A + 2 B x + C x^2)`` along the control ``x``."""

    m: float
    b: float
    var_coef: tuple

    def mean(self, x):
        return self.m + self.b * np.asarray(x, dtype=float)

    def var(self, x):
        a, bb, c = self.var_coef
        x = np.asarray(x, dtype=float)
        return a + 2.0 * bb * x + c * x * x

    def var_slope(self, x):
        _, bb, c = self.var_coef
        return 2.0 * (bb + c * np.asarray(x, dtype=float))


def mixture_line(lines, weights, discount=1.0):
    """Moment-matched normal line of a weighted mixture of lines, variance divided by ``discount``.

    The mixture variance is the total variance (within plus between), which
    is again quadratic in ``x``.
    """
    w = np.asarray(weights, dtype=float)
    ms = np.array([ln.m for ln in lines])
    bs = np.array([ln.b for ln in lines])
    coefs = np.array([ln.var_coef for ln in lines])
    m, b = float(w @ ms), float(w @ bs)
    dm, db = ms - m, bs - b
    a = w @ coefs[:, 0] + w @ (dm * dm)
    bb = w @ coefs[:, 1] + w @ (dm * db)
    c = w @ coefs[:, 2] + w @ (db * db)
    return LinearPredictive(m, b, (a / discount, bb / discount, c / discount))


@dataclass(frozen=True)
class RegressionModel:
    """Normal linear regression, zero-mean independent normal prior, known variance ``v``.

    ``mask`` names the covariates beyond the intercept, in
    :data:`COVARIATES` order.  ``mean``/``cov`` hold the current (prior or
    posterior) coefficient distribution.
    """

    mask: tuple
    prior_var: np.ndarray
    v: float
    mean: np.ndarray = None
    cov: np.ndarray = None
    n_obs: int = 0

    def __post_init__(self):
        mask = tuple(self.mask)
        if "x" not in mask or any(m not in COVARIATES for m in mask):
            raise ValueError(f"mask must include 'x' and use {COVARIATES}")
        mask = tuple(c for c in COVARIATES if c in mask)
        object.__setattr__(self, "mask", mask)
        pv = np.asarray(self.prior_var, dtype=float)
        if pv.shape != (1 + len(mask),) or np.any(pv <= 0):
            raise ValueError("prior variances must be positive, one per coefficient")
        if not self.v > 0:
            raise ValueError("residual variance must be positive")
        object.__setattr__(self, "prior_var", pv)
        if self.mean is None:
            object.__setattr__(self, "mean", np.zeros(pv.size))
            object.__setattr__(self, "cov", np.diag(pv))

    @classmethod
    def with_scaled_prior(cls, mask, covariates, y, c, v):
        """Prior variances ``v_y c``, ``v_y c / v_x``, ``v_y c / v_z1``, ``v_y c / v_z2``.

        ``v_*`` are sample variances of the training columns.
        """
        covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        vy = np.var(y, ddof=1)
        cols = [COVARIATES.index(m) for m in COVARIATES if m in mask]
        pv = [vy * c] + [vy * c / np.var(covariates[:, i], ddof=1) for i in cols]
        return cls(mask, np.array(pv), v)

    @property
    def columns(self):
        return [COVARIATES.index(m) for m in self.mask]

    def design(self, covariates):
        covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        return np.column_stack([np.ones(covariates.shape[0]), covariates[:, self.columns]])

    def to_dict(self):
        return {"mask": list(self.mask), "prior_var": self.prior_var.tolist(), "v": self.v,
                "mean": self.mean.tolist(), "cov": self.cov.tolist(), "n_obs": self.n_obs}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["mask"]), np.array(d["prior_var"]), d["v"], np.array(d["mean"]),
                   np.array(d["cov"]), d.get("n_obs", 0))


def fit(model, covariates, y):
    """Conjugate update of the prior in ``model`` with data ``(covariates, y)``.

    ``covariates`` has columns ``(x, z1, z2)``; unused columns are ignored.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        return model
    xd = model.design(covariates)
    if xd.shape[0] != y.size:
        raise ValueError("covariates and outcomes differ in length")
    if np.linalg.matrix_rank(xd) < min(xd.shape):
        raise FitError(f"design for mask {model.mask} is rank deficient")
    prec = np.diag(1.0 / model.prior_var) + xd.T @ xd / model.v
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (xd.T @ y / model.v)
    return RegressionModel(model.mask, model.prior_var, model.v, mean, cov, y.size)


def log_marginal_likelihood(model, covariates, y):
    """Log density of ``y`` under the prior predictive ``N(0, v I + X S0 X')``."""
    xd = model.design(covariates)
    s = model.v * np.eye(xd.shape[0]) + xd @ np.diag(model.prior_var) @ xd.T
    sign, logdet = np.linalg.slogdet(s)
    y = np.asarray(y, dtype=float).ravel()
    return float(-0.5 * (y.size * np.log(2 * np.pi) + logdet + y @ np.linalg.solve(s, y)))


def _point(x, z1, z2):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return np.column_stack([x, np.full(x.shape, z1), np.full(x.shape, z2)])


def predict(model, x, z1, z2):
    """Predictive mean and variance of ``y`` at control ``x`` (vectorised in ``x``)."""
    d = model.design(_point(x, z1, z2))
    mean = d @ model.mean
    var = model.v + np.einsum("ia,ab,ib->i", d, model.cov, d)
    return mean, var


def predictive_line(model, z1, z2):
    """:class:`LinearPredictive` of ``model`` at fixed ``z1, z2``."""
    d0 = model.design(_point(0.0, z1, z2))[0]
    ex = np.zeros_like(d0)
    ex[1] = 1.0
    s = model.cov
    return LinearPredictive(float(d0 @ model.mean), float(model.mean[1]),
                            (model.v + d0 @ s @ d0, d0 @ s @ ex, ex @ s @ ex))


@dataclass(frozen=True)
class ControlUtility:
    """``u(y, x) = -(y - y0)^2 / 2 - c_j (x - x0)^2 / 2`` with ``c_j = c b_j^2``."""

    y0: float = 1.0
    x0: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("balance constant c must be positive")

    def penalty(self, b):
        return self.c * b * b


def expected_control_utility(line, x, y0, x0, cj):
    """``E[u_j(y, x) | x]`` under the normal predictive ``line``."""
    x = np.asarray(x, dtype=float)
    return -((line.mean(x) - y0) ** 2 + line.var(x)) / 2.0 - cj * (x - x0) ** 2 / 2.0


def optimal_control(line, y0, x0, cj, tol=1e-14, max_iter=50):
    """Maximiser of the expected control utility, by 1-D Newton.

    Starts from the variance-ignoring closed form
    ``(b (y0 - m) + c_j x0) / (b^2 + c_j)``; the objective is strictly
    concave so the stationary point is the unique maximum.

    Returns ``(x_opt, x_init)``.
    """
    m, b = line.m, line.b
    x_init = (b * (y0 - m) + cj * x0) / (b * b + cj)
    curv = b * b + line.var_coef[2] + cj
    x = x_init
    for _ in range(max_iter):
        grad = -b * (m + b * x - y0) - line.var_slope(x) / 2.0 - cj * (x - x0)
        step = grad / curv
        x = x + step
        if abs(step) <= tol * max(1.0, abs(x)):
            break
    return float(x), float(x_init)
