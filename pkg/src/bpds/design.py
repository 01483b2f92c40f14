"""Optimal control design study with closed-form tilting.

Three normal regressions (``x``; ``x, z1``; ``x, z1, z2``) plus an inflated
baseline predict ``y`` at a chosen control ``x``.  Each model scores
outcomes with its own control utility evaluated at its optimal control, the
mixture is tilted to the best model-specific expected score, and the final
control maximises the expected reference utility over a grid.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .decision import DecisionProblem, TargetRule, select_decision
from .errors import ConfigError, InfeasibleTargetError
from .mixture import ModelEnsemble, NormalPredictive, model_rng, normalize_log_weights
from .regression import (RegressionModel, expected_control_utility, fit, log_marginal_likelihood,
                         mixture_line, optimal_control, predictive_line)

METHODS = ("M1", "M2", "M3", "baseline", "Equal", "BMA", "BPDS")
MASKS = (("x",), ("x", "z1"), ("x", "z1", "z2"))


@dataclass(frozen=True)
class DesignConfig:
    intercept: float = 0.7
    slope: float = 1.2
    z1_coef: float = -0.9
    v: float = 0.09
    n: int = 10
    covariate_low: float = 0.0
    covariate_high: float = 2.0
    z1: float = 1.1
    z2: float = 0.1
    x0: float = 1.0
    y0: float = 1.0
    prior_c: float = 9.0
    c: float = 1.0
    delta: float = 0.135
    grid_low: float = 0.5
    grid_high: float = 1.5
    grid_step: float = 0.005
    seed: int = 0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self):
        """Every invalid setting, as a list of messages."""
        out = []
        if not self.v > 0:
            out.append(f"v: must be positive, got {self.v!r}")
        if self.n < 4:
            out.append(f"n: must be at least the largest model size (4), got {self.n!r}")
        if not self.covariate_low < self.covariate_high:
            out.append("covariate_low/covariate_high: need low < high")
        if not 0 < self.delta <= 1:
            out.append(f"delta: must lie in (0, 1], got {self.delta!r}")
        if not self.c > 0:
            out.append(f"c: must be positive, got {self.c!r}")
        if not self.prior_c > 0:
            out.append(f"prior_c: must be positive, got {self.prior_c!r}")
        if not self.grid_step > 0:
            out.append(f"grid_step: must be positive, got {self.grid_step!r}")
        if not self.grid_low <= self.x0 <= self.grid_high:
            out.append("grid_low/grid_high: grid must contain x0")
        return out

    def grid(self):
        n = int(round((self.grid_high - self.grid_low) / self.grid_step)) + 1
        return np.round(self.grid_low + self.grid_step * np.arange(n), 12)

    def true_mean(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float) + self.z1_coef * self.z1

    def loss(self, x):
        """``100 {(y_hat - y0)^2 + beta^2 (x - x0)^2}`` under the true generator."""
        x = np.asarray(x, dtype=float)
        return 100.0 * ((self.true_mean(x) - self.y0) ** 2 + self.slope**2 * (x - self.x0) ** 2)


def generate_data(cfg):
    """Training covariates ``(x, z1, z2)`` and outcomes from the synthetic generator."""
    rng = np.random.default_rng(cfg.seed)
    cov = rng.uniform(cfg.covariate_low, cfg.covariate_high, size=(cfg.n, 3))
    eps = rng.normal(0.0, np.sqrt(cfg.v), size=cfg.n)
    y = cfg.intercept + cfg.slope * cov[:, 0] + cfg.z1_coef * cov[:, 1] + eps
    return cov, y


@dataclass
class DesignModels:
    """Fitted lines for ``M0..M3`` with their penalties and optimal controls."""

    lines: list
    penalties: np.ndarray
    controls: np.ndarray
    controls_frozen: np.ndarray
    posteriors: list
    bma_weights: np.ndarray
    y0: float
    x0: float

    @property
    def slopes(self):
        return np.array([ln.b for ln in self.lines])


def fit_design_models(cfg, covariates=None, y=None):
    if covariates is None:
        covariates, y = generate_data(cfg)
    posts, logml = [], []
    for mask in MASKS:
        prior = RegressionModel.with_scaled_prior(mask, covariates, y, cfg.prior_c, cfg.v)
        posts.append(fit(prior, covariates, y))
        logml.append(log_marginal_likelihood(prior, covariates, y))
    lines = [predictive_line(p, cfg.z1, cfg.z2) for p in posts]
    pi = np.full(len(lines), 1.0 / len(lines))
    lines = [mixture_line(lines, pi, cfg.delta)] + lines
    pen = np.array([cfg.c * ln.b**2 for ln in lines[1:]])
    pen = np.concatenate([[pi @ pen], pen])
    ctrl = [optimal_control(ln, cfg.y0, cfg.x0, cj) for ln, cj in zip(lines, pen)]
    return DesignModels(lines, pen, np.array([c[0] for c in ctrl]), np.array([c[1] for c in ctrl]),
                        posts, normalize_log_weights(logml), cfg.y0, cfg.x0)


def _model_arrays(models, x):
    x = np.asarray(x, dtype=float)
    mu = np.stack([ln.mean(x) for ln in models.lines], axis=-1)
    var = np.stack([ln.var(x) for ln in models.lines], axis=-1)
    d = models.penalties * (models.controls - models.x0) ** 2
    return mu, var, d


def closed_form_tilt(models, x, tau):
    """Tilted quantities for every model at control ``x`` and tilt ``tau``.

    Returns a dict of arrays indexed ``[..., j]``: ``log_a``, ``a``,
    ``m_star``, ``v_star``.  The normaliser uses
    ``a_j = (1 + tau v_j)^{-1/2} exp{-tau (m_j + b_j x - y0)^2 / (2 (1 + tau v_j))
    - c_j tau (x_j - x0)^2 / 2}``, valid for ``tau > -1 / v_j``; for
    ``tau > 0`` it equals ``(2 pi / tau)^{1/2} exp{-c_j tau (x_j - x0)^2 / 2}
    N(y0 | m_j + b_j x, v_j + 1 / tau)``.
    """
    mu, var, d = _model_arrays(models, x)
    tau = np.asarray(tau, dtype=float)[..., None]
    den = 1.0 + tau * var
    if np.any(den <= 0):
        raise ValueError("tau below -1 / v_j: tilted normal is improper")
    off = mu - models.y0
    log_a = -0.5 * np.log(den) - tau * off**2 / (2.0 * den) - tau * d / 2.0
    v_star = var / den
    m_star = v_star * (mu / var + tau * models.y0)
    return {"log_a": log_a, "a": np.exp(log_a), "m_star": m_star, "v_star": v_star}


def density_normaliser(models, x, tau):
    """``a_j`` in its ``(2 pi / tau)^{1/2} N(y0 | ., v + 1/tau)`` form (``tau > 0`` only)."""
    mu, var, d = _model_arrays(models, x)
    tau = np.asarray(tau, dtype=float)[..., None]
    s2 = var + 1.0 / tau
    dens = np.exp(-((models.y0 - mu) ** 2) / (2 * s2)) / np.sqrt(2 * np.pi * s2)
    return np.sqrt(2 * np.pi / tau) * np.exp(-models.penalties * tau * (models.controls
                                                                         - models.x0) ** 2 / 2) * dens


def tilt_derivatives(models, x, tau):
    """``(da/dtau, d2a/dtau2)`` per model from the tilted moments.

    With ``r = (m* - y0)^2 + v*``, ``d = c_j (x_j - x0)^2`` and
    ``w = (m* - y0)^4 + 6 (m* - y0)^2 v* + 3 v*^2`` (the fourth moment of
    ``y - y0`` under the tilted normal):
    ``da = -a (r + d) / 2`` and ``d2a = a (w + 2 d r + d^2) / 4``.
    """
    q = closed_form_tilt(models, x, tau)
    _, _, d = _model_arrays(models, x)
    off = q["m_star"] - models.y0
    r = off**2 + q["v_star"]
    w = off**4 + 6 * off**2 * q["v_star"] + 3 * q["v_star"] ** 2
    return -q["a"] * (r + d) / 2.0, q["a"] * (w + 2 * d * r + d * d) / 4.0


def _score_moments(models, x, tau, weights):
    """Tilted mixture expected score, its tau-derivative, pi_tilde and tilt pieces."""
    q = closed_form_tilt(models, x, tau)
    _, _, d = _model_arrays(models, x)
    off = q["m_star"] - models.y0
    r = off**2 + q["v_star"]
    w = off**4 + 6 * off**2 * q["v_star"] + 3 * q["v_star"] ** 2
    with np.errstate(divide="ignore"):
        lp = np.log(weights) + q["log_a"]
    lp = lp - lp.max(axis=-1, keepdims=True)
    pit = np.exp(lp)
    pit /= pit.sum(axis=-1, keepdims=True)
    e1 = -(r + d) / 2.0
    e2 = (w + 2 * d * r + d * d) / 4.0
    g = (pit * e1).sum(axis=-1)
    dg = (pit * e2).sum(axis=-1) - g * g
    return g, dg, pit, q


def target_rule_max(models):
    """``max_j E[s_j(y, x_j) | M_j]`` with ``y`` drawn at each model's own optimal control."""
    vals = [expected_control_utility(ln, xj, models.y0, models.x0, cj)
            for ln, xj, cj in zip(models.lines, models.controls, models.penalties)]
    return float(np.max(vals))


def solve_tau(models, x, target, weights, tol=1e-12, max_iter=100):
    """Solve ``tau(x)`` on an array of controls ``x``.

    Vectorised Newton with step halving that keeps ``1 + tau v_j > 0``.
    Points where Newton stalls (near-flat score curves when predictive
    variances are tiny) are finished by bracketing, which is safe because
    the expected score is nondecreasing in ``tau``.  Points whose target
    exceeds every attainable score get ``nan``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _, var, _ = _model_arrays(models, x)
    floor = -1.0 / var.max(axis=-1) * (1 - 1e-9)
    thresh = tol * max(abs(target), 1e-300)
    tau = np.zeros_like(x)
    done = np.zeros(x.shape, dtype=bool)
    g, dg, _, _ = _score_moments(models, x, tau, weights)
    for _ in range(max_iter):
        res = g - target
        done |= np.abs(res) <= thresh
        todo = ~done & (dg > 0)
        if not todo.any():
            break
        step = np.where(todo, -res / np.where(todo, dg, 1.0), 0.0)
        t = np.ones_like(x)
        accepted = ~todo
        new = tau.copy()
        for _ in range(60):
            cand = tau + t * step
            ok = cand > floor
            g_new = _score_moments(models, x, np.where(ok, cand, tau), weights)[0]
            acc = ~accepted & ok & (np.abs(g_new - target) < np.abs(res))
            new[acc] = cand[acc]
            accepted |= acc
            if accepted.all():
                break
            t = np.where(accepted, t, t / 2)
        if not accepted[todo].any():
            break
        tau = new
        g, dg, _, _ = _score_moments(models, x, tau, weights)
    done |= np.abs(g - target) <= thresh
    for i in np.flatnonzero(~done):
        tau[i] = _bracket_tau(models, x[i], target, weights, floor[i])
    return tau


def _bracket_tau(models, x, target, weights, floor):
    def resid(t):
        return _score_moments(models, np.array([x]), np.array([t]), weights)[0][0] - target

    r0 = resid(0.0)
    if r0 == 0:
        return 0.0
    if r0 > 0:
        lo, hi = floor, 0.0
    else:
        lo, hi = 0.0, 1.0
        while resid(hi) < 0:
            lo, hi = hi, hi * 4.0
            if hi > 1e300:
                return np.nan
    return brentq(resid, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=2000)


def curve(models, grid, target, weights):
    """``tau(x)``, ``pi_tilde(x)``, ``U(x)`` and the tilted mixture moments over ``grid``."""
    tau = solve_tau(models, grid, target, weights)
    _, _, pit, q = _score_moments(models, grid, tau, weights)
    mf = (pit * q["m_star"]).sum(axis=-1)
    vf = (pit * (q["v_star"] + q["m_star"] ** 2)).sum(axis=-1) - mf**2
    cf = pit @ models.penalties
    util = -tau * ((mf - models.y0) ** 2 + vf + cf * (grid - models.x0) ** 2) / 2.0
    return {"x": np.asarray(grid, dtype=float), "tau": tau, "pi_tilde": pit, "utility": util,
            "m_f": mf, "v_f": vf, "c_f": cf}


def untilted_utility(models, grid, weights):
    """Mixture expected control utility with fixed weights and no tilting."""
    mu, var, _ = _model_arrays(models, grid)
    w = np.asarray(weights, dtype=float)
    mf = mu @ w
    vf = (var + mu**2) @ w - mf**2
    cf = w @ models.penalties
    return -((mf - models.y0) ** 2 + vf + cf * (np.asarray(grid) - models.x0) ** 2) / 2.0


@dataclass
class DesignReport:
    config: DesignConfig
    rows: list
    curves: dict
    target: float
    models: DesignModels = field(repr=False)

    def row(self, method):
        return next(r for r in self.rows if r["method"] == method)

    def losses(self):
        return np.array([self.row(m)["loss"] for m in METHODS])

    def summary(self):
        m = self.models
        return {"target": self.target, "slopes": m.slopes.tolist(),
                "penalties": m.penalties.tolist(), "controls": m.controls.tolist(),
                "controls_frozen_variance": m.controls_frozen.tolist(),
                "bma_weights": m.bma_weights.tolist(), "config": asdict(self.config)}


def run_design(cfg):
    """Full design pipeline for one seed: decisions and losses for every method."""
    models = fit_design_models(cfg)
    grid = cfg.grid()
    pi = np.full(4, 0.25)
    target = target_rule_max(models)
    cur = curve(models, grid, target, pi)
    util = np.where(np.isfinite(cur["utility"]), cur["utility"], -np.inf)
    if not np.isfinite(util).any():
        raise InfeasibleTargetError(f"target {target:.6g} is unattainable on the whole grid",
                                    None, None, 0)
    x_bpds = grid[select_decision(grid[:, None], util, [cfg.x0])]
    x_equal = grid[select_decision(grid[:, None], untilted_utility(models, grid, pi), [cfg.x0])]
    bma = np.concatenate([[0.0], models.bma_weights])
    x_bma = grid[select_decision(grid[:, None], untilted_utility(models, grid, bma), [cfg.x0])]
    xs = dict(zip(("baseline", "M1", "M2", "M3"), models.controls))
    xs.update(Equal=x_equal, BMA=x_bma, BPDS=x_bpds)
    loss_bpds = float(cfg.loss(x_bpds))
    rows = []
    for meth in METHODS:
        x = float(xs[meth])
        loss = float(cfg.loss(x))
        rows.append({"method": meth, "x": x, "y_hat": float(cfg.true_mean(x)), "loss": loss,
                     "excess_pct": None if meth == "BPDS" else 100.0 * (loss / loss_bpds - 1.0)})
    return DesignReport(cfg, rows, cur, target, models)


def design_sweep(cfg, seeds, threads=1):
    """Run the design pipeline over several seeds; returns the list of reports in seed order."""
    cfgs = [replace(cfg, seed=int(s)) for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run_design, cfgs))
    return [run_design(c) for c in cfgs]


def design_ensemble(models, x, n, seed):
    """Monte Carlo ensemble of the four normal predictives at control ``x``.

    Uses common standard-normal draws per model so ensembles at different
    ``x`` are smooth in ``x``.
    """
    x = float(np.atleast_1d(x)[0])
    samples, preds = [], []
    for j, ln in enumerate(models.lines):
        z = model_rng(seed, j).standard_normal(n)
        mean, var = float(ln.mean(x)), float(ln.var(x))
        samples.append(mean + np.sqrt(var) * z)
        preds.append(NormalPredictive([mean], [[var]]))
    return ModelEnsemble(np.stack(samples)[:, :, None], tuple(preds),
                         ("M0", "M1", "M2", "M3"), True, seed)


def design_problem(models, grid, target=None):
    """:class:`DecisionProblem` for the generic Monte Carlo decision machinery.

    Scores are the control utilities ``-(y - y0)^2 / 2 - c_j (x' - x0)^2 / 2``;
    their upper bound is 0.
    """
    pen = models.penalties

    def score(j, y, x):
        y = np.asarray(y, dtype=float).reshape(-1)
        xv = float(np.atleast_1d(x)[0])
        return (-(y - models.y0) ** 2 / 2.0 - pen[j] * (xv - models.x0) ** 2 / 2.0)[:, None]

    rule = TargetRule("max") if target is None else TargetRule("fixed", np.array([target]))
    return DecisionProblem(np.asarray(grid, dtype=float), score,
                           [np.array([c]) for c in models.controls], rule,
                           upper_bound=np.zeros(1), anchor=np.array([models.x0]))
