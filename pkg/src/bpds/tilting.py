"""Entropic tilting of a Monte Carlo model mixture toward a target expected score.

Scores are held as an array of shape ``(M, N, k)``: ``scores[j, i]`` is the
k-vector score of sample ``i`` under model ``j``.  Tilting by ``tau``
reweights sample ``i`` of model ``j`` by ``exp(tau' s_ji)``; the model
normalisers ``a_j`` are the sample means of these factors and the tilted
model probabilities are ``pi_j a_j / sum_l pi_l a_l``.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .errors import (ConstraintError, DegenerateScoreError, InfeasibleTargetError,
                     NumericalDegeneracyError)
from .mixture import validate_weights

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
_COND_LIMIT = 1e14


def as_scores(scores):
    """Coerce to a finite float array of shape ``(M, N, k)``."""
    s = np.asarray(scores, dtype=float)
    if s.ndim == 2:
        s = s[:, :, None]
    if s.ndim != 3 or min(s.shape) < 1:
        raise ValueError("scores must have shape (models, N, k)")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s


def initial_score_moments(scores, weights):
    """Expected score ``m0`` and score covariance ``V0`` under the untilted mixture."""
    s = as_scores(scores)
    w = validate_weights(weights, s.shape[0])
    means = s.mean(axis=1)
    second = np.einsum("jia,jib->jab", s, s) / s.shape[1]
    m0 = w @ means
    v0 = np.einsum("j,jab->ab", w, second) - np.outer(m0, m0)
    return m0, 0.5 * (v0 + v0.T)


@dataclass(frozen=True)
class TiltWeights:
    """Per-model normalisers and within-model sample weights for one ``tau``.

    ``log_norm`` is ``log sum_j pi_j a_j`` (the negative log of the global
    normaliser ``k``).
    """

    log_a: np.ndarray
    sample_weights: np.ndarray
    pi_tilde: np.ndarray
    log_norm: float

    @property
    def a(self):
        return np.exp(self.log_a)


def tilt_weights(scores, tau, weights=None):
    """Tilt factors ``exp(tau' s)`` evaluated stably with a per-model max shift."""
    s = as_scores(scores)
    tau = np.asarray(tau, dtype=float).ravel()
    if tau.size != s.shape[2] or not np.all(np.isfinite(tau)):
        raise ValueError("tau must be a finite vector matching the score dimension")
    if weights is None:
        weights = np.full(s.shape[0], 1.0 / s.shape[0])
    w = validate_weights(weights, s.shape[0])
    with np.errstate(over="ignore", invalid="ignore"):
        z = s @ tau
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        tot = e.sum(axis=1)
    if not np.all(np.isfinite(tot)) or np.any(tot <= 0):
        raise NumericalDegeneracyError("tilt factors collapsed to zero")
    log_a = zmax[:, 0] + np.log(tot / s.shape[1])
    with np.errstate(divide="ignore"):
        logp = np.log(w) + log_a
    log_norm = logsumexp(logp)
    pi_tilde = np.exp(logp - log_norm)
    return TiltWeights(log_a, e / tot[:, None], pi_tilde, float(log_norm))


def tilted_score_moments(scores, tw):
    """Expected score and score covariance under the tilted mixture.

    The covariance is also the Jacobian of the achieved-score map in ``tau``.
    """
    s = as_scores(scores)
    sf = s.reshape(-1, s.shape[2])
    joint = (tw.pi_tilde[:, None] * tw.sample_weights).ravel()
    g = joint @ sf
    d = sf - g
    h = (d * joint[:, None]).T @ d
    return g, 0.5 * (h + h.T)


def achieved_score(scores, weights, tau):
    """``(g, H)``: expected score at ``tau`` and its derivative ``dg/dtau``."""
    return tilted_score_moments(scores, tilt_weights(scores, tau, weights))


@dataclass(frozen=True)
class TiltTarget:
    """Target expected score.

    With ``mode="absolute"`` the target is ``values``; with
    ``mode="multiplier"`` it is ``values * m0`` elementwise.
    """

    values: np.ndarray
    mode: str = "absolute"

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(v)):
            raise ValueError("target must be finite")
        if self.mode not in ("absolute", "multiplier"):
            raise ValueError(f"unknown target mode {self.mode!r}")
        object.__setattr__(self, "values", v)

    def resolve(self, m0):
        m0 = np.asarray(m0, dtype=float)
        if self.values.size != m0.size:
            raise ValueError("target length differs from the score dimension")
        return self.values.copy() if self.mode == "absolute" else self.values * m0


def _resolve_target(target, m0):
    if not isinstance(target, TiltTarget):
        target = TiltTarget(target)
    return target.resolve(m0)


@dataclass
class TiltSolution:
    tau: np.ndarray
    a: np.ndarray
    pi_tilde: np.ndarray
    sample_weights: np.ndarray = field(repr=False)
    achieved: np.ndarray
    target: np.ndarray
    kl: float
    iterations: int
    converged: bool
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    method: str = "newton"

    def to_dict(self):
        return {
            "tau": self.tau.tolist(),
            "a": self.a.tolist(),
            "pi_tilde": self.pi_tilde.tolist(),
            "achieved": self.achieved.tolist(),
            "target": self.target.tolist(),
            "kl": self.kl,
            "iterations": self.iterations,
            "converged": self.converged,
            "active_constraints": [bool(v) for v in self.active],
            "method": self.method,
        }


def _kl(tau, g, log_norm):
    return float(tau @ g - log_norm)


def _solution(s, w, tau, m, iterations, converged, active=None, method="newton"):
    tw = tilt_weights(s, tau, w)
    g, _ = tilted_score_moments(s, tw)
    return TiltSolution(
        tau=np.array(tau, dtype=float), a=tw.a, pi_tilde=tw.pi_tilde,
        sample_weights=tw.sample_weights, achieved=g, target=np.array(m, dtype=float),
        kl=_kl(tau, g, tw.log_norm), iterations=iterations, converged=converged,
        active=np.zeros(0, dtype=bool) if active is None else active, method=method)


def _scales(v0, m):
    sd = np.sqrt(np.clip(np.diag(v0), 0.0, None))
    return np.where(sd > 0, sd, np.maximum(np.abs(m), 1.0))


def solve_tilt(scores, weights, target, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, tau0=None):
    """Newton-Raphson solve for ``tau`` so the tilted mixture has expected score ``target``.

    Starts at ``tau = 0`` unless ``tau0`` is given.  Each Newton step is
    halved until the standardised residual norm decreases.  Convergence
    requires ``|g_i - m_i| <= tol * max(|m_i|, sd_i)`` on every coordinate,
    ``sd_i`` being the untilted score standard deviation.

    Raises
    ------
    InfeasibleTargetError
        Iteration limit reached, or progress stalled; carries the best iterate.
    DegenerateScoreError
        Score covariance singular at the starting point.
    """
    s = as_scores(scores)
    w = validate_weights(weights, s.shape[0])
    m0, v0 = initial_score_moments(s, w)
    m = _resolve_target(target, m0)
    scale = _scales(v0, m)
    thresh = tol * np.maximum(np.abs(m), scale)

    tau = np.zeros(s.shape[2]) if tau0 is None else np.array(tau0, dtype=float)
    g, h = achieved_score(s, w, tau)
    res = np.linalg.norm((g - m) / scale)
    for it in range(max_iter + 1):
        if np.all(np.abs(g - m) <= thresh):
            return _solution(s, w, tau, m, it, True)
        if it == max_iter:
            break
        try:
            if np.linalg.cond(h) > _COND_LIMIT:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(h, m - g)
        except np.linalg.LinAlgError:
            if it == 0:
                raise DegenerateScoreError("score covariance is singular") from None
            raise InfeasibleTargetError(
                "tilted score covariance became singular; target is likely outside "
                "the achievable set", tau, res, it) from None
        t = 1.0
        for _ in range(60):
            cand = tau + t * step
            try:
                g_new, h_new = achieved_score(s, w, cand)
            except NumericalDegeneracyError:
                g_new = None
            if g_new is not None:
                res_new = np.linalg.norm((g_new - m) / scale)
                if res_new < res:
                    break
            t *= 0.5
        else:
            raise InfeasibleTargetError("line search stalled; target is likely infeasible",
                                        tau, res, it)
        tau, g, h, res = cand, g_new, h_new, res_new
    raise InfeasibleTargetError(f"no convergence in {max_iter} iterations", tau, res, max_iter)


def chebyshev_center(a, b):
    """Deepest interior point of ``{tau : a tau <= b}`` (radius capped at 1)."""
    norms = np.linalg.norm(a, axis=1)
    k = a.shape[1]
    c = np.zeros(k + 1)
    c[-1] = -1.0
    res = optimize.linprog(c, A_ub=np.hstack([a, norms[:, None]]), b_ub=b,
                           bounds=[(None, None)] * k + [(0, 1)], method="highs")
    if res.status != 0 or res.x[-1] <= 0:
        raise ConstraintError("linear constraints on tau have no interior")
    return res.x[:k]


def _active(a, b, tau):
    slack = b - a @ tau
    return slack <= 1e-8 * np.linalg.norm(a, axis=1) * (1.0 + np.linalg.norm(tau))


def solve_tilt_constrained(scores, weights, target, a_ub, b_ub, tol=DEFAULT_TOL,
                           max_iter=DEFAULT_MAX_ITER):
    """Tilt subject to linear constraints ``a_ub @ tau <= b_ub``.

    When the unconstrained solution is feasible it is returned unchanged.
    Otherwise the feasible ``tau`` minimising the standardised squared
    deviation of the achieved score from the target is returned with
    ``converged`` reflecting whether the target was met and ``active``
    flagging binding constraints.

    Raises
    ------
    ConstraintError
        Feasible set has empty interior.
    """
    s = as_scores(scores)
    w = validate_weights(weights, s.shape[0])
    a_ub = np.atleast_2d(np.asarray(a_ub, dtype=float))
    b_ub = np.atleast_1d(np.asarray(b_ub, dtype=float))
    if a_ub.shape != (b_ub.size, s.shape[2]):
        raise ValueError("constraint matrix shape does not match tau")
    center = chebyshev_center(a_ub, b_ub)
    m0, v0 = initial_score_moments(s, w)
    m = _resolve_target(target, m0)
    scale = _scales(v0, m)

    starts = []
    try:
        sol = solve_tilt(s, w, m, tol, max_iter)
        if np.all(a_ub @ sol.tau <= b_ub):
            sol.active = _active(a_ub, b_ub, sol.tau)
            return sol
        starts.append(sol.tau)
    except InfeasibleTargetError as exc:
        if exc.best_tau is not None:
            starts.append(exc.best_tau)
    # zero (pulled into the feasible set) is the untilted mixture
    starts += [np.zeros(s.shape[2]), center]

    def objective(tau):
        try:
            g, h = achieved_score(s, w, tau)
        except NumericalDegeneracyError:
            return 1e300, np.zeros_like(tau)
        r = (g - m) / scale
        return 0.5 * float(r @ r), h @ (r / scale)

    def met(tau):
        g, _ = achieved_score(s, w, tau)
        return bool(np.all(np.abs(g - m) <= tol * np.maximum(np.abs(m), scale)))

    cons = [{"type": "ineq", "fun": lambda t: b_ub - a_ub @ t, "jac": lambda t: -a_ub}]
    best = None
    for x0 in starts:
        x0 = _project(a_ub, b_ub, x0, center)
        res = optimize.minimize(objective, x0, jac=True, method="SLSQP", constraints=cons,
                                options={"maxiter": 10 * max_iter, "ftol": 1e-16})
        x = res.x
        if not np.all(a_ub @ x <= b_ub):
            x = _project(a_ub, b_ub, x, center)
        val = objective(x)[0]
        if best is None or val < best[0]:
            best = (val, x, res.nit)
            if met(x):
                break
    _, tau, nit = best
    converged = met(tau)
    return _solution(s, w, tau, m, nit, converged, _active(a_ub, b_ub, tau), "constrained-lsq")


def _project(a, b, x, center):
    """Pull ``x`` into the feasible set along the segment toward ``center``."""
    x = np.asarray(x, dtype=float)
    viol = a @ x - b
    if np.all(viol <= 0):
        return x
    # largest t in [0, 1] with a (center + t (x - center)) <= b
    d = a @ (x - center)
    slack = b - a @ center
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(d > 0, slack / d, np.inf)
    t = min(1.0, float(lim.min())) * (1 - 1e-12)
    return center + t * (x - center)


def local_tilt_approx(m0, v0, eps):
    """First-order tilt ``tau = V0^{-1} eps`` and its KL value ``eps' V0^{-1} eps / 2``.

    Returns ``(tau, kl, used_pinv)``; a singular ``V0`` falls back to the
    pseudo-inverse with a warning.
    """
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    used_pinv = False
    try:
        if np.linalg.cond(v0) > _COND_LIMIT:
            raise np.linalg.LinAlgError
        tau = np.linalg.solve(v0, eps)
    except np.linalg.LinAlgError:
        warnings.warn("score covariance is singular; using the pseudo-inverse", RuntimeWarning)
        tau = np.linalg.pinv(v0) @ eps
        used_pinv = True
    return tau, float(eps @ tau) / 2.0, used_pinv


def kl_estimate(solution, scores, weights):
    """``KL(f || p)`` of the tilted mixture from the initial one: ``tau'g - log sum pi_j a_j``."""
    tw = tilt_weights(scores, solution.tau, weights)
    g, _ = tilted_score_moments(scores, tw)
    return _kl(np.asarray(solution.tau, dtype=float), g, tw.log_norm)


def ratio_standard_error(weights, factors, values, estimate):
    """Monte Carlo standard error of ``sum_j pi_j mean(e_j u_j) / sum_j pi_j mean(e_j)``.

    ``factors`` and ``values`` have shape ``(M, N)``; models are assumed to
    have independent samples.  Used to size tolerances for tilted quantities.
    """
    w = np.asarray(weights, dtype=float)
    e = np.asarray(factors, dtype=float)
    u = np.asarray(values, dtype=float)
    n = e.shape[1]
    norm = w @ e.mean(axis=1)
    var = (e * (u - estimate)).var(axis=1)
    return float(np.sqrt(np.sum(w**2 * var) / n) / norm)
