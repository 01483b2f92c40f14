"""Decision-dependent synthesis: per-decision tilting, reference utility, decision search.

For each candidate decision ``x`` the model predictives ``p_j(y | x)`` are
tilted with scores ``s_j(y, x_j)`` evaluated at the model-specific optimal
decisions ``x_j``, while the expected reference utility of ``x`` evaluates
``s_j(y, x)`` at the candidate itself.  The two evaluation points are easy
to conflate; :class:`DecisionProblem` keeps them separate.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BPDSError, DecisionError
from .mixture import ModelEnsemble, combine_moments, validate_weights
from .tilting import (DEFAULT_MAX_ITER, DEFAULT_TOL, TiltTarget, as_scores,
                      initial_score_moments, solve_tilt, solve_tilt_constrained, tilt_weights)


@dataclass(frozen=True)
class TargetRule:
    """How the target expected score is set.

    ``kind="fixed"``: ``values`` is the target.
    ``kind="max"``: elementwise maximum over models of each model's expected
    score at its own optimal decision.
    ``kind="relative"``: ``values * m0(x)`` with ``m0(x)`` the untilted
    expected score at the decision being evaluated.
    """

    kind: str = "fixed"
    values: np.ndarray = None

    def __post_init__(self):
        if self.kind not in ("fixed", "max", "relative"):
            raise ValueError(f"unknown target rule {self.kind!r}")
        if self.kind != "max" and self.values is None:
            raise ValueError(f"target rule {self.kind!r} needs values")


@dataclass
class DecisionProblem:
    """Candidate decisions, score handles and target rule.

    ``score_fn(j, y, x)`` returns the ``(N, k)`` scores of outcome samples
    ``y`` under model ``j`` with decision ``x``.  Tilting calls it with
    ``model_decisions[j]``; the reference utility calls ``utility_score_fn``
    (defaulting to ``score_fn``) with the candidate decision.
    """

    candidates: np.ndarray
    score_fn: object
    model_decisions: list
    target: object
    upper_bound: np.ndarray = None
    anchor: np.ndarray = None
    utility_score_fn: object = None
    constraints: tuple = None
    decision_dependent: bool = True
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        c = np.asarray(self.candidates, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.shape[0] == 0:
            raise ValueError("candidate set is empty")
        self.candidates = c
        if self.utility_score_fn is None:
            self.utility_score_fn = self.score_fn
        if isinstance(self.target, TiltTarget):
            self.target = TargetRule("fixed" if self.target.mode == "absolute" else "relative",
                                     self.target.values)
        elif not isinstance(self.target, TargetRule):
            self.target = TargetRule("fixed", np.atleast_1d(np.asarray(self.target, dtype=float)))


@dataclass
class BpdsPredictive:
    """Synthesised predictive at one decision ``x``."""

    x: np.ndarray
    tau: np.ndarray
    pi_tilde: np.ndarray
    sample_weights: np.ndarray = field(repr=False)
    mean: np.ndarray
    cov: np.ndarray
    target: np.ndarray
    solution: object = field(repr=False)


def _ensemble_at(ensemble, x):
    return ensemble if isinstance(ensemble, ModelEnsemble) else ensemble(x)


def _scores(fn, ens, decisions):
    return as_scores(np.stack([np.atleast_2d(np.asarray(fn(j, ens.samples[j], decisions[j]),
                                                        dtype=float).reshape(ens.n_samples, -1))
                               for j in range(ens.n_models)]))


def tilt_scores(problem, ens):
    """Scores ``s_j(y, x_j)`` for every model's samples."""
    return _scores(problem.score_fn, ens, problem.model_decisions)


def utility_scores(problem, ens, x):
    """Scores ``s_j(y, x)`` at the candidate decision for every model."""
    return _scores(problem.utility_score_fn, ens, [x] * ens.n_models)


def resolve_target(problem, ensemble, weights, x=None, scores=None):
    """Target expected score for the problem's rule at decision ``x``."""
    rule = problem.target
    if rule.kind == "fixed":
        return np.atleast_1d(np.asarray(rule.values, dtype=float))
    if rule.kind == "relative":
        if scores is None:
            scores = tilt_scores(problem, _ensemble_at(ensemble, x))
        m0, _ = initial_score_moments(scores, weights)
        return np.asarray(rule.values, dtype=float) * m0
    per_model = []
    for j, xj in enumerate(problem.model_decisions):
        ens = _ensemble_at(ensemble, xj)
        s = np.asarray(problem.score_fn(j, ens.samples[j], xj), dtype=float)
        per_model.append(s.reshape(ens.n_samples, -1).mean(axis=0))
    return np.max(per_model, axis=0)


def tilted_mixture_moments(samples, pi_tilde, sample_weights):
    """Mean and covariance of outcomes under the tilted mixture."""
    samples = np.asarray(samples, dtype=float)
    means = np.einsum("ji,jia->ja", sample_weights, samples)
    d = samples - means[:, None, :]
    covs = np.einsum("ji,jia,jib->jab", sample_weights, d, d)
    return combine_moments(means, covs, pi_tilde)


def bpds_at_decision(problem, ensemble, weights, x, target=None):
    """Solve for ``tau(x)`` and the tilted mixture at decision ``x``.

    ``ensemble`` is a :class:`ModelEnsemble` (decision-independent
    predictives) or a callable ``x -> ModelEnsemble``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ens = _ensemble_at(ensemble, x)
    w = validate_weights(weights, ens.n_models)
    s = tilt_scores(problem, ens)
    m = resolve_target(problem, ensemble, w, x, s) if target is None else target
    try:
        if problem.constraints is None:
            sol = solve_tilt(s, w, m, problem.tol, problem.max_iter)
        else:
            sol = solve_tilt_constrained(s, w, m, *problem.constraints,
                                         tol=problem.tol, max_iter=problem.max_iter)
    except BPDSError as exc:
        exc.args = (f"at decision x={x.tolist()}: {exc.args[0]}",) + exc.args[1:]
        exc.decision = x
        raise
    mean, cov = tilted_mixture_moments(ens.samples, sol.pi_tilde, sol.sample_weights)
    return BpdsPredictive(x, sol.tau, sol.pi_tilde, sol.sample_weights, mean, cov, m, sol)


def _check_bound(b, observed):
    b = np.asarray(b, dtype=float)
    if np.any(observed > b + 1e-12 * np.maximum(1.0, np.abs(b))):
        raise ValueError(f"score upper bound {b.tolist()} is below an observed score "
                         f"{np.asarray(observed).tolist()}")
    return b


def reference_utility(score, tau, upper_bound):
    """``tau' (s - b)`` for one score vector or a stack of them (last axis = score)."""
    return np.asarray(np.asarray(score, dtype=float) - upper_bound) @ np.asarray(tau, dtype=float)


def tilted_expected_scores(pred, scores):
    """``sum_j pi_tilde_j E_{f_j}[s_j]`` for scores of shape ``(M, N, k)``."""
    return np.einsum("j,ji,jia->a", pred.pi_tilde, pred.sample_weights, as_scores(scores))


def expected_utility(problem, pred, x=None, ensemble=None, upper_bound=None):
    """Monte Carlo expected reference utility at decision ``x``.

    Evaluates ``tau(x)' sum_j pi_tilde_j(x) E_{f_j}[s_j(y, x) - b]`` with the
    stored tilt weights.  ``ensemble`` is needed to regenerate ``s_j(y, x)``.
    """
    x = pred.x if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    b = problem.upper_bound if upper_bound is None else upper_bound
    s = utility_scores(problem, _ensemble_at(ensemble, x), x)
    b = s.max(axis=(0, 1)) if b is None else _check_bound(b, s.max(axis=(0, 1)))
    return float(reference_utility(tilted_expected_scores(pred, s), pred.tau, b))


@dataclass
class DecisionTable:
    x: np.ndarray
    tau: np.ndarray
    pi_tilde: np.ndarray
    utility: np.ndarray
    failed: list
    upper_bound: np.ndarray

    def to_csv(self, path):
        d, k, m = self.x.shape[1], self.tau.shape[1], self.pi_tilde.shape[1]
        header = ([f"x{i}" for i in range(d)] + [f"tau{i}" for i in range(k)]
                  + [f"pi_tilde_{j}" for j in range(m)] + ["expected_utility"])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for row in zip(self.x, self.tau, self.pi_tilde, self.utility):
                wr.writerow([repr(float(v)) for v in np.concatenate([row[0], row[1], row[2],
                                                                      [row[3]]])])


def select_decision(candidates, utility, anchor=None, rtol=1e-12):
    """Index of the best candidate: max utility, then nearest the anchor, then lowest index."""
    u = np.asarray(utility, dtype=float)
    ok = np.isfinite(u)
    if not ok.any():
        raise DecisionError("no candidate has a finite expected utility")
    best = u[ok].max()
    tied = np.flatnonzero(ok & np.isclose(u, best, rtol=rtol, atol=1e-15))
    if anchor is None or tied.size == 1:
        return int(tied[0])
    dist = np.linalg.norm(np.asarray(candidates)[tied] - np.asarray(anchor, dtype=float), axis=1)
    return int(tied[np.flatnonzero(dist == dist.min())[0]])


def optimize_decision(problem, ensemble, weights, threads=1):
    """Grid search over ``problem.candidates`` for the maximal expected reference utility.

    Returns ``(x_best, utility_best, table)``.  When the predictives do not
    depend on the decision the tilt is solved once and reused.
    """
    w = validate_weights(weights, _ensemble_at(ensemble, problem.candidates[0]).n_models)
    cands = problem.candidates

    shared = None
    if not problem.decision_dependent:
        shared = bpds_at_decision(problem, ensemble, w, cands[0])

    def evaluate(x):
        try:
            if shared is not None:
                pred = BpdsPredictive(x, shared.tau, shared.pi_tilde, shared.sample_weights,
                                      shared.mean, shared.cov, shared.target, shared.solution)
            else:
                pred = bpds_at_decision(problem, ensemble, w, x)
        except BPDSError as exc:
            return None, None, None, str(exc)
        s = utility_scores(problem, _ensemble_at(ensemble, x), x)
        return pred, tilted_expected_scores(pred, s), s.max(axis=(0, 1)), None

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(evaluate, cands))
    else:
        results = [evaluate(x) for x in cands]

    failures = [(i, r[3]) for i, r in enumerate(results) if r[3] is not None]
    good = [r for r in results if r[3] is None]
    if not good:
        raise DecisionError("tilt solve failed at every candidate decision", failures)
    observed = np.max([r[2] for r in good], axis=0)
    b = observed if problem.upper_bound is None else _check_bound(problem.upper_bound, observed)
    k = good[0][0].tau.size
    m = good[0][0].pi_tilde.size
    tau = np.full((len(cands), k), np.nan)
    pit = np.full((len(cands), m), np.nan)
    util = np.full(len(cands), -np.inf)
    for i, (pred, es, _, err) in enumerate(results):
        if err is None:
            tau[i] = pred.tau
            pit[i] = pred.pi_tilde
            util[i] = reference_utility(es, pred.tau, b)
    best = select_decision(cands, util, problem.anchor)
    table = DecisionTable(cands, tau, pit, util, failures, np.atleast_1d(b))
    return cands[best], float(util[best]), table


def bpds_density(ensemble, weights, score_fn, model_decisions, tau):
    """Pointwise density of the tilted mixture; needs analytic model predictives.

    ``a_j`` are the sample-based normalisers, matching the tilt weights used
    everywhere else.
    """
    w = validate_weights(weights, ensemble.n_models)
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    s = _scores(score_fn, ensemble, model_decisions)
    tw = tilt_weights(s, tau, w)

    def density(y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.zeros(y.shape[0])
        for j, p in enumerate(ensemble.predictives):
            if tw.pi_tilde[j] == 0:
                continue
            sj = np.asarray(score_fn(j, y, model_decisions[j]), dtype=float).reshape(y.shape[0], -1)
            out += tw.pi_tilde[j] * np.exp(sj @ tau - tw.log_a[j]) * np.atleast_1d(p.pdf(y))
        return out

    return density
