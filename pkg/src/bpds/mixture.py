"""Model pools, initial mixture weights and baseline predictives.

A :class:`ModelEnsemble` holds Monte Carlo draws ``samples[j]`` of shape
``(N, q)`` from each model predictive ``p_j(y | M_j)``, optionally with an
analytic handle (:class:`NormalPredictive` or :class:`StudentTPredictive`)
for density and moment evaluation.  When ``has_baseline`` is set, index 0
is the baseline model.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DegenerateMixtureError

SIMPLEX_TOL = 1e-12
DEFAULT_MC_SAMPLES = 10_000


def model_rng(seed, *index):
    """Generator for a given (seed, index...) stream.

    Streams depend only on their own key, so adding models or days never
    perturbs the draws of existing ones.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, index)]))


def validate_weights(weights, size=None):
    """Return ``weights`` as a float array after checking it lies on the simplex."""
    w = np.asarray(weights, dtype=float).ravel()
    if size is not None and w.size != size:
        raise ValueError(f"expected {size} weights, got {w.size}")
    if w.size == 0 or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a non-empty finite vector")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"weights sum to {w.sum()!r}, not 1")
    return w


def normalize_log_weights(logw):
    """Exponentiate and normalise log weights with a max shift."""
    logw = np.asarray(logw, dtype=float)
    finite = np.isfinite(logw)
    if not finite.any():
        raise ValueError("all log weights are -inf")
    w = np.exp(logw - logw[finite].max())
    return w / w.sum()


def _check_spd(cov, what="scale matrix"):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{what} must be square")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
        raise ValueError(f"{what} must be symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DegenerateMixtureError(f"{what} is not positive definite") from None
    return 0.5 * (cov + cov.T)


def eigen_factor(cov):
    """Factor ``L`` with ``L.T @ L == cov`` built from the eigendecomposition.

    Rows are ``sqrt(lambda_k) v_k`` in decreasing eigenvalue order, each
    eigenvector signed so its component sum is non-negative.  Unlike a
    Cholesky factor this makes ``z @ L`` equivariant under a permutation of
    the coordinates, which the portfolio label-equivariance check relies on.
    """
    lam, vec = np.linalg.eigh(np.asarray(cov, dtype=float))
    order = np.argsort(-lam, kind="stable")
    lam = np.clip(lam[order], 0.0, None)
    vec = vec[:, order]
    sign = np.where(vec.sum(axis=0) < 0, -1.0, 1.0)
    vec = vec * sign
    return np.sqrt(lam)[:, None] * vec.T


@dataclass(frozen=True)
class NormalPredictive:
    """Multivariate normal predictive with mean ``mean`` and covariance ``cov``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", _check_spd(np.reshape(self.cov, (mean.size, mean.size))))

    @property
    def dim(self):
        return self.mean.size

    def covariance(self):
        return self.cov

    def logpdf(self, y):
        return stats.multivariate_normal(self.mean, self.cov).logpdf(np.asarray(y, dtype=float))

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def sample(self, n, rng):
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ eigen_factor(self.cov)

    def to_dict(self):
        return {"family": "normal", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True)
class StudentTPredictive:
    """Multivariate Student-T with location ``loc``, scale matrix ``scale``, ``df`` degrees of freedom."""

    loc: np.ndarray
    scale: np.ndarray
    df: float

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.loc, dtype=float))
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", _check_spd(np.reshape(self.scale, (loc.size, loc.size))))
        if not self.df > 0:
            raise ValueError("df must be positive")
        object.__setattr__(self, "df", float(self.df))

    @property
    def dim(self):
        return self.loc.size

    @property
    def mean(self):
        return self.loc

    def covariance(self):
        if self.df <= 2:
            raise ValueError(f"variance undefined for df={self.df} <= 2")
        return self.scale * self.df / (self.df - 2.0)

    def logpdf(self, y):
        return stats.multivariate_t(self.loc, self.scale, df=self.df).logpdf(np.asarray(y, dtype=float))

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def sample(self, n, rng):
        # scale mixture of normals: loc + z L / sqrt(w / df), w ~ chi2(df)
        z = rng.standard_normal((n, self.dim))
        w = rng.chisquare(self.df, size=n)
        return self.loc + (z @ eigen_factor(self.scale)) / np.sqrt(w / self.df)[:, None]

    def to_dict(self):
        return {"family": "t", "loc": self.loc.tolist(), "scale": self.scale.tolist(), "df": self.df}


def predictive_from_dict(d):
    if d is None:
        return None
    if d["family"] == "normal":
        return NormalPredictive(d["mean"], d["cov"])
    if d["family"] == "t":
        return StudentTPredictive(d["loc"], d["scale"], d["df"])
    raise ValueError(f"unknown predictive family {d['family']!r}")


@dataclass(frozen=True)
class ModelEnsemble:
    """Per-model outcome samples, shape ``(J + 1, N, q)`` (or ``(J, N, q)`` without baseline)."""

    samples: np.ndarray
    predictives: tuple = None
    labels: tuple = None
    has_baseline: bool = False
    seed: int = None

    def __post_init__(self):
        s = self.samples
        if not isinstance(s, np.ndarray):
            shapes = {np.shape(np.atleast_2d(a)) for a in s}
            if len(shapes) != 1:
                raise ValueError(f"models disagree on sample shape: {sorted(shapes)}")
        s = np.array(s, dtype=float)
        if s.ndim == 2:
            s = s[:, :, None]
        if s.ndim != 3 or min(s.shape) < 1:
            raise ValueError("samples must have shape (models, N, q) with N, q >= 1")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if self.predictives is not None:
            preds = tuple(self.predictives)
            if len(preds) != s.shape[0]:
                raise ValueError("one analytic predictive (or None) per model is required")
            for p in preds:
                if p is not None and p.dim != s.shape[2]:
                    raise ValueError("analytic predictive dimension differs from samples")
            object.__setattr__(self, "predictives", preds)
        labels = self.labels
        if labels is None:
            start = 0 if self.has_baseline else 1
            labels = tuple(f"M{j}" for j in range(start, start + s.shape[0]))
        elif len(labels) != s.shape[0]:
            raise ValueError("one label per model is required")
        object.__setattr__(self, "labels", tuple(labels))

    @classmethod
    def from_predictives(cls, predictives, n=DEFAULT_MC_SAMPLES, seed=0, labels=None,
                         has_baseline=False):
        """Draw ``n`` samples from each analytic predictive on its own seeded stream."""
        samples = np.stack([p.sample(n, model_rng(seed, j)) for j, p in enumerate(predictives)])
        return cls(samples, tuple(predictives), labels, has_baseline, seed)

    @property
    def n_models(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]

    @property
    def dim(self):
        return self.samples.shape[2]

    def with_baseline(self, baseline_samples, baseline_predictive=None, label="M0"):
        """New ensemble with a baseline prepended at index 0."""
        if self.has_baseline:
            raise ValueError("ensemble already has a baseline")
        b = np.asarray(baseline_samples, dtype=float).reshape(1, self.n_samples, self.dim)
        preds = None
        if self.predictives is not None or baseline_predictive is not None:
            rest = self.predictives or (None,) * self.n_models
            preds = (baseline_predictive,) + tuple(rest)
        return ModelEnsemble(np.concatenate([b, self.samples]), preds,
                             (label,) + self.labels, True, self.seed)

    def model_moments(self, j, analytic=True):
        """Mean and covariance of model ``j``: analytic when available, else from samples."""
        p = None if self.predictives is None else self.predictives[j]
        if analytic and p is not None:
            try:
                return p.mean.copy(), p.covariance().copy()
            except ValueError:
                pass
        x = self.samples[j]
        mu = x.mean(axis=0)
        d = x - mu
        return mu, d.T @ d / x.shape[0]


def combine_moments(means, covs, weights):
    """Law-of-total-variance moments of a mixture with the given component moments."""
    w = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    mu = w @ means
    d = means - mu
    cov = np.einsum("j,jab->ab", w, covs) + (w[:, None] * d).T @ d
    return mu, 0.5 * (cov + cov.T)


def mixture_moments(ensemble, weights, analytic=True):
    """Mean vector and covariance of the ``weights``-mixture of the ensemble models."""
    w = validate_weights(weights, ensemble.n_models)
    moments = [ensemble.model_moments(j, analytic) for j in range(ensemble.n_models)]
    return combine_moments([m for m, _ in moments], [c for _, c in moments], w)


@dataclass(frozen=True)
class BaselineSpec:
    """How to build the baseline predictive.

    ``mode`` is ``"normal"`` or ``"t"`` (mixture-matched location with the
    mixture variance inflated by ``1/discount``) or ``"custom"`` (use
    ``predictive`` as given).
    """

    mode: str = "normal"
    discount: float = 0.135
    df: float = 9.0
    predictive: object = field(default=None, compare=False)

    def __post_init__(self):
        if self.mode not in ("normal", "t", "custom"):
            raise ValueError(f"unknown baseline mode {self.mode!r}")
        if not 0 < self.discount <= 1:
            raise ValueError("baseline discount must lie in (0, 1]")
        if self.mode == "t" and not self.df > 2:
            raise ValueError("a T baseline needs df > 2 for its variance to exist")
        if self.mode == "custom" and self.predictive is None:
            raise ValueError("custom baseline requires a predictive")


def build_baseline(ensemble, weights, spec, n=None, seed=None, analytic=True):
    """Construct the baseline predictive and draw samples from it.

    The location is the weighted mixture mean and the variance is the
    mixture variance divided by ``spec.discount``.  For a T baseline the
    scale matrix is set so that its variance matches.

    Returns
    -------
    predictive : NormalPredictive or StudentTPredictive
    samples : ndarray, shape (n, q)
    """
    n = ensemble.n_samples if n is None else n
    seed = (ensemble.seed or 0) if seed is None else seed
    if spec.mode == "custom":
        pred = spec.predictive
    else:
        mu, cov = mixture_moments(ensemble, weights, analytic)
        var = _check_spd(cov / spec.discount, "mixture covariance")
        if spec.mode == "normal":
            pred = NormalPredictive(mu, var)
        else:
            pred = StudentTPredictive(mu, var * (spec.df - 2.0) / spec.df, spec.df)
    # a reserved stream index keeps baseline draws disjoint from model streams
    return pred, pred.sample(n, model_rng(seed, 2**31 - 1))


def bma_density(ensemble, weights):
    """Pointwise mixture density ``sum_j pi_j p_j(y)``; the baseline weight must be zero."""
    w = validate_weights(weights, ensemble.n_models)
    if ensemble.has_baseline and w[0] != 0:
        raise ValueError("BMA requires zero weight on the baseline model")
    if ensemble.predictives is None or any(
            p is None for p, wj in zip(ensemble.predictives, w) if wj > 0):
        raise ValueError("BMA density needs analytic predictives for weighted models")
    active = [(wj, p) for wj, p in zip(w, ensemble.predictives) if wj > 0]

    def density(y):
        return sum(wj * p.pdf(y) for wj, p in active)

    return density


def save_ensemble(ensemble, weights, directory):
    """Write one CSV per model plus ``manifest.json`` (weights, seed, shapes, predictives)."""
    os.makedirs(directory, exist_ok=True)
    files = []
    for j in range(ensemble.n_models):
        name = f"model_{j}.csv"
        header = ",".join(f"y{k}" for k in range(ensemble.dim))
        rows = "\n".join(",".join(repr(float(v)) for v in row) for row in ensemble.samples[j])
        with open(os.path.join(directory, name), "w") as fh:
            fh.write(header + "\n" + rows + "\n")
        files.append(name)
    manifest = {
        "files": files,
        "labels": list(ensemble.labels),
        "weights": [float(v) for v in validate_weights(weights, ensemble.n_models)],
        "seed": ensemble.seed,
        "n_models": ensemble.n_models,
        "n_samples": ensemble.n_samples,
        "dim": ensemble.dim,
        "has_baseline": ensemble.has_baseline,
        "predictives": None if ensemble.predictives is None else [
            None if p is None else p.to_dict() for p in ensemble.predictives],
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_ensemble(directory):
    """Inverse of :func:`save_ensemble`; returns ``(ensemble, weights)``."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    samples = []
    for name in manifest["files"]:
        arr = np.loadtxt(os.path.join(directory, name), delimiter=",", skiprows=1, ndmin=2)
        samples.append(arr.reshape(manifest["n_samples"], manifest["dim"]))
    preds = manifest["predictives"]
    ens = ModelEnsemble(np.stack(samples),
                        None if preds is None else tuple(predictive_from_dict(p) for p in preds),
                        tuple(manifest["labels"]), manifest["has_baseline"], manifest["seed"])
    return ens, np.asarray(manifest["weights"])
