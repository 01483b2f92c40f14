"""Exception hierarchy shared by the solvers and study pipelines."""

import numpy as np


class BPDSError(Exception):
    """Base class for all package errors."""


class DegenerateMixtureError(BPDSError):
    """Mixture covariance is not positive definite."""


class NumericalDegeneracyError(BPDSError):
    """Tilt weights collapsed (all zero or non-finite)."""


class DegenerateScoreError(BPDSError):
    """Score covariance under the tilted mixture is singular."""


class InfeasibleTargetError(BPDSError):
    """Newton iteration failed to reach the target expected score.

    The best iterate found is kept on the exception so callers can inspect
    how close the solve got.
    """

    def __init__(self, message, best_tau=None, best_residual=None, iterations=0):
        super().__init__(message)
        self.best_tau = None if best_tau is None else np.asarray(best_tau, dtype=float)
        self.best_residual = best_residual
        self.iterations = iterations


class ConstraintError(BPDSError):
    """Linear constraint set on the tilting vector is empty."""


class CollinearTargetError(BPDSError):
    """Markowitz target constraint is degenerate (mean vector parallel to 1)."""


class FitError(BPDSError):
    """Regression design is rank deficient."""


class ConfigError(BPDSError, ValueError):
    """Configuration failed validation; ``problems`` lists every violation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DecisionError(BPDSError):
    """Every candidate decision failed its tilt solve."""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or []
