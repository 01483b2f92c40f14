"""Bayesian predictive decision synthesis.

Mixtures of model predictives are reweighted by entropic tilting towards
target expected decision scores; the tilted mixture then drives the final
decision.  Modules cover the tilting solver, decision optimisation, a
regression design study and a sequential portfolio study.
"""

__version__ = "0.1.0"

from .decision import (BpdsPredictive, DecisionProblem, DecisionTable, TargetRule,
                       bpds_at_decision, expected_utility, optimize_decision, select_decision)
from .errors import (BPDSError, CollinearTargetError, ConfigError, ConstraintError, DecisionError,
                     DegenerateMixtureError, DegenerateScoreError, FitError,
                     InfeasibleTargetError, NumericalDegeneracyError)
from .mixture import (BaselineSpec, ModelEnsemble, NormalPredictive, StudentTPredictive,
                      bma_density, build_baseline, load_ensemble, mixture_moments, model_rng,
                      save_ensemble)
from .tilting import (TiltSolution, TiltTarget, achieved_score, initial_score_moments,
                      kl_estimate, local_tilt_approx, solve_tilt, solve_tilt_constrained,
                      tilt_weights)

__all__ = [
    "BPDSError", "BaselineSpec", "BpdsPredictive", "CollinearTargetError", "ConfigError",
    "ConstraintError", "DecisionError", "DecisionProblem", "DecisionTable",
    "DegenerateMixtureError", "DegenerateScoreError", "FitError", "InfeasibleTargetError",
    "ModelEnsemble", "NormalPredictive", "NumericalDegeneracyError", "StudentTPredictive",
    "TargetRule", "TiltSolution", "TiltTarget", "achieved_score", "bma_density",
    "bpds_at_decision", "build_baseline", "expected_utility", "initial_score_moments",
    "kl_estimate", "load_ensemble", "local_tilt_approx", "mixture_moments", "model_rng",
    "optimize_decision", "save_ensemble", "select_decision", "solve_tilt",
    "solve_tilt_constrained", "tilt_weights",
]
