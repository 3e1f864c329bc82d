"""Semiparametric proportional hazards frailty regression.

Fits models with survival ``S(t | Z) = Laplace_gamma(int_0^t exp(beta'Z(s)) dA(s))``
by maximising the profile likelihood, with the baseline hazard ``A`` profiled
out as a step function, and provides weighted-bootstrap inference.
"""
from .baseline import InvalidTheta, ProfileSolver, SolverError, StepHazard, Theta, cumulative_hazard, \
    log_likelihood, solve_baseline
from .data import CovariatePath, DataError, Dataset, Subject, failure_grid, load_long_csv, load_wide_csv
from .fitting import FitOptions, FitResult, UnfittableError, fit, fit_cox, profile_loglik
from .inference import (BandResult, BootstrapError, BootstrapRun, ScoreTestResult, bootstrap, kaplan_meier,
                        make_weights, marginal_survival, predict_survival, score_statistic, score_test_gamma,
                        simultaneous_band, wald_table)
from .simulate import Baseline, CovariateLaw, TruthSpec, generate
from .transforms import DomainError, FrailtyFamily, domain_check, eps0, frailty_variance, laplace, transform_bundle

__all__ = [
    "Baseline", "BandResult", "BootstrapError", "BootstrapRun", "CovariateLaw", "CovariatePath", "DataError",
    "Dataset", "DomainError", "FitOptions", "FitResult", "FrailtyFamily", "InvalidTheta", "ProfileSolver",
    "ScoreTestResult", "SolverError", "StepHazard", "Subject", "Theta", "TruthSpec", "UnfittableError", "bootstrap",
    "cumulative_hazard", "domain_check", "eps0", "failure_grid", "fit", "fit_cox", "frailty_variance", "generate",
    "kaplan_meier", "laplace", "load_long_csv", "load_wide_csv", "log_likelihood", "make_weights",
    "marginal_survival", "predict_survival", "profile_loglik", "score_statistic", "score_test_gamma",
    "simultaneous_band", "solve_baseline", "transform_bundle", "wald_table",
]
