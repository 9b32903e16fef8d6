"""Classification metrics and numerical convergence diagnostics."""
from .convergence import (
    CONSTANT_NAMES,
    ConvergenceConstants,
    DescentReport,
    RateReport,
    check_descent,
    check_rate,
    estimate_constants,
    estimate_public_gap,
)
from .metrics import UNDEFINED, ConfusionCounts, MetricsRecord, compute_metrics, confusion
from .surrogates import CNNProblem, LinearSurrogate, LogisticSurrogate, Problem, QuadraticSurrogate

__all__ = [
    "CNNProblem", "CONSTANT_NAMES", "ConfusionCounts", "ConvergenceConstants", "DescentReport",
    "LinearSurrogate", "LogisticSurrogate", "MetricsRecord", "Problem", "QuadraticSurrogate",
    "RateReport", "UNDEFINED", "check_descent", "check_rate", "compute_metrics", "confusion",
    "estimate_constants", "estimate_public_gap",
]
