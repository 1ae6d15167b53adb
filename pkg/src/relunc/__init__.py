"""Misclassification detection with a learned relative-uncertainty score."""

__version__ = "0.1.0"

from .core import DetectorConfig, EvalDataset, Method, argmax_predict, softmax_with_temperature
from .errors import DegenerateInputError, InputError, NumericalError, ParameterError, ProtocolError, RelUncError
from .metrics import MetricsReport, ScoredPopulation, auroc, calibrate_temperature, ece, fpr_at_tpr, risk_coverage
from .relu_learn import GroupedProbs, RelUMatrix, fit_d_matrix, fit_d_matrix_oracle
from .scores import gini_score, msp_uncertainty, rel_u_score, shannon_entropy

__all__ = [
    "DegenerateInputError", "DetectorConfig", "EvalDataset", "GroupedProbs", "InputError", "Method",
    "MetricsReport", "NumericalError", "ParameterError", "ProtocolError", "RelUMatrix", "RelUncError",
    "ScoredPopulation", "argmax_predict", "auroc", "calibrate_temperature", "ece", "fit_d_matrix",
    "fit_d_matrix_oracle", "fpr_at_tpr", "gini_score", "msp_uncertainty", "rel_u_score", "risk_coverage",
    "shannon_entropy", "softmax_with_temperature",
]
