"""Estimate out-of-distribution accuracy of classifier sets from agreement-on-the-line."""

__version__ = "0.1.0"

from .data import LabeledSplit, ModelRecord, ModelSet, Split, derive_predictions_from_logits, load_manifest
from .errors import AlineError, DegenerateError, ValidationError
from .estimators import (
    CalibrationResult,
    EstimateReport,
    Method,
    PairSystem,
    aline_d,
    aline_s,
    atc,
    average_confidence,
    doc_feat,
    naive_agreement,
    temperature_scale,
)
from .linefit import LineFit, SlopeDiffCI, Verdict, accuracy_line, agreement_line, diagnose, ols_fit, slope_diff_ci, spearman_rho
from .metrics import MetricTable, accuracy, agreement, gap_table, inverse_probit, metric_table, probit
from .synth import ExactLineSpec, ZooSpec, exact_line_tables, generate_zoo

__all__ = [
    "LabeledSplit",
    "ModelRecord",
    "ModelSet",
    "Split",
    "derive_predictions_from_logits",
    "load_manifest",
    "AlineError",
    "DegenerateError",
    "ValidationError",
    "CalibrationResult",
    "EstimateReport",
    "Method",
    "PairSystem",
    "aline_d",
    "aline_s",
    "atc",
    "average_confidence",
    "doc_feat",
    "naive_agreement",
    "temperature_scale",
    "LineFit",
    "SlopeDiffCI",
    "Verdict",
    "accuracy_line",
    "agreement_line",
    "diagnose",
    "ols_fit",
    "slope_diff_ci",
    "spearman_rho",
    "MetricTable",
    "accuracy",
    "agreement",
    "gap_table",
    "inverse_probit",
    "metric_table",
    "probit",
    "ExactLineSpec",
    "ZooSpec",
    "exact_line_tables",
    "generate_zoo",
]
