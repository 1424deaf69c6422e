"""Metrics, k-means probe and report rendering."""

from .kmeans import DepthProbe, KMeansResult, depth_bias_probe, kmeans, majority_map
from .metrics import (
    EXPERT_POLICIES,
    POLICIES,
    ErrorMatrix,
    F1Report,
    IntervalAccuracy,
    ModelOutputs,
    collect_outputs,
    cpe_union_error,
    dea_confidence_profile,
    diagonal_row_maxima,
    eps_cpe,
    eps_ours,
    error_matrix,
    from_eps,
    interval_accuracy,
    labeler_interval_error,
    policy_predict,
    pseudo_label_f1,
    utilization,
)
from .report import DEFAULT_POLICIES, ACCURACY_COLUMNS, PSEUDO_LABEL_COLUMNS, EvalReport, evaluate

__all__ = [
    "DEFAULT_POLICIES", "DepthProbe", "EXPERT_POLICIES", "ErrorMatrix", "EvalReport",
    "F1Report", "IntervalAccuracy", "KMeansResult", "ModelOutputs", "POLICIES",
    "ACCURACY_COLUMNS", "PSEUDO_LABEL_COLUMNS", "collect_outputs", "cpe_union_error",
    "dea_confidence_profile", "depth_bias_probe", "diagonal_row_maxima", "eps_cpe",
    "eps_ours", "error_matrix", "evaluate", "from_eps", "interval_accuracy", "kmeans",
    "labeler_interval_error", "majority_map", "policy_predict", "pseudo_label_f1",
    "utilization",
]
