"""Desirability-of-outcome-ranking (DOOR) probabilities for cluster randomized trials."""
from .estimators import DoorEstimate, JointCovariance, MethodUnavailable, between, joint_covariance, within_ivw, within_ssw
from .kernel import Cluster, ClusterSummary, TrialData, TrialValidationError, door_wmw, summarize_trial, validate_trial

__version__ = "0.1.0"

__all__ = [
    "Cluster", "ClusterSummary", "DoorEstimate", "JointCovariance", "MethodUnavailable", "TrialData",
    "TrialValidationError", "__version__", "between", "door_wmw", "joint_covariance", "summarize_trial",
    "validate_trial", "within_ivw", "within_ssw",
]
