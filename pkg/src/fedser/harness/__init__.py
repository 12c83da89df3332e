from .experiment import ExperimentConfig, load_dataset, run_experiment
from .metrics import MetricsReport, compare_runs, confusion_matrix, evaluate, report_from_predictions, sign_test

__all__ = [
    "ExperimentConfig",
    "MetricsReport",
    "compare_runs",
    "confusion_matrix",
    "evaluate",
    "load_dataset",
    "report_from_predictions",
    "run_experiment",
    "sign_test",
]
