"""Desk-scale laboratory for comparing architecture search against hyperparameter tuning."""

__version__ = "0.1.0"

from .config import ArchConfig, ConfigMutation, FieldEdit, HPConfig, SearchConstraint, TrackConfig  # noqa: E402
from .search import RunLog, load_runlog, run_search  # noqa: E402
from .trainer import Budget, ExperimentRecord, run_experiment  # noqa: E402

__all__ = [
    "ArchConfig", "Budget", "ConfigMutation", "ExperimentRecord", "FieldEdit", "HPConfig", "RunLog",
    "SearchConstraint", "TrackConfig", "load_runlog", "run_experiment", "run_search", "__version__",
]
