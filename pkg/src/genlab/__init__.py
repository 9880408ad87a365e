"""Genealogies of branching populations as ultrametric measure spaces."""
from .massdiff import CRITICAL, ModelParams
from .umspace import Dendrogram, Polynomial, concatenate_h, count_balls, evaluate_polynomial, h_top
from .harness import ExperimentConfig, RunRecord, run_experiment

__version__ = "0.1.0"

__all__ = ["CRITICAL", "ModelParams", "Dendrogram", "Polynomial", "concatenate_h", "count_balls",
           "evaluate_polynomial", "h_top", "ExperimentConfig", "RunRecord", "run_experiment"]
