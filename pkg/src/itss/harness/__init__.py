from itss.harness.artifacts import load_basis, load_state, load_trajectory, save
from itss.harness.config import ExperimentConfig, RunManifest
from itss.harness.runner import EXPERIMENTS, Lab, run_experiment

__all__ = ["EXPERIMENTS", "ExperimentConfig", "Lab", "RunManifest", "load_basis", "load_state",
           "load_trajectory", "run_experiment", "save"]
