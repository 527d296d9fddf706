"""Origin-destination flow estimation from link loads.

A two-stage pipeline: sliding-window Kalman calibration produces rough
flow estimates that set the priors of a multilevel state-space model,
which a sample-importance-resample-move particle filter then tracks on
the polytope of flows consistent with the observed link loads.
"""
from .calibration import CalibConfig, CalibEstimates, CalibParams, run_calibration
from .evaluation import ErrorReport, PipelineConfig, StudyConfig, StudyResult, flow_errors, run_study
from .model import ModelParams, simulate, synthetic_schedule
from .network import FlowSeries, RoutingMatrix, Topology, aggregate, build_topology
from .polytope import decompose, feasible_start, ipfp_project, rda_step, segment_bounds
from .regularization import RegularizationSchedule, compute_schedule, naive_schedule
from .sirm import SIRMConfig, run_filter

__version__ = "0.1.0"

__all__ = [
    "CalibConfig", "CalibEstimates", "CalibParams", "ErrorReport", "FlowSeries", "ModelParams",
    "PipelineConfig", "RegularizationSchedule", "RoutingMatrix", "SIRMConfig", "StudyConfig",
    "StudyResult", "Topology", "aggregate", "build_topology", "compute_schedule", "decompose",
    "feasible_start", "flow_errors", "ipfp_project", "naive_schedule", "rda_step",
    "run_calibration", "run_filter", "run_study", "segment_bounds", "simulate",
    "synthetic_schedule",
]
