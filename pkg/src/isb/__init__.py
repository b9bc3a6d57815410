"""Observation-constrained diffusion bridges with differentiable filtering."""

from .eval_bench import BenesModel, ToySpec, benes_density, benes_nlpd, emd, make_toy
from .isb_train import IsbConfig, TrajectoryCache, isb_run, train_half_bridge
from .nn_drift import DriftNet, OptimizerState, eval_drift, eval_drift_batch
from .ot_resample import SinkhornConfig, TransportPlan, resample, sinkhorn
from .particle_filter import ObservationSet, ess, filter_hook
from .sde_core import DiffusionSchedule, ObsNoiseSchedule, TimeGrid, simulate, simulate_backward

__all__ = [
    "BenesModel",
    "DiffusionSchedule",
    "DriftNet",
    "IsbConfig",
    "ObsNoiseSchedule",
    "ObservationSet",
    "OptimizerState",
    "SinkhornConfig",
    "TimeGrid",
    "ToySpec",
    "TrajectoryCache",
    "TransportPlan",
    "benes_density",
    "benes_nlpd",
    "emd",
    "ess",
    "eval_drift",
    "eval_drift_batch",
    "filter_hook",
    "isb_run",
    "make_toy",
    "resample",
    "simulate",
    "simulate_backward",
    "sinkhorn",
    "train_half_bridge",
]
