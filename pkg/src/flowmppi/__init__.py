"""Sampling-based MPC with a learned, environment-conditioned control-sequence
sampling distribution, plus out-of-distribution environment projection."""

from .controllers import (ControllerConfig, FlowMppiController,
                          FlowMppiProjectController, IcemController,
                          MppiController, TrialResult, default_config,
                          make_controller, run_trial)
from .dynamics import CostParams, default_cost_params, rollout, step_planar, step_quadrotor
from .envgen import (ObstacleParams, PassageParams, Task, gen_cluttered,
                     gen_rooms, ingest_points, sample_start_goal)
from .flow import ConditionalFlow, FlowConfig
from .grids import OccupancyGrid, SdfGrid, occupancy_to_sdf
from .posterior import (PosteriorModels, TrainSchedule, build_models,
                        flow_nll_loss, importance_weights, sample_perturbed,
                        train_posterior)
from .vae import EnvironmentVae, VaeConfig

__version__ = "0.1.0"
