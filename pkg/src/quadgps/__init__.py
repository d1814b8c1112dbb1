"""Guided policy search for a simulated quadrotor: receding-horizon control
distilled into a sensor-driven neural network policy."""

from .config import ExperimentConfig, TestSpec, load_config
from .cost import CostWeights, TaskCost, TaskTargets, task_cost
from .dynamics import (ModelErrorSpec, QuadrotorModel, VehicleParams,
                       apply_model_error, hover_controls, step)
from .environment import (CrashStatus, Environment, detect_crash,
                          generate_forest, generate_winding_hallway,
                          make_scenario, observe, ray_cast, signed_distance)
from .gps import DualState, GpsConfig, IterationReport, run_gps
from .mpc import MpcOptions, mpc_rollout, mpc_step, propagate_marginals
from .policy import (PolicyNet, closed_form_sigma, fit_linearized_policy,
                     forward, init_policy, load_policy, save_policy, train)
from .trajopt import (IlqgOptions, LinGaussController, backward_pass,
                      forward_rollout, ilqg_optimize, kl_gaussians)

__version__ = "0.1.0"
