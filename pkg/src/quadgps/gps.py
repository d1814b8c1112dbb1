"""Outer training loop: offline solves, guided rollouts, policy fitting.

Each iteration (1) re-solves the augmented trajectory objective per initial
state, (2) collects M closed-loop rollouts per state with the selected
execution strategy, (3) trains the sensor policy on all collected controller
actions, (4) refits the per-trajectory linear-Gaussian view of the policy,
and (5) adjusts the per-step dual variables that couple the two optimizations.

The policy network never chooses actions on the plant during training; the
rollout executors only see controllers and the fitted linearization.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cost import CostWeights, OfflineAugmentedCost, TaskCost, TaskTargets
from .dynamics import (ModelErrorSpec, QuadrotorModel, SimulationDiverged,
                       VehicleParams, apply_model_error, default_process_noise,
                       hover_controls, make_state)
from .environment import CrashParams, CrashStatus, make_scenario
from .mpc import (MpcOptions, controller_rollout, make_true_cost_window,
                  mpc_rollout)
from .policy import (LinearizedPolicy, PolicyNet, TrainSettings, TrainingSet,
                     closed_form_sigma, fit_linearized_policy, init_policy,
                     set_normalization, train)
from .trajopt import IlqgOptions, RolloutDiverged, ilqg_optimize, kl_gaussians

logger = logging.getLogger(__name__)

VARIANTS = ("offline_only", "mpc_true_cost", "mpc_surrogate")


@dataclass
class DualOptions:
    nu_init: float = 1.0
    # per-step divergence target, nats; sits above the covariance-mismatch
    # floor between the pooled policy covariance and individual controllers
    kl_step_target: float = 4.0
    nu_factor: float = 2.0
    nu_min: float = 1e-4
    nu_max: float = 1e4
    lam_rate: float = 0.1
    lam_clip: float = 5.0


@dataclass
class DualState:
    """Per-(trajectory, step) coupling variables."""

    nu: np.ndarray    # (N, T) positive
    lam: np.ndarray   # (N, T, 4)

    @staticmethod
    def initial(n: int, horizon: int, options: DualOptions) -> "DualState":
        return DualState(np.full((n, horizon), options.nu_init),
                         np.zeros((n, horizon, 4)))

    def validate(self):
        if not (np.all(self.nu > 0.0) and np.all(np.isfinite(self.nu))
                and np.all(np.isfinite(self.lam))):
            raise ValueError("dual state must be positive/finite")


@dataclass
class GpsConfig:
    """Everything a training run needs, seeded from one master seed."""

    iterations: int = 5            # outer iterations K
    num_initial_states: int = 6    # trajectory distributions N
    samples_per_state: int = 4     # rollouts per distribution M
    horizon: int = 150             # episode steps T
    mpc_horizon: int = 15          # replanning lookahead H
    scenario: str = "straight_hallway"
    model_error: ModelErrorSpec = field(default_factory=ModelErrorSpec)
    master_seed: int = 0
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    dt_s: float = 0.05
    process_noise_variance: float = 1e-4
    weights: CostWeights = field(default_factory=CostWeights)
    target_velocity_mps: tuple[float, float, float] = (2.0, 0.0, 0.0)
    target_height_m: float = 2.0
    safe_distance_m: float = 2.0
    initial_jitter_m: float = 0.05
    ilqg: IlqgOptions = field(default_factory=IlqgOptions)
    mpc: MpcOptions = field(default_factory=MpcOptions)
    duals: DualOptions = field(default_factory=DualOptions)
    training: TrainSettings = field(default_factory=TrainSettings)
    crash: CrashParams = field(default_factory=CrashParams)

    def __post_init__(self):
        for name in ("iterations", "num_initial_states", "samples_per_state",
                     "horizon", "mpc_horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")

    def targets(self) -> TaskTargets:
        return TaskTargets(
            velocity_mps=tuple(self.target_velocity_mps),
            height_m=self.target_height_m,
            hover_action=tuple(hover_controls(self.vehicle)),
            safe_distance_m=self.safe_distance_m)


@dataclass
class IterationReport:
    iteration: int
    crash_count: int
    n_rollouts: int
    failed_rollouts: int
    mean_task_cost: float
    policy_loss: float
    mean_step_kl: float
    nu_min: float
    nu_mean: float
    nu_max: float
    lam_abs_max: float
    mean_offline_cost: float
    wall_time_s: float

    def to_dict(self) -> dict:
        return asdict(self)


def _centered_linspace(lo: float, hi: float, n: int) -> np.ndarray:
    if n == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, n)


def sample_initial_state(scenario: str, i: int, n: int, height: float = 2.0,
                         rng=None, jitter: float = 0.05) -> np.ndarray:
    """Deterministic spawn grid per trajectory index, with optional Gaussian
    position jitter for the per-sample draws."""
    if i >= n:
        raise ValueError("trajectory index out of range")
    if scenario in ("straight_hallway", "winding_hallway"):
        # 0.5 m clearance between the vehicle envelope and the walls of the
        # 5 m hallway (0.3 m collision radius)
        span = 2.5 - 0.5 - 0.3
        ys = _centered_linspace(-span, span, n)
        p = np.array([0.0, ys[i], height])
    elif scenario == "cylinder":
        n_cols = min(3, n)
        n_rows = math.ceil(n / n_cols)
        ys = _centered_linspace(-2.5, 2.5, n_rows)
        row, col = i % n_rows, i // n_rows
        p = np.array([-float(col), ys[row], height])
    elif scenario in ("empty", "forest"):
        ys = _centered_linspace(-2.0, 2.0, n)
        p = np.array([0.0, ys[i] if scenario == "forest" else 0.0, height])
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    if rng is not None and jitter > 0.0:
        p = p + rng.normal(0.0, jitter, size=3)
    return make_state(p=p)


def update_duals(duals: DualState, records, policy_lins, model,
                 options: DualOptions):
    """Apply the per-step dual update rules.

    The action-mean multiplier follows dual ascent on the mean-action
    constraint: it moves along (policy mean - controller mean) at the sampled
    states, so the -u'lam trajectory term and the +lam'mu policy term pull
    the two distributions together. The step is preconditioned by the mean
    controller precision: a multiplier displaces each optimum by roughly the
    inverse action curvature, and rotor commands have near-flat directions
    (yaw differentials), so an unweighted step in command units destabilizes
    them. The step weight doubles when the per-step divergence exceeds twice
    its target and halves when it falls below half of it. Returns (new duals,
    per-(i, t) divergence matrix).
    """
    N, T = duals.nu.shape
    nu = duals.nu.copy()
    lam = duals.lam.copy()
    kl_matrix = np.full((N, T), np.nan)
    for i in range(N):
        lin = policy_lins[i]
        if lin is None:
            continue
        for t in range(T):
            recs = [r for r in records[i] if r.length > t]
            if not recs:
                continue
            states = np.stack([r.states[t] for r in recs])
            p_means = np.stack([r.mean_actions[t] for r in recs])
            p_covs = np.stack([np.linalg.inv(r.precisions[t]) for r in recs])
            pi_means = lin.mean(states, np.full(len(recs), t), model)
            kls = [kl_gaussians(p_means[j], p_covs[j], pi_means[j], lin.S[t])
                   for j in range(len(recs))]
            kl_t = float(np.mean(kls))
            kl_matrix[i, t] = kl_t
            gap = np.mean(pi_means - p_means, axis=0)
            prec_mean = np.mean([r.precisions[t] for r in recs], axis=0)
            lam[i, t] = np.clip(
                lam[i, t] + options.lam_rate * nu[i, t] * (prec_mean @ gap),
                -options.lam_clip, options.lam_clip)
            if kl_t > 2.0 * options.kl_step_target:
                nu[i, t] *= options.nu_factor
            elif kl_t < 0.5 * options.kl_step_target:
                nu[i, t] /= options.nu_factor
            nu[i, t] = np.clip(nu[i, t], options.nu_min, options.nu_max)
    out = DualState(nu, lam)
    out.validate()
    return out, kl_matrix


class RunSink:
    """Callbacks for streaming artifacts out of a training run."""

    def on_rollout(self, iteration: int, record) -> None:
        pass

    def on_iteration(self, iteration: int, report: IterationReport,
                     net: PolicyNet, duals: DualState) -> None:
        pass


def _build_training_set(records_by_i, duals: DualState, tangent_dim: int) -> TrainingSet:
    cols = {k: [] for k in ("i", "j", "t", "x", "o", "u", "P", "K", "nu", "lam")}
    for i, recs in enumerate(records_by_i):
        for rec in recs:
            for t in range(rec.length):
                cols["i"].append(rec.traj_index)
                cols["j"].append(rec.sample_index)
                cols["t"].append(t)
                cols["x"].append(rec.states[t])
                cols["o"].append(rec.observations[t])
                cols["u"].append(rec.mean_actions[t])
                cols["P"].append(rec.precisions[t])
                cols["K"].append(rec.gains[t])
                cols["nu"].append(duals.nu[i, t])
                cols["lam"].append(duals.lam[i, t])
    if not cols["t"]:
        raise RuntimeError("all rollouts failed; no training data")
    return TrainingSet(
        traj_index=np.asarray(cols["i"]), sample_index=np.asarray(cols["j"]),
        step=np.asarray(cols["t"]), states=np.asarray(cols["x"]),
        obs=np.asarray(cols["o"]), target_mean=np.asarray(cols["u"]),
        precision=np.asarray(cols["P"]),
        gains=np.asarray(cols["K"]).reshape(-1, 4, tangent_dim),
        nu=np.asarray(cols["nu"]), lam=np.asarray(cols["lam"]))


def run_gps(config: GpsConfig, variant: str = "mpc_surrogate",
            sink: RunSink | None = None):
    """Run the full training loop; returns (policy net, iteration reports).

    Fully reproducible from config.master_seed: every stochastic component
    draws from a generator keyed on (master seed, role, iteration, indices).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown training variant {variant!r}")
    sink = sink or RunSink()
    seed = config.master_seed
    N, M, T, K = (config.num_initial_states, config.samples_per_state,
                  config.horizon, config.iterations)

    env = make_scenario(config.scenario, seed=seed)
    noise = default_process_noise(config.process_noise_variance)
    model = QuadrotorModel(config.vehicle, config.dt_s, noise)
    true_params = apply_model_error(config.vehicle, config.model_error)
    plant = QuadrotorModel(true_params, config.dt_s, noise)
    targets = config.targets()
    task = TaskCost(env, targets, config.weights)

    net = init_policy(np.random.default_rng([seed, 7]))
    duals = DualState.initial(N, T, config.duals)
    policy_lins: list[LinearizedPolicy | None] = [None] * N
    references = [None] * N
    reports: list[IterationReport] = []

    for k in range(1, K + 1):
        t_start = time.monotonic()
        use_policy_terms = k >= 2 and any(l is not None for l in policy_lins)

        # (1) offline solves; the first iteration runs the plain task
        # objective (unit step weight, zero multipliers, no policy fit)
        if use_policy_terms:
            nu_arrays = duals.nu
            lam_arrays = duals.lam
        else:
            nu_arrays = np.ones_like(duals.nu)
            lam_arrays = np.zeros_like(duals.lam)
        offline_costs = []
        for i in range(N):
            x1 = sample_initial_state(config.scenario, i, N,
                                      height=config.target_height_m)
            cost_i = OfflineAugmentedCost(
                task, nu_arrays[i], lam_arrays[i],
                policy_lin=policy_lins[i] if use_policy_terms else None,
                model=model)
            result = ilqg_optimize(model, cost_i, x1, T, config.ilqg,
                                   warm_start=references[i])
            references[i] = result.controller
            offline_costs.append(result.cost)
            logger.info("iter %d offline solve %d/%d cost %.4g (%d iLQG steps)",
                        k, i + 1, N, result.cost, result.iterations)

        # (2) guided rollouts
        records_by_i: list[list] = [[] for _ in range(N)]
        failed = 0
        for i in range(N):
            for j in range(M):
                rng = np.random.default_rng([seed, 1000 + k, i, j])
                x1 = sample_initial_state(config.scenario, i, N,
                                          height=config.target_height_m,
                                          rng=rng, jitter=config.initial_jitter_m)
                try:
                    if variant == "offline_only":
                        rec = controller_rollout(
                            env, plant, model, references[i], rng,
                            crash_params=config.crash, traj_index=i,
                            sample_index=j, x1=x1)
                    else:
                        override = None
                        if variant == "mpc_true_cost":
                            override = make_true_cost_window(
                                task, nu_arrays[i], lam_arrays[i],
                                policy_lins[i] if use_policy_terms else None,
                                model)
                        rec = mpc_rollout(
                            env, plant, model, references[i],
                            policy_lins[i] if use_policy_terms else None,
                            nu_arrays[i], lam_arrays[i], rng,
                            options=config.mpc, crash_params=config.crash,
                            traj_index=i, sample_index=j, x1=x1,
                            cost_override=override)
                except (SimulationDiverged, RolloutDiverged) as exc:
                    logger.warning("rollout (%d, %d) failed: %s", i, j, exc)
                    failed += 1
                    continue
                records_by_i[i].append(rec)
                sink.on_rollout(k, rec)
        n_rollouts = sum(len(r) for r in records_by_i)
        if n_rollouts == 0:
            raise RuntimeError("all rollouts failed; aborting training")
        crash_count = sum(1 for recs in records_by_i for r in recs
                          if r.crash is not CrashStatus.FLYING)
        task_costs = [float(np.sum(task.stage_cost_batch(
            r.states[:r.length], r.actions, np.arange(r.length))))
            for recs in records_by_i for r in recs]

        # (3) policy training
        data = _build_training_set(records_by_i, duals, model.tangent_dim)
        if k == 1:
            net = set_normalization(net, data.obs)
        sigma = closed_form_sigma(data.precision, N, steps=data.step)
        net, loss = train(net, data, config.training,
                          np.random.default_rng([seed, 2000 + k]))
        net.sigma = sigma

        # (4) linear-Gaussian view of the policy per trajectory distribution
        for i in range(N):
            if records_by_i[i]:
                gmm_seed = int(np.random.SeedSequence([seed, 3000 + k, i])
                               .generate_state(1)[0])
                policy_lins[i] = fit_linearized_policy(
                    net, records_by_i[i], references[i].x_nom, model,
                    seed=gmm_seed)

        # (5) dual updates
        duals, kl_matrix = update_duals(duals, records_by_i, policy_lins,
                                        model, config.duals)

        report = IterationReport(
            iteration=k, crash_count=crash_count, n_rollouts=n_rollouts,
            failed_rollouts=failed, mean_task_cost=float(np.mean(task_costs)),
            policy_loss=float(loss),
            mean_step_kl=float(np.nanmean(kl_matrix)) if np.any(np.isfinite(kl_matrix)) else float("nan"),
            nu_min=float(duals.nu.min()), nu_mean=float(duals.nu.mean()),
            nu_max=float(duals.nu.max()),
            lam_abs_max=float(np.abs(duals.lam).max()),
            mean_offline_cost=float(np.mean(offline_costs)),
            wall_time_s=time.monotonic() - t_start)
        reports.append(report)
        sink.on_iteration(k, report, net, duals)
        logger.info("iteration %d/%d: crashes %d/%d, policy loss %.4g, "
                    "mean KL %.4g, %.1fs", k, K, crash_count, n_rollouts,
                    loss, report.mean_step_kl, report.wall_time_s)

    return net, reports
