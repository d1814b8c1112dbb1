"""Receding-horizon control guided by an offline reference solution.

At each control step the reference controller's closed-loop state marginals
are propagated H steps ahead from the current state, a surrogate tracking
cost is assembled from them, and a short iterative-LQG solve (warm-started
from the previous step) produces a fresh local linear-Gaussian controller
whose first action is executed. Only the first step of each plan touches the
plant; the plant itself may differ from the planning model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cost import GaussianMarginal, OfflineAugmentedCost, SurrogateCost, TaskCost
from .dynamics import SimulationDiverged
from .environment import CrashParams, CrashStatus, Environment, detect_crash, observe
from .trajopt import (IlqgOptions, LinGaussController, QuuNotPositiveDefinite,
                      RolloutDiverged, ilqg_optimize)

logger = logging.getLogger(__name__)


@dataclass
class MpcOptions:
    horizon: int = 15
    inner_iterations: int = 3
    cov_reg: float = 1e-6
    deterministic: bool = False
    mu_init: float = 1e-6
    mu_max: float = 1e10

    def ilqg_options(self) -> IlqgOptions:
        return IlqgOptions(max_iterations=self.inner_iterations, tol=1e-9,
                           mu_init=self.mu_init, mu_max=self.mu_max)


@dataclass
class MpcStepResult:
    """Local controller and executed action for one control step."""

    t: int
    gain: np.ndarray            # (m, n) feedback around the current state
    feedforward: np.ndarray     # (m,)
    covariance: np.ndarray      # (m, m)
    precision: np.ndarray       # (m, m)
    mean_action: np.ndarray     # (m,)
    action: np.ndarray          # (m,) executed (sampled unless deterministic)
    chart_state: np.ndarray     # (13,) state the gain is centered on
    planned_states: np.ndarray  # (H+1, 13)
    planned_actions: np.ndarray  # (H, m)
    fallback: bool = False
    local_controller: LinGaussController | None = None


@dataclass
class RolloutRecord:
    """One closed-loop training episode; arrays cover the executed steps and
    stop at the first crash."""

    traj_index: int
    sample_index: int
    states: np.ndarray          # (L+1, 13) including the post-step state
    observations: np.ndarray    # (L, 40)
    actions: np.ndarray         # (L, 4)
    mean_actions: np.ndarray    # (L, 4)
    gains: np.ndarray           # (L, 4, n)
    precisions: np.ndarray      # (L, 4, 4)
    fallbacks: np.ndarray       # (L,) bool
    crash: CrashStatus = CrashStatus.FLYING
    crash_step: int | None = None

    @property
    def length(self) -> int:
        return self.actions.shape[0]


def propagate_marginals(reference: LinGaussController, model, x_t, t: int,
                        horizon: int, ref_lin=None) -> list[GaussianMarginal]:
    """Gaussian state marginals of the reference closed loop, seeded at the
    current state (zero covariance), expressed in the tangent charts of the
    reference nominal. Returns one marginal per step in [t+1, t+H]."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    n = model.tangent_dim
    if ref_lin is None:
        ref_lin = model.linearize_trajectory(reference.x_nom, reference.u_nom)
    mu = model.to_tangent(np.asarray(x_t, dtype=float), reference.x_nom[t])
    sigma = np.zeros((n, n))
    out = []
    for s in range(horizon):
        tt = t + s
        dyn = ref_lin[tt]
        K = reference.K[tt]
        du_mean = reference.k[tt] + K @ mu
        mu = dyn.f_x @ mu + dyn.f_u @ du_mean + dyn.f_c
        cross = sigma @ K.T
        joint_uu = reference.C[tt] + K @ cross
        sigma = (dyn.f_x @ sigma @ dyn.f_x.T
                 + dyn.f_x @ cross @ dyn.f_u.T
                 + dyn.f_u @ cross.T @ dyn.f_x.T
                 + dyn.f_u @ joint_uu @ dyn.f_u.T
                 + dyn.noise)
        sigma = 0.5 * (sigma + sigma.T)
        out.append(GaussianMarginal(mu.copy(), sigma.copy()))
    return out


def _window_controller(reference: LinGaussController, t: int, horizon: int,
                       warm: LinGaussController | None, x_t) -> LinGaussController:
    """Initial controller for the window [t, t+H]: the previous solution
    shifted by one step, extended with the reference tail, or the reference
    restriction when no warm start exists."""
    if warm is not None and warm.horizon >= 2:
        K = np.concatenate([warm.K[1:], reference.K[t + warm.horizon - 1:t + horizon]])
        k = np.concatenate([warm.k[1:], reference.k[t + warm.horizon - 1:t + horizon]])
        C = np.concatenate([warm.C[1:], reference.C[t + warm.horizon - 1:t + horizon]])
        x_nom = np.concatenate([warm.x_nom[1:],
                                reference.x_nom[t + warm.horizon:t + horizon + 1]])
        u_nom = np.concatenate([warm.u_nom[1:],
                                reference.u_nom[t + warm.horizon - 1:t + horizon]])
        if u_nom.shape[0] >= horizon:
            return LinGaussController(K[:horizon], k[:horizon], C[:horizon],
                                      x_nom[:horizon + 1], u_nom[:horizon])
    return LinGaussController(reference.K[t:t + horizon].copy(),
                              reference.k[t:t + horizon].copy(),
                              reference.C[t:t + horizon].copy(),
                              reference.x_nom[t:t + horizon + 1].copy(),
                              reference.u_nom[t:t + horizon].copy())


def mpc_step(x_t, t: int, reference: LinGaussController, policy_lin, nu, lam,
             model, options: MpcOptions, rng, warm: LinGaussController | None = None,
             ref_lin=None, cost_override=None) -> MpcStepResult:
    """Solve the horizon-H window from the current state and pick the action.

    nu, lam are the full per-step dual arrays for this trajectory index.
    cost_override replaces the surrogate objective (used by the true-cost
    baseline); it must already be expressed over local window indices.
    """
    T = reference.horizon
    horizon = min(options.horizon, T - t)
    if horizon < 1:
        raise ValueError("no steps remain to plan")

    try:
        if cost_override is None:
            marginals = propagate_marginals(reference, model, x_t, t, horizon,
                                            ref_lin=ref_lin)
            cost = SurrogateCost(marginals, reference.x_nom[t:t + horizon + 1],
                                 nu[t:t + horizon], lam[t:t + horizon],
                                 policy_lin=policy_lin, model=model, t0=t,
                                 cov_reg=options.cov_reg)
        else:
            cost = cost_override(t, horizon)
        init = _window_controller(reference, t, horizon, warm, x_t)
        result = ilqg_optimize(model, cost, x_t, horizon,
                               options.ilqg_options(), warm_start=init)
        local = result.controller
        fallback = False
    except (QuuNotPositiveDefinite, RolloutDiverged, SimulationDiverged,
            np.linalg.LinAlgError) as exc:
        logger.warning("MPC solve failed at step %d (%s); using reference action",
                       t, exc)
        local = None
        fallback = True

    if fallback:
        mean = reference.action_mean(x_t, t, model)
        cov = reference.C[t].copy()
        gain = reference.K[t].copy()
        # center the stored law on the current state: feed + gain@0 == mean
        feed = mean.copy()
        planned_states = reference.x_nom[t:t + horizon + 1].copy()
        planned_actions = reference.u_nom[t:t + horizon].copy()
        chart = np.asarray(x_t, dtype=float)
        local_ctrl = None
    else:
        mean = local.action_mean(x_t, 0, model)
        cov = local.C[0].copy()
        gain = local.K[0].copy()
        feed = local.u_nom[0] + local.k[0]
        planned_states = local.x_nom.copy()
        planned_actions = local.u_nom.copy()
        chart = local.x_nom[0].copy()
        local_ctrl = local

    cov = 0.5 * (cov + cov.T)
    precision = np.linalg.inv(cov)
    if options.deterministic:
        action = mean.copy()
    else:
        action = mean + np.linalg.cholesky(cov) @ rng.standard_normal(mean.shape[0])
    return MpcStepResult(t=t, gain=gain, feedforward=feed, covariance=cov,
                         precision=precision, mean_action=mean, action=action,
                         chart_state=chart, planned_states=planned_states,
                         planned_actions=planned_actions, fallback=fallback,
                         local_controller=local_ctrl)


def mpc_rollout(env: Environment, plant, model, reference: LinGaussController,
                policy_lin, nu, lam, rng, options: MpcOptions = MpcOptions(),
                crash_params: CrashParams = CrashParams(), traj_index: int = 0,
                sample_index: int = 0, x1=None, cost_override=None) -> RolloutRecord:
    """Closed-loop training episode: observe, plan with the nominal model,
    execute on the true plant with process noise, record, stop at a crash."""
    T = reference.horizon
    x = np.asarray(x1 if x1 is not None else reference.x_nom[0], dtype=float).copy()
    n = model.tangent_dim
    m = model.action_dim
    ref_lin = model.linearize_trajectory(reference.x_nom, reference.u_nom)

    states = [x.copy()]
    obs_list, acts, means, gains, precisions, fallbacks = [], [], [], [], [], []
    crash = CrashStatus.FLYING
    crash_step = None
    warm = None

    for t in range(T):
        o = observe(env, x)
        step_res = mpc_step(x, t, reference, policy_lin, nu, lam, model,
                            options, rng, warm=warm, ref_lin=ref_lin,
                            cost_override=cost_override)
        warm = step_res.local_controller
        x = plant.step_noisy(x, step_res.action, rng)

        obs_list.append(o)
        acts.append(step_res.action)
        means.append(step_res.mean_action)
        gains.append(step_res.gain)
        precisions.append(step_res.precision)
        fallbacks.append(step_res.fallback)
        states.append(x.copy())

        status = detect_crash(env, x, crash_params)
        if status is not CrashStatus.FLYING:
            crash = status
            crash_step = t
            break

    return RolloutRecord(
        traj_index=traj_index, sample_index=sample_index,
        states=np.asarray(states), observations=np.asarray(obs_list).reshape(-1, 40),
        actions=np.asarray(acts).reshape(-1, m),
        mean_actions=np.asarray(means).reshape(-1, m),
        gains=np.asarray(gains).reshape(-1, m, n),
        precisions=np.asarray(precisions).reshape(-1, m, m),
        fallbacks=np.asarray(fallbacks, dtype=bool),
        crash=crash, crash_step=crash_step)


def controller_rollout(env: Environment, plant, model,
                       reference: LinGaussController, rng,
                       crash_params: CrashParams = CrashParams(),
                       traj_index: int = 0, sample_index: int = 0, x1=None,
                       deterministic: bool = False) -> RolloutRecord:
    """Execute the offline linear-Gaussian controller directly on the plant
    (no replanning). This is the no-MPC training baseline."""
    T = reference.horizon
    x = np.asarray(x1 if x1 is not None else reference.x_nom[0], dtype=float).copy()
    n = model.tangent_dim
    m = model.action_dim

    states = [x.copy()]
    obs_list, acts, means, gains, precisions, fallbacks = [], [], [], [], [], []
    crash = CrashStatus.FLYING
    crash_step = None

    for t in range(T):
        o = observe(env, x)
        mean = reference.action_mean(x, t, model)
        if deterministic:
            u = mean.copy()
        else:
            u = mean + np.linalg.cholesky(reference.C[t]) @ rng.standard_normal(m)
        x = plant.step_noisy(x, u, rng)

        obs_list.append(o)
        acts.append(u)
        means.append(mean)
        gains.append(reference.K[t].copy())
        precisions.append(np.linalg.inv(reference.C[t]))
        fallbacks.append(False)
        states.append(x.copy())

        status = detect_crash(env, x, crash_params)
        if status is not CrashStatus.FLYING:
            crash = status
            crash_step = t
            break

    return RolloutRecord(
        traj_index=traj_index, sample_index=sample_index,
        states=np.asarray(states), observations=np.asarray(obs_list).reshape(-1, 40),
        actions=np.asarray(acts).reshape(-1, m),
        mean_actions=np.asarray(means).reshape(-1, m),
        gains=np.asarray(gains).reshape(-1, m, n),
        precisions=np.asarray(precisions).reshape(-1, m, m),
        fallbacks=np.asarray(fallbacks, dtype=bool),
        crash=crash, crash_step=crash_step)


def make_true_cost_window(task: TaskCost, nu, lam, policy_lin, model):
    """Cost factory for the true-cost MPC baseline: the offline augmented
    integrand restricted to the window, re-indexed to local steps."""

    def build(t0: int, horizon: int):
        nu_w = np.asarray(nu[t0:t0 + horizon], dtype=float)
        lam_w = np.asarray(lam[t0:t0 + horizon], dtype=float)
        lin = policy_lin.shifted(t0) if policy_lin is not None else None
        return OfflineAugmentedCost(task, nu_w, lam_w, policy_lin=lin,
                                    model=model)

    return build
