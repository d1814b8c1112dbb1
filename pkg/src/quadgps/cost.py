"""Task cost, local quadratic expansions, and the MPC objectives.

Every cost object in this module exposes the same interface, evaluated either
at a point or batched along a trajectory:

    stage_cost_batch(states (B, 13), actions (B, 4), ts (B,)) -> (B,)
    terminal_cost_batch(states (B, 13)) -> (B,)
    expand_trajectory(model, states (T+1, .), actions (T, .)) ->
        (list[QuadExpansion], (terminal grad, terminal hess))

Expansions are taken in the model's tangent chart at the given nominal, with
the stacked variable z = [dx; du]. All finite differencing is central with a
shared step size and fully batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import POS, QUAT, VEL, ANGVEL, quat_normalize
from .environment import Environment, signed_distance

FD_STEP = 1e-4


class ExpansionError(RuntimeError):
    """Cost expansion produced non-finite derivatives."""


@dataclass(frozen=True)
class CostWeights:
    """Quadratic penalty coefficients of the flight task."""

    velocity: float = 1.0e3
    height: float = 500.0
    orientation: float = 1.0e4
    angular_velocity: float = 250.0
    action: float = 0.5
    obstacle: float = 1.0e4


@dataclass(frozen=True)
class TaskTargets:
    velocity_mps: tuple[float, float, float] = (0.0, 0.0, 0.0)
    height_m: float = 2.0
    orientation_quat: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    angular_velocity_radps: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hover_action: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    safe_distance_m: float = 1.0

    def __post_init__(self):
        if self.safe_distance_m <= 0.0:
            raise ValueError("safe_distance_m must be positive")
        q = np.asarray(self.orientation_quat, dtype=float)
        object.__setattr__(self, "orientation_quat", tuple(quat_normalize(q)))


def task_cost(states, actions, targets: TaskTargets, env: Environment,
              weights: CostWeights = CostWeights()) -> np.ndarray:
    """Flight cost: velocity, height, orientation, spin, and control-effort
    penalties plus a hinge on obstacle clearance. Batched over leading axes."""
    x = np.asarray(states, dtype=float)
    u = np.asarray(actions, dtype=float)
    v_err = x[..., VEL] - np.asarray(targets.velocity_mps)
    z_err = x[..., 2] - targets.height_m
    q_star = np.asarray(targets.orientation_quat)
    q = x[..., QUAT]
    # quaternions double-cover rotations: align the sign before differencing
    q = np.where(np.sum(q * q_star, axis=-1, keepdims=True) < 0.0, -q, q)
    q_err = q - q_star
    w_err = x[..., ANGVEL] - np.asarray(targets.angular_velocity_radps)
    u_err = u - np.asarray(targets.hover_action)
    hinge = np.maximum(targets.safe_distance_m - signed_distance(env, x[..., POS]), 0.0)
    return (weights.velocity * np.sum(v_err**2, axis=-1)
            + weights.height * z_err**2
            + weights.orientation * np.sum(q_err**2, axis=-1)
            + weights.angular_velocity * np.sum(w_err**2, axis=-1)
            + weights.action * np.sum(u_err**2, axis=-1)
            + weights.obstacle * hinge)


# ---------------------------------------------------------------------------
# Quadratic expansions
# ---------------------------------------------------------------------------

@dataclass
class QuadExpansion:
    """Second-order model c(z) ~ const + grad.z + 0.5 z'Hz over z = [dx; du]."""

    grad: np.ndarray
    hess: np.ndarray
    const: float

    def __add__(self, other: "QuadExpansion") -> "QuadExpansion":
        return QuadExpansion(self.grad + other.grad, self.hess + other.hess,
                             self.const + other.const)

    def scaled(self, a: float) -> "QuadExpansion":
        return QuadExpansion(a * self.grad, a * self.hess, a * self.const)


@dataclass
class GaussianMarginal:
    """Gaussian over the tangent state at one future step."""

    mean: np.ndarray    # (12,)
    cov: np.ndarray     # (12, 12)


_templates: dict[int, tuple] = {}


def iter_index_groups(idx):
    """Yield (value, selector) pairs grouping equal entries of idx; selectors
    are slices when idx is non-decreasing (the layout batched expansions
    produce), otherwise boolean masks."""
    idx = np.asarray(idx)
    if idx.size == 0:
        return
    if np.all(idx[:-1] <= idx[1:]):
        uniq, starts = np.unique(idx, return_index=True)
        ends = np.append(starts[1:], idx.size)
        for v, a, b in zip(uniq, starts, ends):
            yield int(v), slice(int(a), int(b))
    else:
        for v in np.unique(idx):
            yield int(v), idx == v


def _fd_template(d: int):
    """Offsets and index bookkeeping for a full central-difference Hessian."""
    if d in _templates:
        return _templates[d]
    eye = np.eye(d)
    offsets = [np.zeros((1, d)), eye, -eye]
    iu, ju = np.triu_indices(d, k=1)
    offsets.append(eye[iu] + eye[ju])
    offsets.append(eye[iu] - eye[ju])
    offsets.append(-eye[iu] + eye[ju])
    offsets.append(-eye[iu] - eye[ju])
    offsets = np.concatenate(offsets, axis=0)
    npair = iu.size
    idx = {
        "plus": np.arange(1, 1 + d),
        "minus": np.arange(1 + d, 1 + 2 * d),
        "pp": np.arange(1 + 2 * d, 1 + 2 * d + npair),
        "pm": np.arange(1 + 2 * d + npair, 1 + 2 * d + 2 * npair),
        "mp": np.arange(1 + 2 * d + 2 * npair, 1 + 2 * d + 3 * npair),
        "mm": np.arange(1 + 2 * d + 3 * npair, 1 + 2 * d + 4 * npair),
    }
    _templates[d] = (offsets, idx, iu, ju)
    return _templates[d]


def _fd_expand(values, d: int, h: float):
    """Assemble gradients/Hessians from template evaluations (T, P)."""
    offsets, idx, iu, ju = _fd_template(d)
    if not np.all(np.isfinite(values)):
        raise ExpansionError("non-finite cost values during expansion")
    center = values[:, 0]
    plus = values[:, idx["plus"]]
    minus = values[:, idx["minus"]]
    grad = (plus - minus) / (2.0 * h)
    hdiag = (plus - 2.0 * center[:, None] + minus) / h**2
    hoff = (values[:, idx["pp"]] - values[:, idx["pm"]]
            - values[:, idx["mp"]] + values[:, idx["mm"]]) / (4.0 * h**2)
    T = values.shape[0]
    hess = np.zeros((T, d, d))
    hess[:, np.arange(d), np.arange(d)] = hdiag
    hess[:, iu, ju] = hoff
    hess[:, ju, iu] = hoff
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise ExpansionError("non-finite derivatives during expansion")
    return grad, hess, center


def fd_expand_stages(value_fn, model, states, actions, ts, h: float = FD_STEP):
    """Finite-difference expansion of a stage cost along a trajectory.

    value_fn(states (B, .), actions (B, .), ts (B,)) -> (B,). The chart is
    lifted through the model when given, otherwise plain vector offsets.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    T = actions.shape[0]
    m = actions.shape[1]
    n = model.tangent_dim if model is not None else states.shape[1]
    d = n + m
    offsets, _, _, _ = _fd_template(d)
    P = offsets.shape[0]

    dx = offsets[:, :n] * h
    du = offsets[:, n:] * h
    if model is not None:
        xb = model.from_tangent(states[:T, None, :], dx[None, :, :])
    else:
        xb = states[:T, None, :] + dx[None, :, :]
    ub = actions[:, None, :] + du[None, :, :]
    tb = np.repeat(np.asarray(ts), P)
    vals = value_fn(xb.reshape(T * P, -1), ub.reshape(T * P, m), tb).reshape(T, P)
    grad, hess, const = _fd_expand(vals, d, h)
    return [QuadExpansion(grad[t], hess[t], const[t]) for t in range(T)]


def fd_expand_terminal(value_fn, model, state, h: float = FD_STEP):
    """Finite-difference expansion of a terminal (state-only) cost."""
    state = np.asarray(state, dtype=float)
    n = model.tangent_dim if model is not None else state.shape[0]
    offsets, _, _, _ = _fd_template(n)
    if model is not None:
        xb = model.from_tangent(state[None, :], offsets * h)
    else:
        xb = state[None, :] + offsets * h
    vals = value_fn(xb)[None, :]
    grad, hess, const = _fd_expand(vals, n, h)
    return grad[0], hess[0], const[0]


def quadratize(cost_fn, state, action, model=None, h: float = FD_STEP) -> QuadExpansion:
    """Expand a batched scalar cost at a single (state, action) point."""

    def wrapped(xs, us, ts):
        return cost_fn(xs, us)

    return fd_expand_stages(wrapped, model, np.asarray(state, dtype=float)[None, :],
                            np.asarray(action, dtype=float)[None, :],
                            np.zeros(1, dtype=int), h)[0]


class _StageCost:
    """Shared conveniences over the batched cost interface."""

    def stage_cost(self, state, action, t: int) -> float:
        return float(self.stage_cost_batch(np.asarray(state, dtype=float)[None, :],
                                           np.asarray(action, dtype=float)[None, :],
                                           np.array([t]))[0])

    def terminal_cost(self, state) -> float:
        return float(self.terminal_cost_batch(np.asarray(state, dtype=float)[None, :])[0])

    def trajectory_cost(self, states, actions) -> float:
        T = np.asarray(actions).shape[0]
        stage = self.stage_cost_batch(np.asarray(states, dtype=float)[:T],
                                      np.asarray(actions, dtype=float),
                                      np.arange(T))
        return float(np.sum(stage) + self.terminal_cost_batch(
            np.asarray(states, dtype=float)[T][None, :])[0])

    def expand_trajectory(self, model, states, actions, h: float = FD_STEP):
        T = np.asarray(actions).shape[0]
        stages = fd_expand_stages(self.stage_cost_batch, model, states, actions,
                                  np.arange(T), h)
        term = fd_expand_terminal(self.terminal_cost_batch, model,
                                  np.asarray(states, dtype=float)[T], h)
        return stages, term


class TaskCost(_StageCost):
    """The flight task cost with a structured expansion.

    The smooth terms are differenced directly. The obstacle hinge is linear in
    the clearance, so its raw Hessian carries the (possibly indefinite)
    curvature of the distance field; the expansion instead uses the
    Gauss-Newton outer product of the distance gradient, which keeps the
    state block positive semidefinite. At the kink the hinge contributes the
    zero subgradient.
    """

    def __init__(self, env: Environment, targets: TaskTargets,
                 weights: CostWeights = CostWeights()):
        self.env = env
        self.targets = targets
        self.weights = weights
        self._smooth_weights = CostWeights(
            velocity=weights.velocity, height=weights.height,
            orientation=weights.orientation,
            angular_velocity=weights.angular_velocity,
            action=weights.action, obstacle=0.0)
        self._hover = np.asarray(targets.hover_action, dtype=float)

    def stage_cost_batch(self, states, actions, ts):
        return task_cost(states, actions, self.targets, self.env, self.weights)

    def terminal_cost_batch(self, states):
        u = np.broadcast_to(self._hover, states.shape[:-1] + (4,))
        return task_cost(states, u, self.targets, self.env, self.weights)

    def _hinge_terms(self, positions, h: float):
        """Active-set hinge value/gradient per point, gradient by central FD
        over the three position coordinates."""
        p = np.asarray(positions, dtype=float)
        d = signed_distance(self.env, p)
        active = d < self.targets.safe_distance_m
        grad = np.zeros_like(p)
        if np.any(active):
            pa = p[active]
            offs = np.concatenate([np.eye(3) * h, -np.eye(3) * h])
            dvals = signed_distance(self.env, pa[:, None, :] + offs[None, :, :])
            grad[active] = (dvals[:, :3] - dvals[:, 3:]) / (2.0 * h)
        value = np.maximum(self.targets.safe_distance_m - d, 0.0)
        return value, grad, active

    def expand_trajectory(self, model, states, actions, h: float = FD_STEP):
        T = np.asarray(actions).shape[0]
        smooth = TaskCost(self.env, self.targets, self._smooth_weights)
        stage_exps, term = _StageCost.expand_trajectory(smooth, model, states,
                                                        actions, h)

        w = self.weights.obstacle
        xs = np.asarray(states, dtype=float)
        value, grad, active = self._hinge_terms(xs[:, POS], h)
        n = model.tangent_dim if model is not None else xs.shape[1]
        for t in range(T):
            if active[t]:
                g = grad[t]
                stage_exps[t].grad[:3] += -w * g
                stage_exps[t].hess[:3, :3] += w * np.outer(g, g)
            stage_exps[t].const += w * value[t]
        tg, th, tc = term
        if active[T]:
            g = grad[T]
            tg = tg.copy()
            th = th.copy()
            tg[:3] += -w * g
            th[:3, :3] += w * np.outer(g, g)
        tc = tc + w * value[T]
        return stage_exps, (tg, th, tc)


class OfflineAugmentedCost(_StageCost):
    """Running cost of the offline maximum-entropy solve for one trajectory
    distribution: the task cost scaled by 1/nu_t, the action-mean multiplier
    term, and (after the first outer iteration) the negative log density of
    the linearized policy. The controller-entropy term is realized by the
    optimizer itself, not by this integrand."""

    def __init__(self, task: TaskCost, nu, lam, policy_lin=None, model=None):
        self.task = task
        self.nu = np.asarray(nu, dtype=float)
        self.lam = np.asarray(lam, dtype=float)
        self.policy_lin = policy_lin
        self.model = model
        if np.any(self.nu <= 0.0):
            raise ValueError("nu must be positive")

    def _extra_batch(self, states, actions, ts):
        ts = np.asarray(ts, dtype=int)
        out = -np.sum(actions * self.lam[ts], axis=-1) / self.nu[ts]
        if self.policy_lin is not None:
            out = out + self.policy_lin.nll(actions, states, ts, self.model)
        return out

    def stage_cost_batch(self, states, actions, ts):
        ts = np.asarray(ts, dtype=int)
        base = self.task.stage_cost_batch(states, actions, ts) / self.nu[ts]
        return base + self._extra_batch(states, actions, ts)

    def terminal_cost_batch(self, states):
        return self.task.terminal_cost_batch(states) / self.nu[-1]

    def expand_trajectory(self, model, states, actions, h: float = FD_STEP):
        T = np.asarray(actions).shape[0]
        stages, (tg, th, tc) = self.task.expand_trajectory(model, states, actions, h)
        stages = [stages[t].scaled(1.0 / self.nu[t]) for t in range(T)]
        extra = fd_expand_stages(self._extra_batch, model, states, actions,
                                 np.arange(T), h)
        stages = [stages[t] + extra[t] for t in range(T)]
        s = 1.0 / self.nu[-1]
        return stages, (s * tg, s * th, s * tc)


def augmented_offline_cost(state, action, t: int, task: TaskCost, nu, lam,
                           policy_lin=None, model=None) -> float:
    """Point evaluation of the offline augmented running cost."""
    return OfflineAugmentedCost(task, nu, lam, policy_lin, model).stage_cost(
        state, action, t)


class SurrogateCost(_StageCost):
    """Receding-horizon tracking objective built from reference state
    marginals: negative log density of the propagated marginal at each future
    step, the policy deviation term, and the action-mean multiplier term.

    Stage index s is local to the window [t0, t0 + H]; the marginal term
    applies for s >= 1 (the current state is known exactly) and the action
    terms on s in [0, H - 1].
    """

    def __init__(self, marginals, ref_states, nu, lam, policy_lin=None,
                 model=None, t0: int = 0, cov_reg: float = 1e-6):
        self.horizon = len(marginals)
        self.ref_states = np.asarray(ref_states, dtype=float)
        if self.ref_states.shape[0] != self.horizon + 1:
            raise ValueError("need one reference state per window step")
        self.nu = np.asarray(nu, dtype=float)
        self.lam = np.asarray(lam, dtype=float)
        self.policy_lin = policy_lin
        self.model = model
        self.t0 = t0
        self.means = np.stack([m.mean for m in marginals])
        n = self.means.shape[1]
        covs = np.stack([m.cov for m in marginals]) + cov_reg * np.eye(n)
        self.precisions = np.linalg.inv(covs)
        sign, logdet = np.linalg.slogdet(2.0 * np.pi * covs)
        self.norm_consts = 0.5 * logdet

    def _marginal_nll(self, states, ss):
        """ss are local indices in [1, H]."""
        xi = self.model.to_tangent(states, self.ref_states[ss])
        r = xi - self.means[ss - 1]
        quad = np.empty(r.shape[0])
        for s, sel in iter_index_groups(ss):
            rs = r[sel]
            quad[sel] = 0.5 * np.einsum("bi,bi->b", rs @ self.precisions[s - 1], rs)
        return quad + self.norm_consts[ss - 1]

    def stage_cost_batch(self, states, actions, ss):
        ss = np.asarray(ss, dtype=int)
        out = -np.sum(actions * self.lam[ss], axis=-1)
        if self.policy_lin is not None:
            out = out + self.nu[ss] * self.policy_lin.nll(
                actions, states, self.t0 + ss, self.model)
        future = ss >= 1
        if np.any(future):
            out = out.astype(float, copy=True)
            out[future] += self._marginal_nll(states[future], ss[future])
        return out

    def terminal_cost_batch(self, states):
        ss = np.full(states.shape[0], self.horizon, dtype=int)
        return self._marginal_nll(states, ss)


def surrogate_cost(marginals, ref_states, nu, lam, policy_lin=None,
                   model=None, t0: int = 0, cov_reg: float = 1e-6) -> SurrogateCost:
    """Build the per-window surrogate tracking cost (callable cost object)."""
    return SurrogateCost(marginals, ref_states, nu, lam, policy_lin, model,
                         t0, cov_reg)
