"""Iterative LQG trajectory optimization.

The solver works against two small duck-typed interfaces:

  model: step(x, u), to_tangent(x, ref), from_tangent(ref, xi),
         linearize_trajectory(states, actions) -> list[LinearDynamics],
         initial_actions(x1, T), tangent_dim, action_dim
  cost:  trajectory_cost(states, actions) -> float,
         expand_trajectory(model, states, actions) ->
             (list[QuadExpansion], (term_grad, term_hess, term_const))

The solution is a time-varying linear-Gaussian controller around the final
nominal trajectory; its per-step covariance is the inverse of the regularized
action-curvature block, which is also the action distribution of the
maximum-entropy variant of the objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .cost import QuadExpansion
from .dynamics import LinearDynamics

logger = logging.getLogger(__name__)


class QuuNotPositiveDefinite(RuntimeError):
    def __init__(self, t: int, mu: float):
        super().__init__(f"action curvature not positive definite at step {t} (mu={mu:g})")
        self.t = t
        self.mu = mu


class RolloutDiverged(RuntimeError):
    """Forward rollout produced a non-finite state."""


@dataclass
class LinGaussController:
    """Time-varying linear-Gaussian controller around a nominal trajectory.

    Action law at state x and step t:
        u = u_nom[t] + alpha * k[t] + K[t] @ model.to_tangent(x, x_nom[t])
    sampled with covariance C[t] when stochastic.
    """

    K: np.ndarray        # (T, m, n)
    k: np.ndarray        # (T, m)
    C: np.ndarray        # (T, m, m)
    x_nom: np.ndarray    # (T+1, state repr dim)
    u_nom: np.ndarray    # (T, m)

    @property
    def horizon(self) -> int:
        return self.u_nom.shape[0]

    def action_mean(self, x, t: int, model, alpha: float = 1.0):
        xi = model.to_tangent(np.asarray(x, dtype=float), self.x_nom[t])
        return self.u_nom[t] + alpha * self.k[t] + self.K[t] @ xi

    def sample_action(self, x, t: int, model, rng):
        mean = self.action_mean(x, t, model)
        chol = np.linalg.cholesky(self.C[t])
        return mean + chol @ rng.standard_normal(mean.shape[0])

    def entropy(self, t: int) -> float:
        m = self.C.shape[1]
        sign, logdet = np.linalg.slogdet(self.C[t])
        return 0.5 * (m * np.log(2.0 * np.pi * np.e) + logdet)


@dataclass
class ValueExpansion:
    V_x: np.ndarray       # (T+1, n)
    V_xx: np.ndarray      # (T+1, n, n)
    Q_z: np.ndarray       # (T, n+m) stacked state/action gradient
    Q_zz: np.ndarray      # (T, n+m, n+m) stacked Hessian


@dataclass
class BackwardPassResult:
    K: np.ndarray
    k: np.ndarray
    C: np.ndarray
    value: ValueExpansion
    dV1: float            # sum k'Qu, linear predicted change coefficient
    dV2: float            # sum 0.5 k'Quu k, quadratic coefficient

    def predicted_change(self, alpha: float) -> float:
        return alpha * self.dV1 + alpha**2 * self.dV2


def backward_pass(dynamics, expansions, terminal, regularization: float = 0.0,
                  n: int | None = None) -> BackwardPassResult:
    """Riccati-style recursion over local models.

    dynamics: list[LinearDynamics]; expansions: list[QuadExpansion] over
    z = [dx; du]; terminal: (grad (n,), hess (n, n), const). The action block
    is regularized by +mu*I for the gain solves; gains use the regularized
    curvature while the predicted-change coefficients use the raw one.
    """
    T = len(dynamics)
    if n is None:
        n = dynamics[0].f_x.shape[0]
    m = dynamics[0].f_u.shape[1]

    tg, th = terminal[0], terminal[1]
    V_x = np.zeros((T + 1, n))
    V_xx = np.zeros((T + 1, n, n))
    V_x[T] = tg
    V_xx[T] = 0.5 * (th + th.T)
    Q_z = np.zeros((T, n + m))
    Q_zz = np.zeros((T, n + m, n + m))
    K = np.zeros((T, m, n))
    k = np.zeros((T, m))
    C = np.zeros((T, m, m))
    dV1 = 0.0
    dV2 = 0.0
    eye_m = np.eye(m)

    for t in range(T - 1, -1, -1):
        dyn = dynamics[t]
        exp = expansions[t]
        fz = np.hstack([dyn.f_x, dyn.f_u])
        vx = V_x[t + 1] + V_xx[t + 1] @ dyn.f_c
        qz = exp.grad + fz.T @ vx
        qzz = exp.hess + fz.T @ V_xx[t + 1] @ fz
        qzz = 0.5 * (qzz + qzz.T)
        Q_z[t] = qz
        Q_zz[t] = qzz

        q_x, q_u = qz[:n], qz[n:]
        q_xx = qzz[:n, :n]
        q_uu = qzz[n:, n:]
        q_ux = qzz[n:, :n]
        q_uu_reg = q_uu + regularization * eye_m
        try:
            cf = cho_factor(q_uu_reg, lower=True)
        except np.linalg.LinAlgError:
            raise QuuNotPositiveDefinite(t, regularization) from None

        K[t] = -cho_solve(cf, q_ux)
        k[t] = -cho_solve(cf, q_u)
        C[t] = cho_solve(cf, eye_m)
        C[t] = 0.5 * (C[t] + C[t].T)

        dV1 += float(k[t] @ q_u)
        dV2 += 0.5 * float(k[t] @ q_uu @ k[t])

        V_x[t] = q_x + K[t].T @ q_uu @ k[t] + K[t].T @ q_u + q_ux.T @ k[t]
        vxx = q_xx + K[t].T @ q_uu @ K[t] + K[t].T @ q_ux + q_ux.T @ K[t]
        V_xx[t] = 0.5 * (vxx + vxx.T)

    value = ValueExpansion(V_x, V_xx, Q_z, Q_zz)
    return BackwardPassResult(K, k, C, value, dV1, dV2)


def forward_rollout(model, cost, x_nom, u_nom, K, k, x1, alpha: float):
    """Deterministic closed-loop rollout of the updated control law with the
    feedforward scaled by alpha. Returns (states, actions, total cost)."""
    T = u_nom.shape[0]
    xs = np.zeros((T + 1,) + np.asarray(x1).shape)
    us = np.zeros_like(u_nom)
    xs[0] = x1
    for t in range(T):
        xi = model.to_tangent(xs[t], x_nom[t])
        us[t] = u_nom[t] + alpha * k[t] + K[t] @ xi
        try:
            xs[t + 1] = model.step(xs[t], us[t])
        except Exception as exc:  # dynamics-level divergence
            raise RolloutDiverged(f"dynamics diverged at step {t}") from exc
        if not np.all(np.isfinite(xs[t + 1])):
            raise RolloutDiverged(f"non-finite state at step {t}")
    total = cost.trajectory_cost(xs, us)
    if not np.isfinite(total):
        raise RolloutDiverged("non-finite trajectory cost")
    return xs, us, total


@dataclass
class IlqgOptions:
    max_iterations: int = 100
    tol: float = 1e-6
    mu_init: float = 1e-6
    mu_min: float = 1e-6
    mu_max: float = 1e10
    mu_factor: float = 10.0
    n_alphas: int = 11            # alpha in {1, 1/2, ..., 2^-(n-1)}


@dataclass
class IlqgResult:
    controller: LinGaussController
    cost: float
    converged: bool
    iterations: int
    mu: float
    cost_history: list = field(default_factory=list)
    value: ValueExpansion | None = None


def _regularized_backward(dynamics, expansions, terminal, mu, options, n):
    while True:
        try:
            return backward_pass(dynamics, expansions, terminal, mu, n=n), mu
        except QuuNotPositiveDefinite:
            mu = max(mu, options.mu_min) * options.mu_factor
            if mu > options.mu_max:
                raise


def ilqg_optimize(model, cost, x1, T: int, options: IlqgOptions = IlqgOptions(),
                  initial_actions=None, warm_start: LinGaussController | None = None
                  ) -> IlqgResult:
    """Iterate backward pass / line-searched forward rollout to convergence.

    The nominal is initialized from a warm-start controller (closed-loop
    rollout from x1) when given, otherwise from initial_actions or the
    model's default action sequence. The returned controller's gains and
    covariance come from a final backward pass around the accepted nominal.
    """
    x1 = np.asarray(x1, dtype=float)
    n = model.tangent_dim
    m = model.action_dim

    if warm_start is not None:
        Tw = warm_start.horizon
        K0 = warm_start.K
        k0 = np.zeros((Tw, m))
        xs, us, J = forward_rollout(model, cost, warm_start.x_nom,
                                    warm_start.u_nom, K0, k0, x1, 0.0)
    else:
        if initial_actions is None:
            initial_actions = model.initial_actions(x1, T)
        us = np.asarray(initial_actions, dtype=float).copy()
        xs = np.zeros((T + 1,) + x1.shape)
        xs[0] = x1
        for t in range(T):
            xs[t + 1] = model.step(xs[t], us[t])
        J = cost.trajectory_cost(xs, us)

    mu = options.mu_init
    alphas = 2.0 ** -np.arange(options.n_alphas)
    history = [J]
    converged = False
    iterations = 0

    for it in range(options.max_iterations):
        iterations = it + 1
        dynamics = model.linearize_trajectory(xs, us)
        expansions, terminal = cost.expand_trajectory(model, xs, us)
        try:
            bp, mu = _regularized_backward(dynamics, expansions, terminal, mu,
                                           options, n)
        except QuuNotPositiveDefinite:
            logger.warning("backward pass failed at max regularization; "
                           "returning best iterate")
            break

        # expected decrease of a full step already negligible: done
        if bp.predicted_change(1.0) > -options.tol * max(abs(J), 1.0):
            converged = True
            break

        accepted = False
        for alpha in alphas:
            try:
                xs2, us2, J2 = forward_rollout(model, cost, xs, us, bp.K, bp.k,
                                               x1, alpha)
            except RolloutDiverged:
                continue
            if J2 < J:
                xs, us, J = xs2, us2, J2
                accepted = True
                break
        if accepted:
            history.append(J)
            rel = (history[-2] - J) / max(abs(history[-2]), 1e-12)
            mu = max(mu / 2.0, options.mu_min)
            if rel < options.tol:
                converged = True
                break
        else:
            mu = max(mu, options.mu_min) * options.mu_factor
            if mu > options.mu_max:
                break

    # final backward pass so gains/covariance describe the final nominal
    dynamics = model.linearize_trajectory(xs, us)
    expansions, terminal = cost.expand_trajectory(model, xs, us)
    bp, mu = _regularized_backward(dynamics, expansions, terminal, mu, options, n)
    controller = LinGaussController(bp.K, bp.k, bp.C, xs, us)
    return IlqgResult(controller, J, converged, iterations, mu, history, bp.value)


# ---------------------------------------------------------------------------
# Gaussian KL divergence
# ---------------------------------------------------------------------------

def kl_gaussians(mean_a, cov_a, mean_b, cov_b) -> float:
    """KL(N_a || N_b) in closed form. Raises on non-positive-definite input."""
    mean_a = np.atleast_1d(np.asarray(mean_a, dtype=float))
    mean_b = np.atleast_1d(np.asarray(mean_b, dtype=float))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=float))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=float))
    d = mean_a.shape[0]
    try:
        la = np.linalg.cholesky(cov_a)
        lb = np.linalg.cholesky(cov_b)
    except np.linalg.LinAlgError:
        raise ValueError("covariance must be positive definite") from None
    solved = np.linalg.solve(cov_b, cov_a)
    diff = mean_b - mean_a
    maha = float(diff @ np.linalg.solve(cov_b, diff))
    logdet_a = 2.0 * float(np.sum(np.log(np.diag(la))))
    logdet_b = 2.0 * float(np.sum(np.log(np.diag(lb))))
    return 0.5 * (np.trace(solved) + maha - d + logdet_b - logdet_a)


# ---------------------------------------------------------------------------
# Generic linear model and quadratic cost (shared by tests and diagnostics)
# ---------------------------------------------------------------------------

class LinearModel:
    """x' = A x + B u + c with additive Gaussian noise; Euclidean charts."""

    def __init__(self, A, B, c=None, noise=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        n, m = self.B.shape
        self.c = np.zeros(n) if c is None else np.asarray(c, dtype=float)
        self.process_noise = (np.zeros((n, n)) if noise is None
                              else np.asarray(noise, dtype=float))
        self.state_dim = n
        self.tangent_dim = n
        self.action_dim = m
        self._noise_chol = None
        if np.any(self.process_noise):
            self._noise_chol = np.linalg.cholesky(
                self.process_noise + 1e-18 * np.eye(n))

    def step(self, x, u):
        return np.asarray(x, dtype=float) @ self.A.T + np.asarray(u, dtype=float) @ self.B.T + self.c

    def step_noisy(self, x, u, rng):
        nxt = self.step(x, u)
        if self._noise_chol is None:
            return nxt
        return nxt + self._noise_chol @ rng.standard_normal(self.state_dim)

    def to_tangent(self, x, ref):
        return np.asarray(x, dtype=float) - np.asarray(ref, dtype=float)

    def from_tangent(self, ref, xi):
        return np.asarray(ref, dtype=float) + np.asarray(xi, dtype=float)

    def linearize_trajectory(self, states, actions):
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        out = []
        for t in range(actions.shape[0]):
            f_c = self.step(states[t], actions[t]) - states[t + 1]
            out.append(LinearDynamics(self.A.copy(), self.B.copy(), f_c,
                                      self.process_noise))
        return out

    def initial_actions(self, x1, horizon):
        return np.zeros((horizon, self.action_dim))


class QuadraticCost:
    """0.5 x'Qx + q'x + 0.5 u'Ru + r'u per stage plus a terminal quadratic.
    Expansions are exact, which makes linear-quadratic problems a ground
    truth for the solver."""

    def __init__(self, Q, R, q=None, r=None, Qf=None, qf=None):
        self.Q = np.asarray(Q, dtype=float)
        self.R = np.asarray(R, dtype=float)
        n = self.Q.shape[0]
        m = self.R.shape[0]
        self.q = np.zeros(n) if q is None else np.asarray(q, dtype=float)
        self.r = np.zeros(m) if r is None else np.asarray(r, dtype=float)
        self.Qf = self.Q if Qf is None else np.asarray(Qf, dtype=float)
        self.qf = np.zeros(n) if qf is None else np.asarray(qf, dtype=float)

    def stage_cost_batch(self, states, actions, ts):
        x = np.asarray(states, dtype=float)
        u = np.asarray(actions, dtype=float)
        return (0.5 * np.einsum("bi,ij,bj->b", x, self.Q, x) + x @ self.q
                + 0.5 * np.einsum("bi,ij,bj->b", u, self.R, u) + u @ self.r)

    def terminal_cost_batch(self, states):
        x = np.asarray(states, dtype=float)
        return 0.5 * np.einsum("bi,ij,bj->b", x, self.Qf, x) + x @ self.qf

    def stage_cost(self, state, action, t):
        return float(self.stage_cost_batch(np.asarray(state)[None], np.asarray(action)[None], [t])[0])

    def terminal_cost(self, state):
        return float(self.terminal_cost_batch(np.asarray(state)[None])[0])

    def trajectory_cost(self, states, actions):
        T = np.asarray(actions).shape[0]
        return float(np.sum(self.stage_cost_batch(np.asarray(states)[:T],
                                                  actions, np.arange(T)))
                     + self.terminal_cost_batch(np.asarray(states)[T][None])[0])

    def expand_trajectory(self, model, states, actions, h=None):
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        T = actions.shape[0]
        n = self.Q.shape[0]
        m = self.R.shape[0]
        hess = np.zeros((n + m, n + m))
        hess[:n, :n] = self.Q
        hess[n:, n:] = self.R
        out = []
        for t in range(T):
            grad = np.concatenate([self.Q @ states[t] + self.q,
                                   self.R @ actions[t] + self.r])
            out.append(QuadExpansion(grad, hess.copy(),
                                     self.stage_cost(states[t], actions[t], t)))
        tg = self.Qf @ states[T] + self.qf
        return out, (tg, self.Qf.copy(), self.terminal_cost(states[T]))
