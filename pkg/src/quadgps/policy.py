"""Conditionally Gaussian sensor policy and its supporting fits.

The policy mean is a small fully connected network mapping the 40-dim
observation through two 40-unit ReLU layers to the 4 rotor commands, with a
constant action covariance solved in closed form from the per-sample
controller precisions. Inputs are whitened with statistics frozen after the
first batch of data.

Trajectory optimization needs the policy as a function of STATE, which the
network is not; that view is recovered per trajectory distribution by ridge
regression of the network's actions on visited states, stabilized by a
Gaussian-mixture prior over pooled (state, action) pairs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cost import iter_index_groups

logger = logging.getLogger(__name__)

OBS_DIM = 40
ACTION_DIM = 4
HIDDEN = (40, 40)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class PolicyFitError(RuntimeError):
    pass


@dataclass
class PolicyNet:
    weights: list            # [W1 (obs,h1), W2 (h1,h2), W3 (h2,act)]
    biases: list             # [b1, b2, b3]
    sigma: np.ndarray        # (4, 4) constant action covariance
    obs_mean: np.ndarray     # (40,)
    obs_scale: np.ndarray    # (40,)

    def copy(self) -> "PolicyNet":
        return PolicyNet([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases],
                         self.sigma.copy(), self.obs_mean.copy(),
                         self.obs_scale.copy())


def init_policy(rng, obs_dim: int = OBS_DIM, hidden=HIDDEN,
                action_dim: int = ACTION_DIM) -> PolicyNet:
    """Uniform fan-in initialization, seeded for reproducibility."""
    sizes = [obs_dim, *hidden, action_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return PolicyNet(weights, biases, np.eye(action_dim),
                     np.zeros(obs_dim), np.ones(obs_dim))


def set_normalization(net: PolicyNet, observations) -> PolicyNet:
    """Fit per-dimension whitening statistics; scale floors avoid blowing up
    constant channels (e.g. saturated range readings)."""
    obs = np.asarray(observations, dtype=float).reshape(-1, net.obs_mean.shape[0])
    mean = obs.mean(axis=0)
    scale = np.maximum(obs.std(axis=0), 1e-3)
    out = net.copy()
    out.obs_mean = mean
    out.obs_scale = scale
    return out


def _forward_cached(net: PolicyNet, obs):
    x = (np.asarray(obs, dtype=float) - net.obs_mean) / net.obs_scale
    acts = [x]
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        x = np.maximum(x @ W + b, 0.0)
        acts.append(x)
    out = x @ net.weights[-1] + net.biases[-1]
    return out, acts


def forward(net: PolicyNet, obs) -> np.ndarray:
    """Mean action for observations (..., 40)."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != net.obs_mean.shape[0]:
        raise ValueError(f"observation must have {net.obs_mean.shape[0]} components")
    flat = obs.reshape(-1, obs.shape[-1])
    out, _ = _forward_cached(net, flat)
    return out.reshape(obs.shape[:-1] + (out.shape[-1],))


def input_jacobian(net: PolicyNet, obs) -> np.ndarray:
    """d(mean action)/d(observation), via reverse accumulation."""
    obs = np.asarray(obs, dtype=float)
    out, acts = _forward_cached(net, obs[None, :])
    m = out.shape[1]
    J = net.weights[-1].T.copy()                   # (m, h2)
    for W, act in zip(reversed(net.weights[:-1]), reversed(acts[1:])):
        J = (J * (act[0] > 0.0)) @ W.T
    return J / net.obs_scale


def _loss_and_grads(net: PolicyNet, obs, targets, precisions, nu, lam):
    """Weighted imitation loss over a batch and its exact parameter gradient.

    Per sample: nu * 0.5 (mu - g)' P (mu - g) + lam' mu, averaged.
    """
    B = obs.shape[0]
    mu, acts = _forward_cached(net, obs)
    err = mu - targets
    pe = np.einsum("bij,bj->bi", precisions, err)
    loss = float(np.mean(0.5 * nu * np.einsum("bi,bi->b", err, pe)
                         + np.einsum("bi,bi->b", lam, mu)))
    dmu = (nu[:, None] * pe + lam) / B

    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    delta = dmu
    for layer in range(len(net.weights) - 1, -1, -1):
        grads_w[layer] = acts[layer].T @ delta
        grads_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ net.weights[layer].T) * (acts[layer] > 0.0)
    return loss, grads_w, grads_b


def kl_supervised_loss(net: PolicyNet, batch: dict):
    """Batch loss and gradient for the action-matching objective.

    batch keys: obs (B, 40), target_mean (B, 4), precision (B, 4, 4),
    nu (B,), lam (B, 4). Constant covariance terms are excluded; the
    covariance is handled by closed_form_sigma.
    """
    loss, gw, gb = _loss_and_grads(
        net, np.asarray(batch["obs"], dtype=float),
        np.asarray(batch["target_mean"], dtype=float),
        np.asarray(batch["precision"], dtype=float),
        np.asarray(batch["nu"], dtype=float),
        np.asarray(batch["lam"], dtype=float))
    return loss, (gw, gb)


@dataclass
class TrainSettings:
    steps: int = 20000
    batch_size: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    log_every: int = 1000


@dataclass
class TrainingSet:
    """Flattened supervision tuples collected from controller rollouts."""

    traj_index: np.ndarray   # (S,)
    sample_index: np.ndarray  # (S,)
    step: np.ndarray         # (S,)
    states: np.ndarray       # (S, 13)
    obs: np.ndarray          # (S, 40)
    target_mean: np.ndarray  # (S, 4) controller mean action at the sample
    precision: np.ndarray    # (S, 4, 4)
    gains: np.ndarray        # (S, 4, n) feedback around the sampled state
    nu: np.ndarray           # (S,)
    lam: np.ndarray          # (S, 4)

    def __len__(self) -> int:
        return self.states.shape[0]


def train(net: PolicyNet, data: TrainingSet, settings: TrainSettings,
          rng) -> tuple[PolicyNet, float]:
    """Adaptive-moment SGD on the imitation objective with uniform sampling
    and per-epoch reshuffling. Returns the trained net and final loss."""
    if len(data) == 0:
        raise PolicyFitError("empty training set")
    out = net.copy()
    params = out.weights + out.biases
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]

    S = len(data)
    order = rng.permutation(S)
    cursor = 0
    loss = float("nan")
    for step_idx in range(1, settings.steps + 1):
        if cursor + settings.batch_size > S:
            order = rng.permutation(S)
            cursor = 0
        idx = order[cursor:cursor + settings.batch_size]
        if idx.size == 0:
            idx = order
        cursor += settings.batch_size

        loss, gw, gb = _loss_and_grads(out, data.obs[idx], data.target_mean[idx],
                                       data.precision[idx], data.nu[idx],
                                       data.lam[idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step_idx}")
        grads = gw + gb
        lr = settings.learning_rate
        b1, b2, eps = settings.beta1, settings.beta2, settings.epsilon
        for p, g, ms, vs in zip(params, grads, m_state, v_state):
            ms += (1.0 - b1) * (g - ms)
            vs += (1.0 - b2) * (g * g - vs)
            mhat = ms / (1.0 - b1**step_idx)
            vhat = vs / (1.0 - b2**step_idx)
            p -= lr * mhat / (np.sqrt(vhat) + eps)
        if settings.log_every and step_idx % settings.log_every == 0:
            logger.info("policy training step %d/%d loss %.6g",
                        step_idx, settings.steps, loss)
    return out, loss


def closed_form_sigma(precisions, n_distributions: int, steps=None) -> np.ndarray:
    """Constant policy covariance from controller precisions.

    Per step t the covariance solves to the inverse of (1/N) sum_ij P_tij.
    With samples pooled across steps the per-step sums are averaged first,
    then divided by N and inverted. Raises on a singular sum.
    """
    P = np.asarray(precisions, dtype=float)
    if P.ndim != 3 or P.shape[0] == 0:
        raise ValueError("need a non-empty stack of precision matrices")
    if steps is None:
        total = P.sum(axis=0)
    else:
        steps = np.asarray(steps)
        uniq = np.unique(steps)
        total = np.zeros_like(P[0])
        for s in uniq:
            total += P[steps == s].sum(axis=0)
        total /= uniq.size
    avg = total / float(n_distributions)
    try:
        sigma = np.linalg.inv(avg)
    except np.linalg.LinAlgError:
        raise ValueError("precision sum is singular") from None
    return 0.5 * (sigma + sigma.T)


# ---------------------------------------------------------------------------
# Time-varying linear-Gaussian view of the policy
# ---------------------------------------------------------------------------

@dataclass
class LinearizedPolicy:
    """Per-step affine-Gaussian estimate of the policy as a function of the
    tangent state around a fixed reference trajectory."""

    A: np.ndarray            # (T, 4, n)
    b: np.ndarray            # (T, 4)
    S: np.ndarray            # (T, 4, 4)
    ref_states: np.ndarray   # (T, 13) chart centers
    offset: int = 0          # added to incoming step indices
    _S_inv: np.ndarray = field(init=False, repr=False, default=None)
    _S_norm: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self._S_inv = np.linalg.inv(self.S)
        sign, logdet = np.linalg.slogdet(2.0 * np.pi * self.S)
        self._S_norm = 0.5 * logdet

    def shifted(self, offset: int) -> "LinearizedPolicy":
        return replace(self, offset=self.offset + offset)

    def mean(self, states, ts, model) -> np.ndarray:
        ts = np.asarray(ts, dtype=int) + self.offset
        states = np.asarray(states, dtype=float)
        xi = model.to_tangent(states, self.ref_states[ts])
        out = np.empty((xi.shape[0], self.b.shape[1]))
        for t, sel in iter_index_groups(ts):
            out[sel] = xi[sel] @ self.A[t].T + self.b[t]
        return out

    def nll(self, actions, states, ts, model) -> np.ndarray:
        """Negative log density of the fitted Gaussian at (state, action)."""
        ts = np.asarray(ts, dtype=int) + self.offset
        states = np.asarray(states, dtype=float)
        xi = model.to_tangent(states, self.ref_states[ts])
        r = np.asarray(actions, dtype=float)
        quad = np.empty(r.shape[0])
        for t, sel in iter_index_groups(ts):
            rs = r[sel] - (xi[sel] @ self.A[t].T + self.b[t])
            quad[sel] = 0.5 * np.einsum("bi,bi->b", rs @ self._S_inv[t], rs)
        return quad + self._S_norm[ts]


def _gmm_moments(gmm, points):
    """Prior moments from the mixture posterior at the query points."""
    resp = gmm.predict_proba(points)
    wts = resp.mean(axis=0)
    mu0 = wts @ gmm.means_
    diff = gmm.means_ - mu0
    phi = np.einsum("k,kij->ij", wts, gmm.covariances_) \
        + np.einsum("k,ki,kj->ij", wts, diff, diff)
    return mu0, phi


def fit_linearized_policy(net: PolicyNet, records, ref_states, model,
                          n_components: int = 20, prior_strength: float = 1.0,
                          seed: int = 0, reg: float = 1e-9,
                          min_samples_per_component: int = 20,
                          gain_cap: float = 200.0) -> LinearizedPolicy:
    """Per-step affine fit of the network's action against the tangent state.

    records: rollouts of one trajectory distribution; each provides visited
    states and observations. The network is evaluated at the recorded
    observations and regressed on tangent-state coordinates, blended with a
    normal-inverse-Wishart prior whose moments come from a Gaussian mixture
    over all (state, action) pairs pooled across time.
    """
    from sklearn.mixture import GaussianMixture

    if not records:
        raise PolicyFitError("no rollouts to fit")
    ref_states = np.asarray(ref_states, dtype=float)
    T = ref_states.shape[0] - 1 if ref_states.shape[0] > 1 else 1
    n = model.tangent_dim
    m = net.biases[-1].shape[0]

    per_step: list[list] = [[] for _ in range(T)]
    pooled = []
    for rec in records:
        acts = forward(net, rec.observations)
        for t in range(rec.length):
            xi = model.to_tangent(rec.states[t], ref_states[t])
            pair = np.concatenate([xi, acts[t]])
            per_step[t].append(pair)
            pooled.append(pair)
    pooled = np.asarray(pooled)
    if pooled.shape[0] < 2:
        raise PolicyFitError("too few samples to fit the policy linearization")

    k = int(np.clip(pooled.shape[0] // min_samples_per_component, 1,
                    n_components))
    gmm = GaussianMixture(n_components=k, covariance_type="full",
                          reg_covar=1e-9, random_state=seed, n_init=1)
    gmm.fit(pooled)

    A = np.zeros((T, m, n))
    b = np.zeros((T, m))
    S = np.zeros((T, m, m))
    for t in range(T):
        pts = np.asarray(per_step[t]) if per_step[t] else np.zeros((0, n + m))
        if pts.shape[0]:
            mu0, phi = _gmm_moments(gmm, pts)
            N = pts.shape[0]
            # weight the prior like the observed samples; a handful of points
            # per step cannot support a 16-dim joint on their own
            m0 = n0 = prior_strength * N
            mun = pts.mean(axis=0)
            centered = pts - mun
            empsig = centered.T @ centered / N
            dm = mun - mu0
            sigma = (N * empsig + phi * n0 + (N * m0) / (N + m0) * np.outer(dm, dm)) \
                / (N + n0)
        else:
            # no surviving samples at this step: prior only
            mu0, phi = _gmm_moments(gmm, pooled)
            mun = mu0
            sigma = phi
        sigma = 0.5 * (sigma + sigma.T)
        # ridge scaled to the state block so weakly excited directions give
        # small gains instead of blowing up
        ridge = reg * np.trace(sigma[:n, :n]) / n + 1e-12
        sxx = sigma[:n, :n] + ridge * np.eye(n)
        sxu = sigma[:n, n:]
        A[t] = np.linalg.solve(sxx, sxu).T
        if gain_cap is not None:
            # a handful of samples per step cannot identify gains beyond the
            # controller scale; spectrally cap the map and keep it anchored
            # at the sample mean
            U, sv, Vt = np.linalg.svd(A[t], full_matrices=False)
            if sv[0] > gain_cap:
                A[t] = (U * np.minimum(sv, gain_cap)) @ Vt
        b[t] = mun[n:] - A[t] @ mun[:n]
        resid = (sigma[n:, n:] - A[t] @ sxu - sxu.T @ A[t].T
                 + A[t] @ sxx @ A[t].T)
        S[t] = 0.5 * (resid + resid.T) + net.sigma
    return LinearizedPolicy(A, b, S, ref_states[:T])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_policy(net: PolicyNet, path) -> None:
    """Self-contained checkpoint: little-endian float64 arrays for every
    layer, the covariance, and the normalization statistics."""
    arrays = {"format_version": np.array([CHECKPOINT_VERSION], dtype="<i8"),
              "n_layers": np.array([len(net.weights)], dtype="<i8"),
              "sigma": net.sigma.astype("<f8"),
              "obs_mean": net.obs_mean.astype("<f8"),
              "obs_scale": net.obs_scale.astype("<f8")}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"W{i}"] = w.astype("<f8")
        arrays[f"b{i}"] = b.astype("<f8")
    from .serialization import savez_deterministic
    savez_deterministic(path, arrays)


def load_policy(path) -> PolicyNet:
    data = np.load(path)
    try:
        version = int(data["format_version"][0])
        if version != CHECKPOINT_VERSION:
            raise PolicyFitError(f"unsupported checkpoint version {version}")
        n_layers = int(data["n_layers"][0])
        weights = [np.array(data[f"W{i}"]) for i in range(n_layers)]
        biases = [np.array(data[f"b{i}"]) for i in range(n_layers)]
        net = PolicyNet(weights, biases, np.array(data["sigma"]),
                        np.array(data["obs_mean"]), np.array(data["obs_scale"]))
    except KeyError as exc:
        raise PolicyFitError(f"corrupt policy checkpoint: missing {exc}") from None
    finally:
        data.close()
    for w in net.weights + net.biases + [net.sigma]:
        if not np.all(np.isfinite(w)):
            raise PolicyFitError("corrupt policy checkpoint: non-finite values")
    return net
